"""The forced Kirchhoff operator on zero-mean functions and its linearization.

With u, psi of zero average in x, the operator is

    F(u, psi) = (w.d u - psi,  w.d psi - (1 + eps int |u_x|^2 dx) u_xx - eps f)

and its derivative at (u, psi) is

    L[h, k] = (w.d h - k,  w.d k - a(phi) h_xx + R h),
    a = 1 + eps int |u_x|^2 dx,   R h = 2 eps u_xx int u_xx h dx.

Everything is a Galerkin truncation: nonlinear terms are computed exactly and
projected back onto the band of the unknowns.
"""
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .spectral_core import FrequencyContext, SpaceTimeField, ToroidalFunction, ell_grid
from .toeplitz_ops import ToeplitzOperator, apply, projection_operator


@dataclass
class StatePair:
    u: SpaceTimeField
    psi: SpaceTimeField
    eps: float

    def __post_init__(self):
        for name, f in (("u", self.u), ("psi", self.psi)):
            if not f.is_zero_mean():
                raise ValueError(f"{name} must have zero x-mean")

    @classmethod
    def zeros(cls, nu, l_max, j_max, eps):
        return cls(SpaceTimeField.zeros(nu, l_max, j_max), SpaceTimeField.zeros(nu, l_max, j_max), eps)

    def __add__(self, o):
        return StatePair(self.u + o.u, self.psi + o.psi, self.eps)

    def __sub__(self, o):
        return StatePair(self.u - o.u, self.psi - o.psi, self.eps)

    def scaled(self, t):
        return StatePair(t * self.u, t * self.psi, self.eps)

    def norm(self, s):
        return float(np.hypot(self.u.norm(s), self.psi.norm(s)))


def x_inner(u, v):
    """int_T u v dx as a toroidal function (full band, no truncation)."""
    J = min(u.j_max, v.j_max)
    U = u.resize(j_max=J).coeffs
    V = np.flip(v.resize(j_max=J).coeffs, axis=-1)
    c = fftconvolve(U, V, axes=list(range(u.nu))).sum(axis=-1)
    return ToroidalFunction(2 * np.pi * c)


def kirchhoff_coefficient(u, eps):
    """a(phi) = 1 + eps int |u_x|^2 dx, on the band 2 l_max."""
    ux = u.dx()
    return eps * x_inner(ux, ux.conj()) + 1.0


def eval_F(state, f, ctx):
    """Residual pair (F1, F2) on the band of the state."""
    u, psi, eps = state.u, state.psi, state.eps
    fp = f.zero_x_mean().resize(u.l_max, u.j_max)
    a = kirchhoff_coefficient(u, eps)
    F1 = u.dphi(ctx.omega) - psi
    F2 = psi.dphi(ctx.omega) - u.dx(2).times(a) - eps * fp
    return F1, F2


def eval_Hamiltonian(state, f, ctx=None):
    """The energy at fixed phi, returned as a toroidal function (full band)."""
    u, psi, eps = state.u, state.psi, state.eps
    ux = u.dx()
    kin = x_inner(psi, psi)
    pot = x_inner(ux, ux)
    quart = 0.5 * pot
    H = 0.5 * (kin + pot) + eps * (quart * quart)
    return H - eps * x_inner(f.zero_x_mean().resize(j_max=u.j_max), u)


@dataclass
class LinearizedOperator:
    a: ToroidalFunction
    calR: ToeplitzOperator
    ctx: FrequencyContext
    j_max: int
    q: SpaceTimeField = None
    g: SpaceTimeField = None

    @property
    def nu(self):
        return self.ctx.nu

    def apply(self, h, k, l_out=None):
        """L[h, k] truncated to the band of h."""
        l_out = h.l_max if l_out is None else l_out
        om = self.ctx.omega
        h, k = h.resize(l_out), k.resize(l_out)
        r1 = h.dphi(om) - k
        r2 = k.dphi(om) - h.dx(2).times(self.a) + apply(self.calR, h, l_out)
        return r1, r2

    def second_order_operator(self):
        """-a d_xx + R as a Toeplitz operator."""
        J = self.j_max
        mult = ToeplitzOperator.multiplication(self.a, J).right_space(lambda k: k.astype(float) ** 2)
        return mult + self.calR

    def to_dense(self, l_field):
        """Dense matrix of L on (h, k) vectors of the band |l| <= l_field (position order)."""
        J = self.j_max
        G1 = self.second_order_operator().to_dense(l_field)
        ell = ell_grid(self.nu, l_field).reshape(-1, self.nu)
        od = np.repeat(ell @ self.ctx.omega, 2 * J)
        W = np.diag(1j * od)
        I = np.eye(W.shape[0])
        return np.block([[W, -I], [G1, W]])

    def hamiltonian_defect(self):
        """Size of G - G^T, G = diag(-a d_xx + R, 1); zero iff R symmetric and a real."""
        G1 = self.second_order_operator()
        return float(np.max(np.abs(G1.transpose().A - G1.A), initial=0.0))


def linearize(state, ctx):
    u, eps = state.u, state.eps
    a = kirchhoff_coefficient(u, eps)
    uxx = u.dx(2)
    q = 2 * eps * uxx
    R = projection_operator(q, uxx)
    return LinearizedOperator(a.resize(max(a.l_max, R.l_max)), R, ctx, u.j_max, q, uxx)


def fd_directional(state, f, ctx, h, k, t=1e-6):
    """Central finite difference of F at state in direction (h, k)."""
    d = StatePair(h, k, state.eps).scaled(t)
    Fp = eval_F(state + d, f, ctx)
    Fm = eval_F(state - d, f, ctx)
    return [(p - m) * (1.0 / (2 * t)) for p, m in zip(Fp, Fm)]
