"""Conjugation of the linearized operator to constant coefficients at top order.

Four changes of variables, applied in order:

    S = diag(beta |D|^{-1/2}, beta^{-1} |D|^{1/2})      beta = a^{-1/4}
    B : (eta, zeta) = ((z + conj z)/sqrt2, (z - conj z)/(i sqrt2))
    A : h(phi) -> h(phi + omega alpha(phi))           m (1 + w.d alpha) = sqrt(a)
    V = exp(Y),  Y = [[0, i v |D|^{-1}], [conj, 0]]    v = b0 / (2m)

give L = W2 L4 W1^{-1} with W1 = S B A V, W2 = S B A rho V, and

    L4 = w.d + i m T|D| + R4,   T = diag(1, -1).

Operators after step B are PairedOperator objects; the w.d part is always
kept symbolic so that only bounded (or |D|-weighted) pieces are stored.
"""
from dataclasses import dataclass, field

import numpy as np

from .spectral_core import (DiffeoError, SpaceTimeField, ToroidalFunction, c1_norm,
                            inverse_omega_dphi, invert_diffeo, torus_diffeo_compose)
from .toeplitz_ops import (PairedOperator, ToeplitzOperator, block_decay_norm, compose,
                           compose_paired, operator_exp, projection_operator)

SQ2 = np.sqrt(2.0)


def _real_apply(f, func, l_out):
    """func applied pointwise to a real toroidal function, re-expanded to l_out."""
    return f.apply_grid(lambda x: func(np.real(x)), l_max=l_out).real_part()


@dataclass
class Symmetrized:
    beta: ToroidalFunction
    a0: ToroidalFunction
    a1: ToroidalFunction
    q1: SpaceTimeField
    g1: SpaceTimeField
    R1: ToeplitzOperator


@dataclass
class RegularizationResult:
    m: float
    alpha: ToroidalFunction
    alpha_tilde: ToroidalFunction
    rho: ToroidalFunction
    b0: ToroidalFunction
    beta: ToroidalFunction
    a0: ToroidalFunction
    a1: ToroidalFunction
    v: ToroidalFunction
    R3: ToeplitzOperator
    R4: PairedOperator
    V: PairedOperator
    V_inv: PairedOperator
    ctx: object
    l_op: int
    report: dict = field(default_factory=dict)

    # the changes of variables, acting on fields
    def S(self, eta, zeta):
        return eta.abs_D(-0.5).times(self.beta), zeta.abs_D(0.5).times(self.beta_inv)

    def S_inv(self, h, k):
        return h.times(self.beta_inv).abs_D(0.5), k.times(self.beta).abs_D(-0.5)

    @property
    def beta_inv(self):
        if "_beta_inv" not in self.__dict__:
            self._beta_inv = _real_apply(self.beta, lambda x: 1.0 / x, self.beta.l_max)
        return self._beta_inv

    @property
    def rho_inv(self):
        if "_rho_inv" not in self.__dict__:
            self._rho_inv = _real_apply(self.rho, lambda x: 1.0 / x, self.rho.l_max)
        return self._rho_inv

    def A(self, z):
        return torus_diffeo_compose(z, self.alpha, self.ctx)

    def A_inv(self, z):
        return torus_diffeo_compose(z, self.alpha_tilde, self.ctx)

    def W1(self, z):
        """S B A V applied to the complex field z; returns the real pair (h, k)."""
        return self.S(*to_real(self.A(self.V.apply(z))))

    def W2(self, z):
        return self.S(*to_real(self.A(self.V.apply(z).times(self.rho))))

    def W1_inv(self, h, k):
        return self.V_inv.apply(self.A_inv(to_complex(*self.S_inv(h, k))))

    def W2_inv(self, h, k):
        return self.V_inv.apply(self.A_inv(to_complex(*self.S_inv(h, k))).times(self.rho_inv))

    def apply_L4(self, z):
        """Upper component of L4 (z, conj z)."""
        return z.dphi(self.ctx.omega) + 1j * self.m * z.abs_D() + self.R4.apply(z)


def to_complex(eta, zeta):
    return (eta + 1j * zeta) * (1 / SQ2)


def to_real(z):
    zc = z.conj()
    return (z + zc) * (1 / SQ2), (z - zc) * (-1j / SQ2)


def symmetrize(L, l_coef=None, l_op=None):
    """Step S: beta = a^{-1/4}, a1 = sqrt(a), a0 = w.d beta / beta, R1 = beta^2 |D|^{-1/2} R |D|^{-1/2}."""
    a = L.a
    g = np.real(a.grid())
    if np.min(g) <= 0:
        raise ValueError("coefficient a is not strictly positive")
    l_coef = a.l_max if l_coef is None else l_coef
    l_op = L.calR.l_max if l_op is None else l_op
    beta = _real_apply(a, lambda x: x ** -0.25, l_coef)
    a1 = _real_apply(a, np.sqrt, l_coef)
    beta_inv = _real_apply(a, lambda x: x ** 0.25, l_coef)
    a0 = (beta.dphi(L.ctx.omega) * beta_inv).resize(l_coef)
    beta2 = _real_apply(a, lambda x: x ** -0.5, l_coef)
    q1 = L.q.resize(l_coef).abs_D(-0.5).times(beta2)
    g1 = L.g.resize(l_coef).abs_D(-0.5)
    R1 = projection_operator(q1, g1, l_out=l_op)
    return Symmetrized(beta, a0, a1, q1, g1, R1)


def complexify(sym, nu):
    """Step B: L2 = w.d + P2 z + Q2 conj z with P2 = i a1|D| + i R1/2, Q2 = a0 + i R1/2."""
    J = sym.R1.j_max
    R2 = 0.5 * sym.R1
    P = 1j * ToeplitzOperator.multiplication(sym.a1, J).right_abs_D() + 1j * R2
    Q = ToeplitzOperator.multiplication(sym.a0, J) + 1j * R2
    return PairedOperator(P, Q)


def reparametrize_time(sym, ctx, l_coef=None, l_op=None):
    """Step A: m = <a1>, alpha = (w.d)^{-1}(a1/m - 1), rho = A^{-1}(1 + w.d alpha)."""
    a1 = sym.a1
    l_coef = a1.l_max if l_coef is None else l_coef
    l_op = sym.R1.l_max if l_op is None else l_op
    m = float(np.real(a1.mean()))
    alpha = inverse_omega_dphi(a1 * (1.0 / m) - 1.0, ctx).real_part()
    if c1_norm(alpha) * np.linalg.norm(ctx.omega, np.inf) >= 1:
        raise DiffeoError("diffeomorphism condition fails for alpha")
    alpha_t = invert_diffeo(alpha, ctx, l_out=l_coef)
    rho = torus_diffeo_compose(alpha.dphi(ctx.omega) + 1.0, alpha_t, ctx).real_part()
    rho_inv = _real_apply(rho, lambda x: 1.0 / x, l_coef)
    b0 = (rho_inv * torus_diffeo_compose(sym.a0, alpha_t, ctx)).resize(l_coef).real_part()
    q3 = torus_diffeo_compose(sym.q1, alpha_t, ctx).times(rho_inv) * 0.5
    g3 = torus_diffeo_compose(sym.g1, alpha_t, ctx)
    R3 = projection_operator(q3, g3, l_out=l_op)
    return m, alpha, alpha_t, rho, b0, R3


def L3_paired(m, b0, R3):
    """L3 - w.d as a paired operator: P = i m |D| + i R3, Q = b0 + i R3."""
    J = R3.j_max
    P = 1j * m * ToeplitzOperator.abs_D(R3.nu, J) + 1j * R3
    Q = ToeplitzOperator.multiplication(b0, J) + 1j * R3
    return PairedOperator(P, Q)


def descent(m, b0, R3, ctx, l_op=None):
    """Step V: remove the order-zero off-diagonal term b0 conj z."""
    if m == 0:
        raise ValueError("m must be nonzero")
    J, nu = R3.j_max, R3.nu
    l_op = R3.l_max if l_op is None else l_op
    v = b0 * (1.0 / (2 * m))
    Yq = ToeplitzOperator.multiplication(1j * v, J).right_abs_D(-1.0)
    Y = PairedOperator(ToeplitzOperator.zeros(nu, 0, J), Yq).resize(l_op)
    V = operator_exp(Y)
    V_inv = operator_exp(-Y)
    K = L3_paired(m, b0, R3).resize(l_op)
    mT = PairedOperator(1j * m * ToeplitzOperator.abs_D(nu, J), ToeplitzOperator.zeros(nu, 0, J))
    conj_ = compose_paired(V_inv, compose_paired(K, V) + V.dphi(ctx.omega))
    R4 = conj_ - mT.resize(l_op)
    # order-zero off-diagonal coefficient of V^{-1} L3 V: b0 + [i m T|D|, Y]
    B0 = PairedOperator(ToeplitzOperator.zeros(nu, 0, J),
                        ToeplitzOperator.multiplication(b0, J)).resize(l_op)
    comm = compose_paired(mT, Y) - compose_paired(Y, mT)
    offdiag0 = (B0 + comm).norm((nu + 1) // 2 + 1)
    return v, Y, V, V_inv, R4, offdiag0


def regularize(L, l_coef=None, l_op=None):
    """Run the four steps and collect the coefficients, R4 and the transforms."""
    ctx = L.ctx
    nu = ctx.nu
    l_op = L.calR.l_max if l_op is None else l_op
    l_coef = L.a.l_max if l_coef is None else l_coef
    sym = symmetrize(L, l_coef, l_op)
    m, alpha, alpha_t, rho, b0, R3 = reparametrize_time(sym, ctx, l_coef, l_op)
    v, Y, V, V_inv, R4, off0 = descent(m, b0, R3, ctx, l_op)
    s0 = ctx.s0
    report = {
        "m": m,
        "m_minus_1": abs(m - 1),
        "a1_minus_1_s0": (sym.a1 - 1.0).norm(s0),
        "a0_s0": sym.a0.norm(s0),
        "b0_s0": b0.norm(s0),
        "R3_D_s0": block_decay_norm(R3.right_abs_D(), s0),
        "R4_D_s0": R4.norm_D(s0),
        "alpha_c1_omega": c1_norm(alpha) * float(np.linalg.norm(ctx.omega, np.inf)),
        "alpha_tilde_residual": getattr(alpha_t, "residual", None),
        "offdiag_order0": off0,
        "R4_hamiltonian_defect": R4.hamiltonian_defect(),
    }
    return RegularizationResult(m, alpha, alpha_t, rho, b0, sym.beta, sym.a0, sym.a1, v, R3, R4,
                                V, V_inv, ctx, l_op, report)


def symplectic_defect_S(beta, j_max):
    """max |S^T J S - J| over blocks, S = diag(beta|D|^{-1/2}, beta^{-1}|D|^{1/2})."""
    # S^T J S = [[0, s1^T s2], [-s2^T s1, 0]], so only s1^T s2 = Id needs checking
    s1 = ToeplitzOperator.multiplication(beta, j_max).right_abs_D(-0.5)
    s2 = ToeplitzOperator.multiplication(_real_apply(beta, lambda x: 1.0 / x, beta.l_max),
                                         j_max).right_abs_D(0.5)
    off = compose(s1.transpose(), s2, l_out=beta.l_max)
    I = ToeplitzOperator.identity(beta.nu, j_max, beta.l_max)
    return float(np.max(np.abs(off.A - I.A)))
