"""Linear stability along a quasi-periodic solution.

Space fields here are one-dimensional coefficient arrays c[j + J], j = -J..J.
The linearized flow in the original variables is

    d/dt v = p,   d/dt p = a(w t) v_xx - R(w t) v,

the zero mode decouples (v0(t) = v0 + p0 t) and in the reduced variables
the flow is d/dt y = -i D_inf y, block by block.
"""
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .regularization import SQ2
from .toeplitz_ops import _perm, _swap


class StepSizeInstability(RuntimeError):
    pass


@dataclass
class FlowSnapshot:
    t: float
    h_norm_s: float
    u_norm: float
    psi_norm: float


def space_norm(c, s):
    """H^s_x norm (sum <j>^{2s} |c_j|^2)^{1/2} of a centered coefficient array."""
    c = np.asarray(c)
    J = (c.shape[-1] - 1) // 2
    w = np.maximum(1, np.abs(np.arange(-J, J + 1))) ** (2 * s)
    return np.sqrt(np.sum(w * np.abs(c) ** 2, axis=-1))


def to_positions(c):
    J = (len(c) - 1) // 2
    return np.asarray(c)[_perm(J)]


def from_positions(z, mean=0.0):
    J = len(z) // 2
    c = np.zeros(2 * J + 1, complex)
    c[_perm(J)] = z
    c[J] = mean
    return c


def conj_positions(z):
    """Positions of conj(z) as a function of x: (conj z)_k = conj(z_{-k})."""
    return np.conj(z[_swap(len(z) // 2)])


def snapshots_csv(snaps):
    head = "t,h_norm_s,u_norm,psi_norm\n"
    return head + "".join(f"{s.t:.10g},{s.h_norm_s:.15e},{s.u_norm:.15e},{s.psi_norm:.15e}\n"
                          for s in snaps)


def block_propagators(D_inf, t):
    """exp(-i t D_j) for every block, through the eigendecomposition (exactly unitary)."""
    lam, U = np.linalg.eigh(D_inf.blocks)
    ph = np.exp(-1j * np.multiply.outer(np.atleast_1d(t), lam))
    return np.einsum("jab,tjb,jcb->tjac", U, ph, np.conj(U))


def propagate_reduced(D_inf, y0, t_grid):
    """y(t) = exp(-i t D_inf) y0, y in position order; returns (n_t, 2J)."""
    J = D_inf.j_max
    E = block_propagators(D_inf, t_grid)
    y = np.einsum("tjab,jb->tja", E, np.asarray(y0).reshape(J, 2))
    return y.reshape(len(np.atleast_1d(t_grid)), 2 * J)


def integrate_reduced(D_inf, h0, t_grid, s=1.0):
    """Reduced flow from the centered zero-mean coefficient array h0."""
    h0 = np.asarray(h0, complex)
    J = (len(h0) - 1) // 2
    if abs(h0[J]) > 0:
        raise ValueError("h0 must have zero x-mean")
    if J != D_inf.j_max:
        raise ValueError("h0 band must match the blocks")
    y = propagate_reduced(D_inf, to_positions(h0), t_grid)
    snaps = []
    for t, yt in zip(np.atleast_1d(t_grid), y):
        c = from_positions(yt)
        cc = np.conj(c[::-1])
        u = (c + cc) / SQ2
        psi = (c - cc) * (-1j / SQ2)
        snaps.append(FlowSnapshot(float(t), float(space_norm(c, s)), float(space_norm(u, s)),
                                  float(space_norm(psi, s - 1))))
    return snaps


def _coefficients_at(a, calR, omega, J):
    om = np.asarray(omega, float)

    def at(t):
        phi = om * t
        av = float(np.real(a(phi)[0]))
        Rm = calR.resize(j_max=J).at(phi) if calR is not None else None
        return av, Rm
    return at


def integrate_original(a, calR, omega, v0, psi0, t_grid, rtol=1e-11, atol=1e-13, s=1.0,
                       blowup=1e3, max_step=np.inf):
    """Integrate the linearized equation with an 8th-order Dormand-Prince scheme.

    v0, psi0 are centered coefficient arrays; their j = 0 entries follow the
    closed form v0(t) = v0 + p0 t. Returns (snapshots, v(t), p(t), C(s)).
    """
    v0 = np.asarray(v0, complex)
    psi0 = np.asarray(psi0, complex)
    J = (len(v0) - 1) // 2
    k = np.abs(np.arange(-J, J + 1)).astype(float)
    at = _coefficients_at(a, calR, omega, J)
    perm = _perm(J)
    nz = np.arange(2 * J + 1) != J
    mean_v, mean_p = v0[J], psi0[J]

    def rhs(t, y):
        v, p = y[:2 * J + 1], y[2 * J + 1:]
        av, Rm = at(t)
        dp = -av * k ** 2 * v
        if Rm is not None:
            Rv = np.zeros_like(v)
            Rv[perm] = Rm @ v[perm]
            dp = dp - Rv
        dp = np.where(nz, dp, 0.0)
        dv = np.where(nz, p, 0.0)
        return np.concatenate([dv, dp])

    y0 = np.concatenate([np.where(nz, v0, 0), np.where(nz, psi0, 0)])
    t_grid = np.asarray(t_grid, float)
    sol = solve_ivp(rhs, (t_grid[0], t_grid[-1]), y0, method="DOP853", t_eval=t_grid,
                    rtol=rtol, atol=atol, max_step=max_step)
    if not sol.success:
        raise StepSizeInstability(sol.message)
    V = sol.y[:2 * J + 1].T.copy()
    P = sol.y[2 * J + 1:].T.copy()
    V[:, J] = mean_v + mean_p * t_grid
    P[:, J] = mean_p
    mixed = space_norm(V, s) + space_norm(P, s - 1)
    init = mixed[0]
    C = float(np.max(mixed) / init) if init > 0 else 1.0
    if C > blowup:
        raise StepSizeInstability(f"norm amplification {C:.3g} exceeds {blowup:g}")
    snaps = [FlowSnapshot(float(t), float(space_norm(np.where(nz, V[i], 0), s)),
                          float(space_norm(V[i], s)), float(space_norm(P[i], s - 1)))
             for i, t in enumerate(t_grid)]
    return snaps, V, P, C


def default_horizon(omega, periods=10):
    return periods * 2 * np.pi / float(np.min(np.abs(omega)))


# changes of variables evaluated at a time: the reduced flow seen in the original variables

def _paired_at(op, phi):
    return op.P.at(phi), op.Q.at(phi)


def _apply_paired_at(PQ, z):
    P, Q = PQ
    return P @ z + Q @ conj_positions(z)


def reduced_to_original(reg, fin, y_of_tau, t):
    """(v, p)(t) = S(w t) B V(w tau) Phi(w tau) y(tau), tau = t + alpha(w t)."""
    ctx = reg.ctx
    om = np.asarray(ctx.omega, float)
    J = reg.R4.j_max
    Lop = reg.R4.l_max
    tau = t + float(np.real(reg.alpha(om * t)[0]))
    y = y_of_tau(tau)
    Phi = fin.Phi(ctx.nu, J, Lop)
    w = _apply_paired_at(_paired_at(Phi, om * tau), y)
    z = _apply_paired_at(_paired_at(reg.V, om * tau), w)
    zc = conj_positions(z)
    eta = (z + zc) / SQ2
    zeta = (z - zc) * (-1j / SQ2)
    b = float(np.real(reg.beta(om * t)[0]))
    kk = np.abs(np.arange(1, J + 1)).repeat(2).astype(float)
    return from_positions(b * kk ** -0.5 * eta), from_positions(kk ** 0.5 * zeta / b)


def original_to_reduced_initial(reg, fin, v0, p0):
    """y(tau0) with tau0 = alpha(0), inverting the maps of reduced_to_original at t = 0."""
    ctx = reg.ctx
    J = reg.R4.j_max
    Lop = reg.R4.l_max
    phi0 = np.zeros(ctx.nu)
    tau0 = float(np.real(reg.alpha(phi0)[0]))
    b = float(np.real(reg.beta(phi0)[0]))
    kk = np.arange(1, J + 1).repeat(2).astype(float)
    eta = to_positions(v0) * kk ** 0.5 / b
    zeta = to_positions(p0) * kk ** -0.5 * b
    z = (eta + 1j * zeta) / SQ2
    w = _apply_paired_at(_paired_at(reg.V_inv, np.asarray(ctx.omega) * tau0), z)
    y = _apply_paired_at(_paired_at(fin.Phi_inv(ctx.nu, J, Lop), np.asarray(ctx.omega) * tau0), w)
    return tau0, y


def compare_with_reduced(reg, fin, L, v0, p0, t_grid, inner=None, **kw):
    """Max relative gap between the integrated original flow and the transported reduced flow,
    on modes |j| <= inner (default J/2)."""
    J = reg.R4.j_max
    inner = J // 2 if inner is None else inner
    tau0, y0 = original_to_reduced_initial(reg, fin, v0, p0)

    def y_of_tau(tau):
        return propagate_reduced(fin.D_inf, y0, [tau - tau0])[0]

    _, V, P, _ = integrate_original(L.a, L.calR, reg.ctx.omega, v0, p0, t_grid, **kw)
    sel = np.abs(np.arange(-J, J + 1)) <= inner
    gap = 0.0
    for i, t in enumerate(t_grid):
        vr, pr = reduced_to_original(reg, fin, y_of_tau, t)
        scale = np.linalg.norm(V[i][sel]) + np.linalg.norm(P[i][sel])
        gap = max(gap, (np.linalg.norm((V[i] - vr)[sel]) + np.linalg.norm((P[i] - pr)[sel])) / scale)
    return gap
