"""Outer Newton iteration with smoothing, zero-mode solve and two inverses of L."""
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .kam_reducibility import NonResonanceViolation, first_melnikov_margins, reduce
from .linearization import StatePair, eval_F, linearize, x_inner
from .regularization import regularize
from .spectral_core import (NearResonanceError, SpaceTimeField, ToroidalFunction, ell_grid,
                            inverse_omega_dphi, smoothing_projector)
from .toeplitz_ops import field_to_vec, vec_to_field


class DivergenceError(RuntimeError):
    pass


@dataclass
class NashMoserConfig:
    eps: float
    gamma: float
    N0: int = 8
    chi: float = 1.5
    mu1: float = None
    max_steps: int = 8
    residual_tol: float = 1e-10
    tau: float = 3.0
    inversion_path: str = "dense_oracle"
    dense_cap: int = 2 * 25 * 64
    kam_steps: int = 12

    def __post_init__(self):
        if self.mu1 is None:
            self.mu1 = 2 * self.tau + 4
        if self.inversion_path not in ("dense_oracle", "reduced"):
            raise ValueError("inversion_path must be 'dense_oracle' or 'reduced'")

    @property
    def kappa(self):
        return 6 * self.mu1 + 19

    @property
    def b1(self):
        return 2 * self.mu1 + 4 + self.kappa * (1 + 1 / self.chi) + 1

    @property
    def a1_nm(self):
        return self.kappa / self.chi - 2 * self.mu1

    def N(self, n):
        return int(np.floor(self.N0 ** (self.chi ** n)))


@dataclass
class IterateRecord:
    n: int
    residual_s0: float
    residual_high: float
    u_norm_s0: float
    N: int
    omega_excluded: bool
    inversion_path: str
    wall_time: float
    inversion_check: float = float("nan")


def pair_norm(F, s):
    return float(np.hypot(F[0].norm(s), F[1].norm(s)))


def solve_zero_mode(f, ctx, eps):
    """p0 = eps (w.d)^{-1} f0, v0 = (w.d)^{-1} p0, f0 the x-average of f."""
    f0 = f.x_mean()
    mean = abs(f0.mean())
    if mean > 1e-12:
        raise ValueError(f"forcing has nonzero space-time average {mean:.3g}")
    p0 = inverse_omega_dphi(f0, ctx) * eps
    v0 = inverse_omega_dphi(p0, ctx)
    return v0, p0


def zero_mode_residual(v0, p0, f, ctx, eps):
    r1 = v0.dphi(ctx.omega) - p0
    r2 = p0.dphi(ctx.omega) - f.x_mean() * eps
    return max(r1.norm(0), r2.norm(0))


def invert_L_dense(L, rhs, ctx=None, cap=None):
    """Solve the Galerkin-truncated system L[h, k] = rhs by LU on all (l, j) modes."""
    r1, r2 = rhs
    l_f, J = r1.l_max, r1.j_max
    if L.j_max != J:
        raise ValueError("rhs space band must match the operator")
    M = L.to_dense(l_f)
    if cap is not None and M.shape[0] > cap:
        raise ValueError(f"dense system of size {M.shape[0]} exceeds the cap {cap}")
    b = np.concatenate([field_to_vec(r1).ravel(), field_to_vec(r2).ravel()])
    with warnings.catch_warnings():
        # an exactly singular pivot is reported below as a near resonance
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(M, check_finite=False)
    if np.min(np.abs(np.diag(lu))) < 1e-14 * np.max(np.abs(np.diag(lu))):
        raise NearResonanceError("dense operator singular to machine precision")
    x = scipy.linalg.lu_solve((lu, piv), b)
    res = np.linalg.norm(M @ x - b) / max(np.linalg.norm(b), 1e-300)
    n = x.size // 2
    shape = (2 * l_f + 1,) * L.nu + (2 * J,)
    h = vec_to_field(x[:n].reshape(shape), L.nu, J)
    k = vec_to_field(x[n:].reshape(shape), L.nu, J)
    h.residual = res
    return h, k


def invert_L_inf(D_inf, w, omega):
    """L_inf^{-1}: y_j(l) = -i (w.l + D_j)^{-1} w_j(l)."""
    J = D_inf.j_max
    vec = field_to_vec(w, J)
    ell = ell_grid(w.nu, w.l_max)
    od = ell @ np.asarray(omega, float)
    B = od[..., None, None, None] * np.eye(2) + D_inf.blocks
    v2 = vec.reshape(vec.shape[:-1] + (J, 2))
    y = -1j * np.linalg.solve(B, v2[..., None])[..., 0]
    return vec_to_field(y.reshape(vec.shape), w.nu, J).resize(j_max=w.j_max)


@dataclass
class ReducedInverse:
    reg: object
    fin: object
    l_work: int

    def solve(self, rhs, l_out=None, check_margin=None, gamma=None, tau=None):
        reg, fin = self.reg, self.fin
        ctx = reg.ctx
        r1, r2 = rhs
        l_out = r1.l_max if l_out is None else l_out
        Lw = self.l_work
        r1, r2 = r1.resize(Lw), r2.resize(Lw)
        J = reg.R4.j_max
        Lop = reg.R4.l_max
        z = reg.W2_inv(r1, r2)
        Phi = fin.Phi(ctx.nu, J, Lop)
        Phi_inv = fin.Phi_inv(ctx.nu, J, Lop)
        w = Phi_inv.apply(z)
        if check_margin is not None:
            ells = ell_grid(ctx.nu, Lw).reshape(-1, ctx.nu)
            marg = first_melnikov_margins(fin.D_inf, ctx.omega, ells, gamma or ctx.gamma, tau or ctx.tau)
            k = np.unravel_index(np.argmin(marg), marg.shape)
            if marg[k] < check_margin:
                raise NonResonanceViolation("first Melnikov violated", "first",
                                            (tuple(int(x) for x in ells[k[0]]), int(k[1]) + 1), marg[k])
        y = invert_L_inf(fin.D_inf, w, ctx.omega)
        h, k = reg.W1(Phi.apply(y))
        return h.resize(l_out).real_part(), k.resize(l_out).real_part()


def build_reduced_inverse(L, l_work=None, kam_steps=12, N0=8, chi=1.5, check=False, tol=1e-15):
    """Regularize, reduce and package the inverse of L (operator bands follow the state)."""
    ctx = L.ctx
    l_state = ctx.l_max
    l_work = 3 * l_state if l_work is None else l_work
    reg = regularize(L, l_coef=l_work, l_op=2 * l_state)
    fin = reduce(reg.m, reg.R4, ctx, steps=kam_steps, N0=N0, chi=chi, tol=tol, check=check, verify=False)
    if fin.stopped_by == "violation":
        raise NonResonanceViolation("second Melnikov violated during reduction",
                                    fin.violation["kind"], fin.violation["index"], fin.violation["margin"])
    if fin.stopped_by == "divergence":
        raise DivergenceError("reducibility iteration diverged")
    return ReducedInverse(reg, fin, l_work)


def invert_L_reduced(L, rhs, reg=None, fin=None, ctx=None, l_work=None, check_margin=None):
    if reg is None or fin is None:
        inv = build_reduced_inverse(L, l_work)
    else:
        inv = ReducedInverse(reg, fin, l_work or 3 * L.ctx.l_max)
    return inv.solve(rhs, check_margin=check_margin)


def newton_direction(L, F, path, cfg):
    if path == "dense_oracle":
        return invert_L_dense(L, F, cap=cfg.dense_cap)
    inv = build_reduced_inverse(L, kam_steps=cfg.kam_steps, N0=cfg.N0, chi=cfg.chi)
    return inv.solve(F)


def nash_moser_iterate(f, cfg, ctx, inversion_path=None, u0=None):
    """u_{n+1} = u_n - Pi_{n+1} L_n^{-1} Pi_{n+1} F(u_n), starting at u_0 = 0."""
    path = cfg.inversion_path if inversion_path is None else inversion_path
    nu, L, J = ctx.nu, ctx.l_max, ctx.j_max
    fp = f.zero_x_mean().resize(L, J)
    state = StatePair.zeros(nu, L, J, cfg.eps) if u0 is None else u0
    s0 = ctx.s0
    history = []
    t0 = time.perf_counter()
    prev = np.inf
    status = "max_steps"
    exclusion = None
    for n in range(cfg.max_steps + 1):
        F = eval_F(state, fp, ctx)
        r = pair_norm(F, s0)
        rec = IterateRecord(n, r, pair_norm(F, s0 + 2), state.norm(s0), cfg.N(n), False, path,
                            time.perf_counter() - t0)
        history.append(rec)
        if r < cfg.residual_tol:
            status = "converged"
            break
        if r > prev:
            status = "divergence"
            break
        if n == cfg.max_steps:
            break
        prev = r
        Nn = cfg.N(n + 1)
        Fp = [smoothing_projector(x, Nn) for x in F]
        Lin = linearize(state, ctx)
        try:
            h, k = newton_direction(Lin, Fp, path, cfg)
        except (NonResonanceViolation, NearResonanceError) as exc:
            rec.omega_excluded = True
            status = "excluded"
            exclusion = getattr(exc, "as_dict", lambda: {"message": str(exc)})()
            break
        h = smoothing_projector(h, Nn).real_part().zero_x_mean()
        k = smoothing_projector(k, Nn).real_part().zero_x_mean()
        state = StatePair(state.u - h, state.psi - k, cfg.eps)
    return NashMoserResult(state, history, status, exclusion)


@dataclass
class NashMoserResult:
    state: StatePair
    history: list
    status: str
    exclusion: dict = None

    @property
    def residuals(self):
        return [r.residual_s0 for r in self.history]

    def quadratic_constants(self, floor=1e-13):
        """r_{n+1} / r_n^2 over the steps with r_{n+1} above the rounding floor."""
        r = self.residuals
        return [r[i + 1] / r[i] ** 2 for i in range(len(r) - 1) if r[i + 1] > floor and r[i] > 0]

    def csv(self):
        head = "n,residual_s0,residual_high,u_norm_s0,N,omega_excluded,inversion_path,wall_time\n"
        rows = [f"{h.n},{h.residual_s0:.6e},{h.residual_high:.6e},{h.u_norm_s0:.6e},{h.N},"
                f"{int(h.omega_excluded)},{h.inversion_path},{h.wall_time:.4f}" for h in self.history]
        return head + "\n".join(rows) + "\n"


def assemble_full_solution(state, v0, p0):
    """(v, p) = (v0 + u, p0 + psi); v0, p0 fill the j = 0 column."""
    v = state.u.copy()
    p = state.psi.copy()
    J = v.j_max
    v.coeffs[..., J] = v0.resize(v.l_max).coeffs
    p.coeffs[..., J] = p0.resize(p.l_max).coeffs
    return v, p


def eval_F_full(v, p, f, eps, ctx):
    """The unsplit operator on fields with nonzero x-mean."""
    f = f.resize(v.l_max, v.j_max)
    vx = v.dx()
    a = eps * x_inner(vx, vx.conj()) + 1.0
    F1 = v.dphi(ctx.omega) - p
    F2 = p.dphi(ctx.omega) - v.dx(2).times(a) - eps * f
    return F1, F2
