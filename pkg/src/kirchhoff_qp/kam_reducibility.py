"""Reduction of w.d + i D + R to a time independent 2x2 block-diagonal operator.

Operators are PairedOperator objects acting on (z, conj z); the diagonal part
i D = [[iD, 0], [0, -i conj D]] and w.d are kept symbolic.  One step solves

    w.d Psi + [iD, Psi] + Pi_N R - [R] = 0

blockwise through the 4x4 matrices

    A-(l, j, j') = w.l + M_L(D_j) - M_R(D_j'),
    A+(l, j, j') = w.l + M_L(D_j) + M_R(conj D_j'),

then conjugates by Phi = exp(Psi).  The new remainder is assembled from small
quantities only, so its relative accuracy does not degrade as it shrinks.
"""
import time
from dataclasses import dataclass, field

import numpy as np

from .spectral_core import bracket, ell_grid
from .toeplitz_ops import (BlockDiagonal, PairedOperator, ToeplitzOperator, block_diag_part,
                           compose_paired, operator_expm1, truncate_time)


class NonResonanceViolation(RuntimeError):
    """A Melnikov-type divisor fell below its threshold."""

    def __init__(self, msg, kind, index, margin):
        super().__init__(msg)
        self.kind = kind
        self.index = index
        self.margin = margin

    def as_dict(self):
        return {"kind": self.kind, "index": [list(map(int, self.index[0]))] + list(map(int, self.index[1:])),
                "margin": float(self.margin)}


def kam_exponents(tau):
    a = 6 * tau + 4
    return a, a + 1


def n_schedule(N0, chi, steps):
    return [int(np.floor(N0 ** (chi ** k))) for k in range(steps + 1)]


def _blocks(T, ells_idx):
    """(n_l, J, J, 4) row-major 2x2 blocks of a Toeplitz operator at the given l-indices."""
    J = T.j_max
    A = T.A[ells_idx]
    return A.reshape(-1, J, 2, J, 2).transpose(0, 1, 3, 2, 4).reshape(-1, J, J, 4)


def _unblocks(X, T_shape_op, ells_idx):
    """Write (n_l, J, J, 4) blocks into a zero operator shaped like T_shape_op."""
    J = T_shape_op.j_max
    out = np.zeros_like(T_shape_op.A)
    out[ells_idx] = X.reshape(-1, J, J, 2, 2).transpose(0, 1, 3, 2, 4).reshape(-1, 2 * J, 2 * J)
    return ToeplitzOperator(out)


def sylvester_matrices(D, od, sign):
    """4x4 matrices w.l I + M_L(D_j) -+ M_R(D_j'), shape (n_l, J, J, 4, 4).

    sign = -1 builds A-, sign = +1 builds A+ (with conj D_j' on the right).
    """
    I2 = np.eye(2)
    B = D.blocks
    ML = np.einsum("jab,cd->jacbd", B, I2).reshape(-1, 4, 4)
    Br = B if sign < 0 else D.conj().blocks
    MR = np.einsum("ab,jdc->jacbd", I2, Br).reshape(-1, 4, 4)
    A = ML[:, None] + sign * MR[None, :]
    return od[:, None, None, None, None] * np.eye(4) + A[None]


def _ell_index(nu, L_op, N):
    ell = ell_grid(nu, L_op).reshape(-1, nu)
    keep = np.nonzero(np.abs(ell).max(axis=1) <= N)[0]
    return ell, keep


def second_melnikov_margins(D, omega, ells, gamma, tau, sign, factor=1.0):
    """sigma_min(A-+) <l>^tau / (factor gamma <j -+ j'>) for every (l, j, j')."""
    od = ells @ np.asarray(omega, float)
    A = sylvester_matrices(D, od, sign)
    sv = np.linalg.svd(A, compute_uv=False)[..., -1]
    J = D.j_max
    j = np.arange(1, J + 1)
    jj = bracket(j[:, None] + sign * j[None, :])
    lb = bracket(np.abs(ells).max(axis=1))
    marg = sv * lb[:, None, None] ** tau / (factor * gamma * jj[None])
    if sign < 0:
        zero = np.abs(ells).max(axis=1) == 0
        marg[zero, j - 1, j - 1] = np.inf
    return marg, sv


def first_melnikov_margins(D, omega, ells, gamma, tau, factor=2.0):
    """sigma_min(w.l + D_j) <l>^tau / (factor gamma j)."""
    od = ells @ np.asarray(omega, float)
    B = od[:, None, None, None] * np.eye(2) + D.blocks[None]
    sv = np.linalg.svd(B, compute_uv=False)[..., -1]
    j = np.arange(1, D.j_max + 1)
    lb = bracket(np.abs(ells).max(axis=1))
    return sv * lb[:, None] ** tau / (factor * gamma * j[None])


def _argmin_index(marg, ells):
    k = np.unravel_index(np.argmin(marg), marg.shape)
    return (tuple(int(x) for x in ells[k[0]]),) + tuple(int(x) + 1 for x in k[1:]), float(marg[k])


def check_cantor_membership(D, m, ctx, N, gamma=None, tau=None):
    """Margins of the first and second Melnikov conditions for |l| <= N; pass iff all >= 1."""
    gamma = ctx.gamma if gamma is None else gamma
    tau = ctx.tau if tau is None else tau
    ells = ell_grid(ctx.nu, N).reshape(-1, ctx.nu)
    out = {}
    worst = (np.inf, None, None)
    for kind, fn in (("first", lambda: first_melnikov_margins(D, ctx.omega, ells, gamma, tau)),
                     ("minus", lambda: second_melnikov_margins(D, ctx.omega, ells, gamma, tau, -1)[0]),
                     ("plus", lambda: second_melnikov_margins(D, ctx.omega, ells, gamma, tau, +1)[0])):
        marg = fn()
        idx, val = _argmin_index(marg, ells)
        out[kind] = {"margin": val, "index": idx}
        if val < worst[0]:
            worst = (val, kind, idx)
    out["min_margin"], out["kind"], out["index"] = worst
    out["passed"] = bool(worst[0] >= 1)
    return out


@dataclass
class HomologicalSolution:
    Psi: PairedOperator
    residual: float
    min_margin: float
    worst_index: tuple
    worst_kind: str


def solve_homological(D, R, N, ctx, gamma=None, tau=None, check=True):
    """Psi with w.d Psi + [iD, Psi] + Pi_N R - [R] = 0, Psi = 0 for |l| > N."""
    gamma = ctx.gamma if gamma is None else gamma
    tau = ctx.tau if tau is None else tau
    nu, L, J = R.nu, R.l_max, R.j_max
    ell, keep = _ell_index(nu, L, N)
    ells = ell[keep]
    od = ells @ ctx.omega
    idx = np.unravel_index(keep, (2 * L + 1,) * nu)
    zero_l = np.abs(ells).max(axis=1) == 0
    jj = np.arange(J)

    Pb = _blocks(R.P, idx)
    Pb[zero_l, jj, jj] = 0
    Qb = _blocks(R.Q, idx)
    sols, margins = [], []
    for sign, rhs in ((-1, Pb), (+1, Qb)):
        marg, sv = second_melnikov_margins(D, ctx.omega, ells, gamma, tau, sign)
        kind = "minus" if sign < 0 else "plus"
        index, val = _argmin_index(marg, ells)
        if val == 0:
            raise NonResonanceViolation(f"singular {kind} divisor at {index}", kind, index, val)
        A = sylvester_matrices(D, od, sign)
        if sign < 0:
            A[zero_l, jj, jj] = np.eye(4)   # normalization: the diagonal l = 0 blocks vanish
        try:
            X = np.linalg.solve(A, 1j * rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            raise NonResonanceViolation(f"singular {kind} divisor at {index}", kind, index, val)
        sols.append(X)
        margins.append(marg)
    Psi = PairedOperator(_unblocks(sols[0], R.P, idx), _unblocks(sols[1], R.Q, idx))
    Psi = Psi.resize(min(N, L))

    res = homological_residual(D, R, Psi, N, ctx)
    i_min = int(np.argmin([np.min(m) for m in margins]))
    kind = ("minus", "plus")[i_min]
    index, val = _argmin_index(margins[i_min], ells)
    if check and val < 1:
        raise NonResonanceViolation(f"second Melnikov ({kind}) violated at {index}", kind, index, val)
    return HomologicalSolution(Psi, res, val, index, kind)


def homological_residual(D, R, Psi, N, ctx):
    """max over blocks of |w.d Psi + [iD, Psi] + Pi_N R - [R]|, relative to max |R|."""
    iD = PairedOperator(1j * D.to_operator(R.nu), ToeplitzOperator.zeros(R.nu, 0, R.j_max))
    Psi = Psi.resize(R.l_max)
    lhs = Psi.dphi(ctx.omega) + compose_paired(iD, Psi) - compose_paired(Psi, iD) \
        + R.truncate_time(N) - diag_paired(R)
    scale = max(np.max(np.abs(R.P.A)), np.max(np.abs(R.Q.A)), 1e-300)
    return float(max(np.max(np.abs(lhs.P.A)), np.max(np.abs(lhs.Q.A))) / scale)


def diag_paired(R):
    """[R] as a paired operator: the l = 0 diagonal 2x2 blocks of the upper-left part."""
    return PairedOperator(block_diag_part(R.P).to_operator(R.nu),
                          ToeplitzOperator.zeros(R.nu, 0, R.j_max)).resize(R.l_max)


@dataclass
class ReducibilityState:
    step: int
    D: BlockDiagonal
    m: float
    R: PairedOperator
    N0: int = 8
    chi: float = 1.5
    Phi_m1: PairedOperator = None       # Phi_total - Id
    Phi_inv_m1: PairedOperator = None   # Phi_total^{-1} - Id
    omega_ok: bool = True
    history: list = field(default_factory=list)

    @property
    def N(self):
        return int(np.floor(self.N0 ** (self.chi ** self.step)))

    def exponents(self, tau):
        return kam_exponents(tau)


def _series_S(Psi, X, tol=1e-17, max_terms=40):
    """sum_{n>=2} S_n / n!, S_1 = X, S_{n+1} = Psi S_n + X Psi^n."""
    S = X
    P = Psi
    total = None
    fact = 1.0
    s0 = (Psi.nu + 1) // 2 + 1
    for n in range(1, max_terms):
        S = compose_paired(Psi, S) + compose_paired(X, P)
        P = compose_paired(P, Psi)
        fact *= (n + 1)
        term = S * (1.0 / fact)
        total = term if total is None else total + term
        if term.norm(s0) <= tol * max(total.norm(s0), 1e-300):
            break
    return total


def kam_step(state, ctx, N=None, gamma=None, tau=None, check=True):
    """One conjugation: D+ = D + [R1], R+ from the step formula."""
    R = state.R
    N = state.N if N is None else N
    s0 = ctx.s0
    if R.norm(0) == 0:
        new = _advance(state, state.D, R, None, None)
        return new, {"N": N, "min_margin": np.inf, "residual": 0.0}
    sol = solve_homological(state.D, R, N, ctx, gamma, tau, check)
    Psi = sol.Psi.resize(R.l_max)
    E = operator_expm1(Psi, warn=False)
    Einv = operator_expm1(-Psi, warn=False)
    dR = diag_paired(R)
    PiN = R.truncate_time(N)
    X = dR - PiN
    perp = R - PiN
    inner = perp + compose_paired(R, E)
    S = _series_S(Psi, X)
    if S is not None:
        inner = inner + S
    R_new = compose_paired(Einv, dR) + inner + compose_paired(Einv, inner)
    D_new = state.D + BlockDiagonal(-1j * block_diag_part(R.P).blocks)
    # keep the blocks exactly self-adjoint
    D_new = BlockDiagonal(0.5 * (D_new.blocks + np.conj(np.swapaxes(D_new.blocks, 1, 2))))
    new = _advance(state, D_new, R_new, E, Einv)
    return new, {"N": N, "min_margin": sol.min_margin, "worst_index": sol.worst_index,
                 "residual": sol.residual, "Psi_norm": Psi.norm(s0)}


def _advance(state, D, R, E, Einv):
    Pm, Pim = state.Phi_m1, state.Phi_inv_m1
    if E is not None:
        # Phi_tot <- Phi_tot (I + E);  Phi_tot^{-1} <- (I + Einv) Phi_tot^{-1}
        Pm = E if Pm is None else Pm + E + compose_paired(Pm, E)
        Pim = Einv if Pim is None else Pim + Einv + compose_paired(Einv, Pim)
    return ReducibilityState(state.step + 1, D, state.m, R, state.N0, state.chi, Pm, Pim,
                             state.omega_ok, list(state.history))


@dataclass
class FinalBlocks:
    D_inf: BlockDiagonal
    m: float
    Phi_m1: PairedOperator
    Phi_inv_m1: PairedOperator
    table: list
    conjugation_defect: float = None
    stopped_by: str = ""
    violation: dict = None

    def Phi(self, nu, J, L):
        I = PairedOperator.identity(nu, J, L)
        return I if self.Phi_m1 is None else I + self.Phi_m1.resize(L)

    def Phi_inv(self, nu, J, L):
        I = PairedOperator.identity(nu, J, L)
        return I if self.Phi_inv_m1 is None else I + self.Phi_inv_m1.resize(L)

    def asymptotics(self, eps):
        """sup_j j |D_j - m j I| and the ratio to eps."""
        j = np.arange(1, self.D_inf.j_max + 1)
        v = float(np.max(j * self.D_inf.hat(self.m).frob()))
        return v, v / eps if eps else np.inf

    def table_csv(self):
        head = "step,N,R_s0,R_D_s0,min_margin,wall_time\n"
        rows = [f"{r['step']},{r['N']},{r['R_s0']:.6e},{r['R_D_s0']:.6e},{r['min_margin']:.6e},{r['wall_time']:.4f}"
                for r in self.table]
        return head + "\n".join(rows) + "\n"


def conjugation_defect(R0, fin, m, ctx, inner=None):
    """|| Phi^{-1} L0 Phi - L_inf ||_{s0} on the inner truncation (blocks |l| <= L/2, j <= J/2)."""
    nu, L, J = R0.nu, R0.l_max, R0.j_max
    Phi = fin.Phi(nu, J, L)
    Phi_inv = fin.Phi_inv(nu, J, L)
    Z = ToeplitzOperator.zeros(nu, 0, J)
    iD0 = PairedOperator(1j * BlockDiagonal.scalar(m, J).to_operator(nu), Z)
    iDinf = PairedOperator(1j * fin.D_inf.to_operator(nu), Z)
    body = Phi.dphi(ctx.omega) + compose_paired(iD0, Phi) + compose_paired(R0, Phi)
    defect = compose_paired(Phi_inv, body) - iDinf.resize(L)
    li, ji = inner if inner is not None else (L // 2, J // 2)
    return defect.resize(li, ji).norm(ctx.s0)


def reduce(m, R0, ctx, steps=12, N0=8, chi=1.5, tol=1e-12, gamma=None, tau=None,
           check=True, verify=True):
    """Iterate kam_step until |R|D||_{s0} < tol; returns FinalBlocks with the table."""
    J = R0.j_max
    s0 = ctx.s0
    st = ReducibilityState(0, BlockDiagonal.scalar(m, J), m, R0, N0, chi)
    table = []
    t0 = time.perf_counter()
    rD = R0.norm_D(s0)
    table.append({"step": 0, "N": st.N, "R_s0": R0.norm(s0), "R_D_s0": rD,
                  "min_margin": float("nan"), "wall_time": 0.0})
    growth = 0
    stopped, violation = "steps", None
    for k in range(steps):
        if rD < tol:
            stopped = "tolerance"
            break
        N = min(st.N, R0.l_max)
        try:
            st, info = kam_step(st, ctx, N, gamma, tau, check)
        except NonResonanceViolation as exc:
            stopped, violation = "violation", exc.as_dict()
            st.omega_ok = False
            break
        prev = rD
        rD = st.R.norm_D(s0)
        table.append({"step": st.step, "N": N, "R_s0": st.R.norm(s0), "R_D_s0": rD,
                      "min_margin": float(info["min_margin"]), "wall_time": time.perf_counter() - t0,
                      "homological_residual": info["residual"]})
        growth = growth + 1 if rD > prev else 0
        if growth >= 2:
            stopped = "divergence"
            break
    else:
        if rD < tol:
            stopped = "tolerance"
    fin = FinalBlocks(st.D, m, st.Phi_m1, st.Phi_inv_m1, table, stopped_by=stopped, violation=violation)
    if verify and stopped in ("tolerance", "steps"):
        fin.conjugation_defect = conjugation_defect(R0, fin, m, ctx)
    return fin


def synthetic_remainder(rng, nu, l_max, j_max, eps, decay=3.0, s=2):
    """Random Hamiltonian |D|^{-1/2} R |D|^{-1/2} with R1 self-adjoint, R2 symmetric,
    scaled so that |R |D||_s = eps."""
    X = ToeplitzOperator.random(rng, nu, l_max, j_max, decay=decay)
    Y = ToeplitzOperator.random(rng, nu, l_max, j_max, decay=decay)
    R = PairedOperator.from_R((X + X.adjoint()) * 0.5, (Y + Y.transpose()) * 0.5)
    R = R.left_abs_D(-0.5).right_abs_D(-0.5)
    return R * (eps / R.norm_D(s))
