"""Monte Carlo estimate of the frequencies removed by the non-resonance conditions.

For omega in a box the four margins are

    diophantine   |w.l| <l>^tau / gamma                                  l != 0
    first         |w.l + lam_k(j)| <l>^tau / (2 gamma j)
    minus         |w.l + lam_k(j) - lam_k'(j')| <l>^tau / (2 gamma <j - j'>)   (l, j, j') != (0, j, j)
    plus          |w.l + lam_k(j) + lam_k'(j')| <l>^tau / (2 gamma <j + j'>)

with lam_k(j) the eigenvalues of the self-adjoint blocks D_j. A sample is
excluded when the smallest margin is below 1. The default exponents are
tau* = nu + 2 and tau = 2 tau* + nu + 1.

The stricter condition with gamma* = 5 gamma and tau* (first Melnikov on the
unperturbed m j) is reported per sample but does not enter the exclusion.
"""
from dataclasses import dataclass

import numpy as np
import scipy.stats

from .spectral_core import bracket, ell_grid
from .toeplitz_ops import BlockDiagonal, M_L, M_R

KINDS = ("diophantine", "first", "minus", "plus")


def default_exponents(nu):
    tau_star = nu + 2
    return tau_star, 2 * tau_star + nu + 1


@dataclass
class CantorSample:
    omega: np.ndarray
    diophantine_margin: float
    first_melnikov_margin: float
    second_melnikov_minus_margin: float
    second_melnikov_plus_margin: float
    worst_index: tuple
    excluded: bool
    omega_I_margin: float = np.inf

    @property
    def margins(self):
        return (self.diophantine_margin, self.first_melnikov_margin,
                self.second_melnikov_minus_margin, self.second_melnikov_plus_margin)


@dataclass
class ExclusionStats:
    gamma: float
    n_samples: int
    n_excluded: int
    ci_low: float
    ci_high: float
    worst_margin: float
    worst_kind: str
    worst_index: tuple
    min_margins: np.ndarray = None

    @property
    def excluded_fraction(self):
        return self.n_excluded / self.n_samples

    def csv_row(self):
        idx = ";".join(str(x) for x in self.worst_index)
        return f"{self.gamma:.6g},{self.excluded_fraction:.6f},{self.ci_low:.6f},{self.ci_high:.6f},{idx}"


CSV_HEADER = "gamma,excluded_fraction,ci_low,ci_high,worst_margin_index"


def _box(box, nu):
    b = np.asarray(box, float).reshape(-1, 2)
    if b.shape[0] == 1 and nu > 1:
        b = np.repeat(b, nu, axis=0)
    if b.shape[0] != nu:
        raise ValueError(f"box has {b.shape[0]} sides for nu = {nu}")
    if np.any(b[:, 1] <= b[:, 0]):
        raise ValueError("empty box")
    return b


def extended_eigenvalues(D_inf, m, J_scan):
    """Sorted eigenvalues of D_j for j <= J_scan; blocks past the truncation are m j I."""
    J = 0 if D_inf is None else D_inf.j_max
    j = np.arange(1, J_scan + 1)
    lam = np.repeat((m * j)[:, None], 2, axis=1).astype(float)
    if J:
        k = min(J, J_scan)
        lam[:k] = D_inf.eigenvalues()[:k]
    return lam


def _divisor_tables(lam, j_limit, sign):
    """Distinct (shift, weight) pairs of lam_k(j) +- lam_k'(j') over j, j' <= j_limit."""
    J = min(j_limit, lam.shape[0])
    j = np.arange(1, J + 1)
    d = lam[:J, None, :, None] + sign * lam[None, :J, None, :]
    w = bracket(j[:, None] + sign * j[None, :]).astype(float)
    w = np.broadcast_to(w[:, :, None, None], d.shape)
    jj = np.broadcast_to(j[:, None, None, None], d.shape)
    jp = np.broadcast_to(j[None, :, None, None], d.shape)
    keep = np.ones(d.shape, bool)
    if sign < 0:
        keep &= jj != jp
    d, w, jj, jp = d[keep], w[keep], jj[keep], jp[keep]
    key = np.stack([np.round(d, 12), w], axis=1)
    _, first = np.unique(key, axis=0, return_index=True)
    return d[first], w[first], jj[first], jp[first]


def _scan_sets(lam, J_scan, tau_star, L_scan, nu, mult):
    """Per |l|_inf, the divisor tables with j, j' <= mult <l>^tau* pruning."""
    tables = {}
    j = np.arange(1, J_scan + 1)
    for r in range(L_scan + 1):
        lim = int(min(J_scan, np.floor(mult * max(r, 1) ** tau_star)))
        lim = max(lim, 1)
        first = (lam[:lim].ravel(), np.repeat(j[:lim], 2).astype(float),
                 np.repeat(j[:lim], 2), np.zeros(2 * lim, int))
        tables[r] = {"first": first, "minus": _divisor_tables(lam, lim, -1),
                     "plus": _divisor_tables(lam, lim, +1)}
    return tables


def _margins_for(omega, ells, tables, gamma, tau):
    """Min margin per kind over the scanned indices, with the arg-min index."""
    n = omega.shape[0]
    out = {k: np.full(n, np.inf) for k in KINDS}
    where = {k: np.zeros((n, 3), int) for k in KINDS}
    widx = {k: np.zeros(n, int) for k in KINDS}
    for li, ell in enumerate(ells):
        r = int(np.abs(ell).max())
        od = omega @ ell
        lb = float(bracket(r)) ** tau
        if r > 0:
            mg = np.abs(od) * lb / gamma
            upd = mg < out["diophantine"]
            out["diophantine"][upd] = mg[upd]
            widx["diophantine"][upd] = li
            where["diophantine"][upd] = 0
        for kind in ("first", "minus", "plus"):
            d, w, jj, jp = tables[r][kind]
            if d.size == 0:
                continue
            vals = np.abs(od[:, None] + d[None, :]) * (lb / (2 * gamma)) / w[None, :]
            k = np.argmin(vals, axis=1)
            mg = vals[np.arange(n), k]
            upd = mg < out[kind]
            out[kind][upd] = mg[upd]
            widx[kind][upd] = li
            where[kind][upd] = np.stack([np.zeros(upd.sum(), int), jj[k[upd]], jp[k[upd]]], axis=1)
    return out, where, widx


def _omega_I_margin(omega, ells, m, gamma, tau_star, J_scan):
    g = 5 * gamma
    j = np.arange(0, J_scan + 1)
    best = np.full(omega.shape[0], np.inf)
    for ell in ells:
        r = int(np.abs(ell).max())
        od = omega @ ell
        jj = j if r > 0 else j[1:]
        vals = np.abs(od[:, None] + m * jj[None]) * bracket(r) ** tau_star / (g * bracket(jj)[None])
        best = np.minimum(best, vals.min(axis=1))
    return best


def _sample_rng(seed):
    # counter-based generator: the draw does not depend on how samples are chunked
    return np.random.Generator(np.random.Philox(key=int(seed)))


def draw_frequencies(box, n_samples, seed):
    b = np.asarray(box, float)
    return _sample_rng(seed).uniform(b[:, 0], b[:, 1], size=(n_samples, b.shape[0]))


def evaluate_margins(omega, D_inf, m, gamma, tau=None, tau_star=None, L_scan=16, J_scan=None,
                     mult=1.0, chunk=4096):
    """Margins of every row of omega; returns a list of CantorSample."""
    omega = np.atleast_2d(np.asarray(omega, float))
    nu = omega.shape[1]
    ts, t = default_exponents(nu)
    tau_star = ts if tau_star is None else tau_star
    tau = t if tau is None else tau
    J_scan = (D_inf.j_max if D_inf is not None else 16) if J_scan is None else J_scan
    lam = extended_eigenvalues(D_inf, m, J_scan)
    tables = _scan_sets(lam, J_scan, tau_star, L_scan, nu, mult)
    ells = ell_grid(nu, L_scan).reshape(-1, nu)
    samples = []
    for s in range(0, omega.shape[0], chunk):
        om = omega[s:s + chunk]
        out, where, widx = _margins_for(om, ells, tables, gamma, tau)
        omI = _omega_I_margin(om, ells, m, gamma, tau_star, J_scan)
        for i in range(om.shape[0]):
            vals = [out[k][i] for k in KINDS]
            kk = KINDS[int(np.argmin(vals))]
            ell = tuple(int(x) for x in ells[widx[kk][i]])
            idx = (ell, int(where[kk][i][1]), int(where[kk][i][2]))
            samples.append(CantorSample(om[i], *vals, idx, bool(min(vals) < 1), float(omI[i])))
    return samples


def wilson_interval(k, n, level=0.95):
    ci = scipy.stats.binomtest(int(k), int(n)).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


def sample_exclusions(D_inf, m, box, gamma, tau=None, n_samples=10_000, seed=0, ctx=None,
                      tau_star=None, L_scan=None, J_scan=None, mult=1.0, level=0.95):
    """Excluded fraction of uniform samples over the box with a Wilson interval."""
    if n_samples <= 0:
        raise ValueError("zero samples")
    nu = ctx.nu if ctx is not None else np.asarray(box, float).reshape(-1, 2).shape[0]
    b = _box(box, nu)
    if L_scan is None:
        L_scan = 2 * ctx.l_max if ctx is not None else 16
    if J_scan is None:
        J_scan = ctx.j_max if ctx is not None else (D_inf.j_max if D_inf is not None else 16)
    omega = draw_frequencies(b, n_samples, seed)
    omega = np.atleast_2d(omega)
    ts, t = default_exponents(nu)
    tau_star = ts if tau_star is None else tau_star
    tau = t if tau is None else tau
    lam = extended_eigenvalues(D_inf, m, J_scan)
    tables = _scan_sets(lam, J_scan, tau_star, L_scan, nu, mult)
    ells = ell_grid(nu, L_scan).reshape(-1, nu)
    mins = np.empty(n_samples)
    best = (np.inf, "", ((0,) * nu, 0, 0))
    for s in range(0, n_samples, 4096):
        om = omega[s:s + 4096]
        out, where, widx = _margins_for(om, ells, tables, gamma, tau)
        stack = np.stack([out[k] for k in KINDS])
        mins[s:s + om.shape[0]] = stack.min(axis=0)
        flat = int(np.argmin(stack))
        ki, i = np.unravel_index(flat, stack.shape)
        if stack[ki, i] < best[0]:
            kk = KINDS[ki]
            ell = tuple(int(x) for x in ells[widx[kk][i]])
            best = (float(stack[ki, i]), kk, (ell, int(where[kk][i][1]), int(where[kk][i][2])))
    k = int(np.sum(mins < 1))
    lo, hi = wilson_interval(k, n_samples, level)
    ell, j, jp = best[2]
    return ExclusionStats(gamma, n_samples, k, lo, hi, best[0], best[1], ell + (j, jp), mins)


def gamma_sweep(D_inf, m, box, gammas, **kw):
    return [sample_exclusions(D_inf, m, box, g, **kw) for g in gammas]


def sweep_csv(stats):
    return CSV_HEADER + "\n" + "\n".join(s.csv_row() for s in stats) + "\n"


def fit_power_law(gammas, fractions):
    """Least-squares exponent p and prefactor C of fraction = C gamma^p."""
    g = np.log(np.asarray(gammas, float))
    f = np.log(np.asarray(fractions, float))
    p, logc = np.polyfit(g, f, 1)
    return float(p), float(np.exp(logc))


def eigenvalue_margins(blocks, omega, ell, j, jp, sign=-1):
    """Divisors w.l + lam_k(j) -+ lam_k'(j') for k, k' in {1, 2}, as a length-4 array."""
    D = blocks if isinstance(blocks, BlockDiagonal) else BlockDiagonal(blocks)
    od = float(np.dot(np.atleast_1d(omega), np.atleast_1d(ell)))
    lj = np.linalg.eigvalsh(D.block(j))
    ljp = np.linalg.eigvalsh(D.block(jp))
    return (od + lj[:, None] + sign * ljp[None, :]).ravel()


def sylvester_sigma_min(blocks, omega, ell, j, jp, sign=-1):
    """sigma_min of the 4x4 map X -> (w.l) X + D_j X -+ X D_j' (conjugated block for +)."""
    D = blocks if isinstance(blocks, BlockDiagonal) else BlockDiagonal(blocks)
    od = float(np.dot(np.atleast_1d(omega), np.atleast_1d(ell)))
    Bp = D.block(jp) if sign < 0 else D.conj().block(jp)
    A = od * np.eye(4) + M_L(D.block(j)) + sign * M_R(Bp)
    return float(np.linalg.svd(A, compute_uv=False)[-1])


def _threshold(kind, j, jp, gamma, ell_bracket, tau):
    if kind == "first":
        w = bracket(j)
    elif kind == "minus":
        w = bracket(j - jp)
    elif kind == "plus":
        w = bracket(j + jp)
    else:
        raise ValueError(f"unknown kind {kind!r}")
    return 2 * gamma * float(w) / ell_bracket ** tau


def _line_through_box(ell, box):
    """Unit direction e = l/|l|, offset v with v.l = 0 through the box center, and the s-range."""
    ell = np.asarray(ell, float)
    e = ell / np.linalg.norm(ell)
    c = box.mean(axis=1)
    v = c - (c @ e) * e
    lo, hi = -np.inf, np.inf
    for i in range(len(e)):
        if e[i] == 0:
            if not box[i, 0] <= v[i] <= box[i, 1]:
                return e, v, 0.0, 0.0
            continue
        a, b = sorted(((box[i, 0] - v[i]) / e[i], (box[i, 1] - v[i]) / e[i]))
        lo, hi = max(lo, a), min(hi, b)
    return e, v, lo, max(lo, hi)


def _union_length(intervals, lo, hi):
    iv = sorted((max(a, lo), min(b, hi)) for a, b in intervals if min(b, hi) > max(a, lo))
    total, cur_a, cur_b = 0.0, None, None
    for a, b in iv:
        if cur_b is None or a > cur_b:
            if cur_b is not None:
                total += cur_b - cur_a
            cur_a, cur_b = a, b
        else:
            cur_b = max(cur_b, b)
    if cur_b is not None:
        total += cur_b - cur_a
    return total


@dataclass
class WidthEstimate:
    width: float
    exact_width: float
    scan_width: float
    reference: float
    s_range: tuple


def resonant_set_width(ell, j, jp, kind, D_inf, m, gamma, tau, box, n_grid=200_001):
    """Length of the s-set on w = (l/|l|) s + v where the kind's margin fails.

    D_inf is frozen along the line, so each divisor is affine in s and the bad
    set is a union of explicit intervals; a grid scan is returned alongside.
    reference = gamma <l>^-tau.
    """
    ell = np.atleast_1d(np.asarray(ell, int))
    if not np.any(ell):
        raise ValueError("ell must be nonzero")
    nu = ell.size
    b = _box(box, nu)
    e, v, lo, hi = _line_through_box(ell, b)
    norm_l = float(np.linalg.norm(ell))
    lb = float(bracket(np.abs(ell).max()))
    J = max(j, jp)
    lam = extended_eigenvalues(D_inf, m, J)
    if kind == "first":
        c = lam[j - 1]
    elif kind in ("minus", "plus"):
        sgn = -1 if kind == "minus" else 1
        c = (lam[j - 1][:, None] + sgn * lam[jp - 1][None, :]).ravel()
    else:
        raise ValueError(f"unknown kind {kind!r}")
    if kind == "minus" and j == jp and not np.any(ell):
        return WidthEstimate(0.0, 0.0, 0.0, gamma / lb ** tau, (lo, hi))
    thr = _threshold(kind, j, jp, gamma, lb, tau)
    off = v @ ell
    # divisor(s) = |l| s + off + c
    ivs = [((-thr - off - ck) / norm_l, (thr - off - ck) / norm_l) for ck in c]
    exact = _union_length(ivs, lo, hi)
    scan = 0.0
    if hi > lo and n_grid:
        s = np.linspace(lo, hi, n_grid)
        div = norm_l * s[:, None] + off + c[None, :]
        bad = np.any(np.abs(div) < thr, axis=1)
        scan = float(bad.mean() * (hi - lo))
    return WidthEstimate(exact, exact, scan, gamma / lb ** tau, (lo, hi))


def open_line_width(ell, j, jp, kind, gamma, tau, m=1.0, D_inf=None):
    """Width of the bad set on the whole line (no box clipping)."""
    big = np.array([[-1e9, 1e9]] * len(np.atleast_1d(ell)))
    return resonant_set_width(ell, j, jp, kind, D_inf, m, gamma, tau, big, n_grid=0).exact_width


def index_bound_holds(ell, j, jp, tau_star):
    """True when <j - j'> min(j, j') < <l>^tau*, the necessary condition for a nonempty R- set."""
    lb = float(bracket(np.abs(np.atleast_1d(ell)).max()))
    return float(bracket(j - jp)) * min(j, jp) < lb ** tau_star


def minus_set_outside_omega_I(ell, j, jp, D_inf, m, gamma, tau, tau_star, box, n_grid=200_001):
    """Length of the s-set where the minus margin fails but the gamma* = 5 gamma condition
    |w.l + m (j - j')| >= gamma* <j - j'> / <l>^tau* still holds (a grid scan)."""
    ell = np.atleast_1d(np.asarray(ell, int))
    b = _box(box, ell.size)
    e, v, lo, hi = _line_through_box(ell, b)
    if hi <= lo:
        return 0.0
    lb = float(bracket(np.abs(ell).max()))
    lam = extended_eigenvalues(D_inf, m, max(j, jp))
    c = (lam[j - 1][:, None] - lam[jp - 1][None, :]).ravel()
    s = np.linspace(lo, hi, n_grid)
    od = np.linalg.norm(ell) * s + v @ ell
    fail = np.any(np.abs(od[:, None] + c[None]) < _threshold("minus", j, jp, gamma, lb, tau), axis=1)
    d = j - jp
    inside_I = np.abs(od + m * d) >= 5 * gamma * float(bracket(d)) / lb ** tau_star
    return float(np.mean(fail & inside_I) * (hi - lo))
