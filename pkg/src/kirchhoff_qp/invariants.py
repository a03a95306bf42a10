"""Quick invariant checks on small grids, run by `kirchhoff-qp verify`."""
from dataclasses import dataclass

import numpy as np

from .kam_reducibility import solve_homological, synthetic_remainder
from .linearization import StatePair, fd_directional, linearize
from .measure import eigenvalue_margins, sylvester_sigma_min
from .nash_moser import build_reduced_inverse, invert_L_dense
from .regularization import regularize, symplectic_defect_S
from .spectral_core import FrequencyContext, SpaceTimeField, product_constant
from .stability import integrate_reduced
from .toeplitz_ops import BlockDiagonal, ToeplitzOperator, block_decay_norm, compose

GOLDEN = (1 + 5 ** 0.5) / 2


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    tol: float

    @property
    def detail(self):
        return f"{self.value:.3e} (tol {self.tol:.0e})"


def _check(name, value, tol):
    return Check(name, bool(value <= tol), float(value), tol)


def _state(rng, nu, L, J, amp, eps):
    u = SpaceTimeField.random(rng, nu, L, J, decay=4.0)
    u = u * (amp / u.dx().norm(0))
    k = SpaceTimeField.random(rng, nu, L, J, decay=4.0)
    return StatePair(u, k * (amp / k.norm(0)), eps)


def check_jacobian(rng):
    ctx = FrequencyContext(1, [GOLDEN], 0.1, 3.0, 4, 6)
    st = _state(rng, 1, 4, 6, 0.5, 0.1)
    f = SpaceTimeField.random(rng, 1, 4, 6, decay=3.0, zero_mean=True)
    h = SpaceTimeField.random(rng, 1, 4, 6, decay=3.0, zero_mean=True)
    k = SpaceTimeField.random(rng, 1, 4, 6, decay=3.0, zero_mean=True)
    fd = fd_directional(st, f, ctx, h, k, t=1e-5)
    Lh = linearize(st, ctx).apply(h, k)
    err = max((a - b).norm(0) for a, b in zip(fd, Lh)) / max(x.norm(0) for x in Lh)
    return _check("linearization matches finite differences", err, 1e-7)


def check_linear_hamiltonian(rng):
    ctx = FrequencyContext(1, [GOLDEN], 0.1, 3.0, 4, 6)
    return _check("linearized operator is Hamiltonian", linearize(_state(rng, 1, 4, 6, 0.5, 0.1), ctx).hamiltonian_defect(), 1e-13)


def check_regularization(rng):
    L, J = 4, 8
    ctx = FrequencyContext(1, [2 ** 0.5], 0.1, 3.0, L, J)
    Lin = linearize(_state(rng, 1, L, J, 0.3, 0.01), ctx)
    reg = regularize(Lin, l_coef=3 * L, l_op=2 * L)
    Lw = 3 * L
    z = SpaceTimeField.random(rng, 1, L // 2, J, decay=3.0, real=False, zero_mean=True).resize(Lw)
    h, k = reg.W1(z)
    lhs = Lin.apply(h, k)
    rhs = reg.W2(reg.apply_L4(z))
    err = max((a - b).resize(L // 2, J // 2).norm(ctx.s0) for a, b in zip(lhs, rhs))
    err /= max(a.resize(L // 2, J // 2).norm(ctx.s0) for a in lhs)
    return [_check("L W1 = W2 L4 on the inner truncation", err, 1e-8),
            _check("symmetrizing map is symplectic", symplectic_defect_S(reg.beta, J), 1e-12),
            _check("R4 is Hamiltonian", reg.report["R4_hamiltonian_defect"], 1e-12)]


def check_homological(rng):
    ctx = FrequencyContext(2, [2 ** 0.5, GOLDEN], 0.01, 2.0, 3, 6)
    R = synthetic_remainder(rng, 2, 3, 6, 1.0)
    sol = solve_homological(BlockDiagonal.scalar(1.0, 6), R, 3, ctx, check=False)
    return [_check("homological equation residual", sol.residual, 1e-10),
            _check("homological solution is Hamiltonian", sol.Psi.hamiltonian_defect(), 1e-12)]


def check_inversion(rng):
    L, J = 4, 8
    ctx = FrequencyContext(1, [2 ** 0.5], 1e-3, 8.0, L, J)
    Lin = linearize(_state(rng, 1, L, J, 0.1, 1e-3), ctx)
    inv = build_reduced_inverse(Lin)
    r = [SpaceTimeField.random(rng, 1, L, J, decay=4.0, zero_mean=True) for _ in range(2)]
    hd, kd = invert_L_dense(Lin, r)
    hr, kr = inv.solve(r)
    err = np.hypot((hd - hr).norm(0), (kd - kr).norm(0)) / np.hypot(hd.norm(0), kd.norm(0))
    return _check("reduced and dense inverses agree", err, 1e-6)


def check_spectral_consistency(rng):
    A = rng.normal(size=(4, 2, 2)) + 1j * rng.normal(size=(4, 2, 2))
    D = BlockDiagonal((A + np.conj(np.swapaxes(A, 1, 2))) / 2 + np.arange(1, 5)[:, None, None] * np.eye(2))
    worst = 0.0
    for j, jp in ((1, 2), (3, 1), (4, 4)):
        for sign in (-1, 1):
            d = eigenvalue_margins(D, [0.37], [1], j, jp, sign)
            worst = max(worst, abs(np.min(np.abs(d)) - sylvester_sigma_min(D, [0.37], [1], j, jp, sign)))
    return _check("eigenvalue divisors equal the 4x4 singular margin", worst, 1e-10)


def check_reduced_flow(rng):
    J = 6
    A = rng.normal(size=(J, 2, 2)) + 1j * rng.normal(size=(J, 2, 2))
    D = BlockDiagonal((A + np.conj(np.swapaxes(A, 1, 2))) / 2)
    h0 = rng.normal(size=2 * J + 1) + 1j * rng.normal(size=2 * J + 1)
    h0[J] = 0
    sn = integrate_reduced(D, h0, np.linspace(0, 50, 11), s=2.0)
    n = np.array([x.h_norm_s for x in sn])
    return _check("reduced flow conserves H^s norms", float(np.max(np.abs(n / n[0] - 1))), 1e-10)


def check_composition(rng):
    worst = 0.0
    for _ in range(5):
        A = ToeplitzOperator.random(rng, 1, 3, 6)
        B = ToeplitzOperator.random(rng, 1, 3, 6)
        lhs = block_decay_norm(compose(A, B, l_out=6), 2)
        rhs = block_decay_norm(A, 2) * block_decay_norm(B, 2)
        worst = max(worst, lhs / rhs)
    return _check("block-decay composition constant", worst / product_constant(2, 1), 1.0)


def run_all(seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for fn in (check_jacobian, check_linear_hamiltonian, check_regularization, check_homological,
               check_inversion, check_spectral_consistency, check_reduced_flow, check_composition):
        r = fn(rng)
        out.extend(r if isinstance(r, list) else [r])
    return out
