import numpy as np
import pytest

from kirchhoff_qp.kam_reducibility import (NonResonanceViolation, ReducibilityState,
                                           check_cantor_membership, homological_residual, kam_step,
                                           n_schedule, reduce, solve_homological,
                                           synthetic_remainder)
from kirchhoff_qp.spectral_core import FrequencyContext
from kirchhoff_qp.toeplitz_ops import BlockDiagonal, PairedOperator, ToeplitzOperator

from conftest import GOLDEN

OM2 = [2 ** 0.5, GOLDEN]


def ctx(nu=1, L=4, J=6, gamma=0.01, tau=2.0, omega=None):
    omega = ([GOLDEN] if nu == 1 else OM2) if omega is None else omega
    return FrequencyContext(nu, omega, gamma, tau, L, J)


def single_mode(nu, L, J, ell, j, jp, which, val):
    P, Q = ToeplitzOperator.zeros(nu, L, J), ToeplitzOperator.zeros(nu, L, J)
    T = P if which == "P" else Q
    T.A[tuple(np.add(ell, L)) + (2 * (j - 1), 2 * (jp - 1))] = val
    return PairedOperator(P, Q)


def test_block_diagonal_remainder_gives_zero():
    c = ctx()
    D = BlockDiagonal.scalar(1.0, 6)
    rng = np.random.default_rng(0)
    R = PairedOperator(BlockDiagonal(rng.normal(size=(6, 2, 2))).to_operator(1, 4),
                       ToeplitzOperator.zeros(1, 4, 6))
    sol = solve_homological(D, R, 4, c, check=False)
    assert sol.Psi.norm(0) == 0


@pytest.mark.parametrize("which,ell,j,jp", [("P", (2,), 3, 1), ("P", (-1,), 2, 5), ("Q", (1,), 2, 3)])
def test_closed_form_divisor(which, ell, j, jp):
    m, val = 1.03, 0.7 - 0.2j
    c = ctx()
    R = single_mode(1, 4, 6, ell, j, jp, which, val)
    sol = solve_homological(BlockDiagonal.scalar(m, 6), R, 4, c, check=False)
    T = sol.Psi.P if which == "P" else sol.Psi.Q
    div = GOLDEN * ell[0] + m * (j - jp if which == "P" else j + jp)
    got = T.A[tuple(np.add(ell, T.l_max)) + (2 * (j - 1), 2 * (jp - 1))]
    assert got == pytest.approx(1j * val / div, rel=1e-13)
    assert np.count_nonzero(np.abs(T.A) > 1e-15) == 1
    assert sol.residual < 1e-14


def test_homological_residual_random():
    rng = np.random.default_rng(1)
    c = ctx(nu=2, L=3, J=6)
    R = synthetic_remainder(rng, 2, 3, 6, 1.0)
    A = rng.normal(size=(6, 2, 2)) + 1j * rng.normal(size=(6, 2, 2))
    D = BlockDiagonal.scalar(1.0, 6) + BlockDiagonal(0.01 * (A + np.conj(np.swapaxes(A, 1, 2))))
    sol = solve_homological(D, R, 3, c, check=False)
    assert sol.residual < 1e-10
    assert homological_residual(D, R, sol.Psi, 3, c) == pytest.approx(sol.residual)
    assert sol.Psi.hamiltonian_defect() < 1e-12


def test_forced_resonance_raises():
    # w.l + m(j - j') = 0 exactly: m = 1, w = 2, l = 1, j - j' = -2
    c = ctx(omega=[2.0])
    R = single_mode(1, 4, 6, (1,), 1, 3, "P", 1.0)
    with pytest.raises(NonResonanceViolation) as e:
        solve_homological(BlockDiagonal.scalar(1.0, 6), R, 4, c)
    assert e.value.kind == "minus"


def test_cantor_membership_unperturbed_first():
    c = ctx(L=6, J=8, gamma=0.01, tau=2.0)
    m = 1.0
    D = BlockDiagonal.scalar(m, 8)
    out = check_cantor_membership(D, m, c, 6)
    brute = min(abs(GOLDEN * l + m * j) * max(1, abs(l)) ** 2 / (2 * 0.01 * j)
                for l in range(-6, 7) for j in range(1, 9))
    assert out["first"]["margin"] == pytest.approx(brute, rel=1e-12)


def test_cantor_membership_forced_and_monotone():
    c = ctx(omega=[2.0])
    out = check_cantor_membership(BlockDiagonal.scalar(1.0, 6), 1.0, c, 4)
    assert not out["passed"] and out["min_margin"] == pytest.approx(0, abs=1e-12)
    c = ctx(L=6, J=8)
    D = BlockDiagonal.scalar(1.0, 8)
    for gamma in (0.3, 0.1, 0.03, 0.01, 0.003):
        prev = check_cantor_membership(D, 1.0, c, 6, gamma=gamma)
        half = check_cantor_membership(D, 1.0, c, 6, gamma=gamma / 2)
        assert half["min_margin"] >= prev["min_margin"]
        assert not (prev["passed"] and not half["passed"])


def test_kam_step_zero_remainder():
    c = ctx()
    st = ReducibilityState(0, BlockDiagonal.scalar(1.0, 6), 1.0, PairedOperator.zeros(1, 4, 6))
    new, info = kam_step(st, c)
    assert new.step == 1 and np.array_equal(new.D.blocks, st.D.blocks)
    assert new.R.norm(0) == 0 and new.Phi_m1 is None


def test_kam_step_quadratic():
    c = ctx(nu=1, L=8, J=8)
    out = []
    for eps in (1e-3, 5e-4):
        R0 = synthetic_remainder(np.random.default_rng(3), 1, 8, 8, eps)
        st = ReducibilityState(0, BlockDiagonal.scalar(1.0, 8), 1.0, R0, N0=8)
        new, _ = kam_step(st, c, N=8, check=False)
        out.append(new.R.norm_D(c.s0))
    assert out[0] / out[1] == pytest.approx(4.0, rel=0.05)


def test_reduce_zero_remainder():
    c = ctx()
    fin = reduce(1.0, PairedOperator.zeros(1, 4, 6), c)
    assert fin.stopped_by == "tolerance"
    assert np.allclose(fin.D_inf.blocks, BlockDiagonal.scalar(1.0, 6).blocks)
    assert np.array_equal(fin.Phi(1, 6, 4).P.A, PairedOperator.identity(1, 6, 4).P.A)


def test_reduce_synthetic():
    c = ctx(nu=1, L=8, J=8)
    eps = 1e-4
    R0 = synthetic_remainder(np.random.default_rng(4), 1, 8, 8, eps)
    fin = reduce(1.0, R0, c, steps=6, N0=4, tol=1e-30, check=False)
    rD = [r["R_D_s0"] for r in fin.table]
    assert all(b < a for a, b in zip(rD, rD[1:]))
    assert fin.conjugation_defect < 1e-8
    assert fin.D_inf.is_selfadjoint(1e-12)
    sup, ratio = fin.asymptotics(eps)
    assert ratio < 10


def test_n_schedule():
    assert n_schedule(8, 1.5, 3) == [int(np.floor(8 ** (1.5 ** k))) for k in range(4)]
