import numpy as np
import pytest

from kirchhoff_qp.linearization import StatePair, linearize
from kirchhoff_qp.regularization import (complexify, regularize, reparametrize_time, symmetrize,
                                         symplectic_defect_S, to_complex, to_real)
from kirchhoff_qp.spectral_core import FrequencyContext, SpaceTimeField
from kirchhoff_qp.toeplitz_ops import PairedOperator, compose_paired

L_, J_ = 4, 8
CTX = FrequencyContext(1, [2 ** 0.5], 0.1, 3.0, L_, J_)


def lin_at(rng, eps, amp=0.3):
    u = SpaceTimeField.random(rng, 1, L_, J_, decay=4.0)
    u = u * (amp / u.dx().norm(0))
    return linearize(StatePair(u, SpaceTimeField.zeros(1, L_, J_), eps), CTX)


@pytest.fixture(scope="module")
def reg_pair():
    rng = np.random.default_rng(2)
    Lin = lin_at(rng, 0.01)
    return Lin, regularize(Lin, l_coef=3 * L_, l_op=2 * L_), rng


def test_eps_zero_is_trivial():
    Lin = linearize(StatePair.zeros(1, L_, J_, 0.1), CTX)
    reg = regularize(Lin)
    assert reg.m == pytest.approx(1.0, abs=1e-15)
    for f, c in ((reg.beta, 1), (reg.a1, 1), (reg.rho, 1)):
        assert np.allclose(f.grid(), c, atol=1e-14)
    for f in (reg.a0, reg.alpha, reg.b0, reg.v):
        assert np.max(np.abs(f.coeffs)) < 1e-15
    assert reg.R4.norm(2) < 1e-12
    I = PairedOperator.identity(1, J_, reg.V.l_max)
    assert (reg.V - I).norm(2) < 1e-13


def test_symmetrize_pointwise(reg_pair):
    Lin, reg, _ = reg_pair
    a = np.real(Lin.a.grid(32))
    assert np.allclose(np.real(reg.beta.grid(32)), a ** -0.25, atol=1e-12)
    assert np.allclose(np.real(reg.a1.grid(32)), a ** 0.5, atol=1e-12)
    assert symplectic_defect_S(reg.beta, J_) < 1e-12


def test_complex_variables_roundtrip(rng):
    eta = SpaceTimeField.random(rng, 1, 3, 5)
    zeta = SpaceTimeField.random(rng, 1, 3, 5)
    e2, z2 = to_real(to_complex(eta, zeta))
    assert np.max(np.abs(e2.coeffs - eta.coeffs)) < 1e-15
    assert np.max(np.abs(z2.coeffs - zeta.coeffs)) < 1e-15


def test_complexified_upper_left_selfadjoint(reg_pair):
    Lin, _, _ = reg_pair
    sym = symmetrize(Lin, 3 * L_, 2 * L_)
    L2 = complexify(sym, 1)
    assert np.max(np.abs((sym.R1.transpose() - sym.R1).A)) < 1e-13
    H = L2.P * -1j
    assert np.max(np.abs((H.adjoint() - H).A)) < 1e-12


def test_time_reparametrization_identities(reg_pair):
    Lin, reg, _ = reg_pair
    a1 = np.real(reg.a1.grid(40))
    dal = np.real(reg.alpha.dphi(CTX.omega).grid(40))
    assert np.max(np.abs(reg.m * (1 + dal) - a1)) < 1e-12
    assert np.allclose(reg.v.coeffs, reg.b0.coeffs / (2 * reg.m))
    assert reg.report["alpha_tilde_residual"] < 1e-12


def test_m_and_R4_scale_with_eps():
    rng = np.random.default_rng(7)
    u = SpaceTimeField.random(rng, 1, L_, J_, decay=4.0)
    u = u * (0.3 / u.dx().norm(0))
    rm, rr = [], []
    for eps in (1e-2, 1e-3, 1e-4):
        Lin = linearize(StatePair(u, SpaceTimeField.zeros(1, L_, J_), eps), CTX)
        reg = regularize(Lin, l_coef=3 * L_, l_op=2 * L_)
        assert isinstance(reg.m, float)
        rm.append(abs(reg.m - 1) / eps)
        rr.append(reg.R4.norm_D(CTX.s0) / eps)
        assert reg.R4.is_hamiltonian(1e-12)
    assert max(rm) / min(rm) < 1.1 and max(rr) / min(rr) < 1.5


def test_descent_map_invertible(reg_pair):
    _, reg, _ = reg_pair
    Lop = reg.V.l_max
    prod = compose_paired(reg.V_inv.resize(2 * Lop), reg.V.resize(2 * Lop))
    I = PairedOperator.identity(1, J_, 2 * Lop)
    assert (prod - I).resize(Lop // 2).norm(2) < 1e-12


def test_conjugation_identity(reg_pair):
    Lin, reg, rng = reg_pair
    Lw = 3 * L_
    z = SpaceTimeField.random(rng, 1, L_ // 2, J_, decay=3.0, real=False).resize(Lw)
    h, k = reg.W1(z)
    lhs = Lin.apply(h, k)
    rhs = reg.W2(reg.apply_L4(z))
    err = max((a - b).resize(L_ // 2, J_ // 2).norm(CTX.s0) for a, b in zip(lhs, rhs))
    assert err / max(a.resize(L_ // 2, J_ // 2).norm(CTX.s0) for a in lhs) < 1e-10


def test_W_inverses(reg_pair):
    _, reg, rng = reg_pair
    z = SpaceTimeField.random(rng, 1, L_ // 2, J_, decay=3.0, real=False).resize(3 * L_)
    back = reg.W1_inv(*reg.W1(z))
    assert (back - z).resize(L_ // 2, J_ // 2).norm(0) < 1e-10 * z.norm(0)


def test_rejects_nonpositive_a(reg_pair):
    Lin, _, _ = reg_pair
    import dataclasses
    bad = dataclasses.replace(Lin, a=Lin.a * -1.0)
    with pytest.raises(ValueError):
        symmetrize(bad)
