import numpy as np
import pytest

from kirchhoff_qp.linearization import StatePair, linearize
from kirchhoff_qp.nash_moser import (NashMoserConfig, assemble_full_solution, build_reduced_inverse,
                                     eval_F_full, invert_L_dense, invert_L_reduced,
                                     nash_moser_iterate, solve_zero_mode, zero_mode_residual)
from kirchhoff_qp.spectral_core import (FrequencyContext, NearResonanceError, SpaceTimeField,
                                        ToroidalFunction, ell_grid)

from conftest import GOLDEN

L_, J_ = 6, 6
CTX = FrequencyContext(1, [GOLDEN], 0.05, 3.0, L_, J_)


def cos_forcing(nu=1, L=L_, J=J_, amp=0.25):
    one = (1,) + (0,) * (nu - 1)
    neg = tuple(-x for x in one)
    return SpaceTimeField.from_modes({(one, 1): amp, (one, -1): amp, (neg, 1): amp, (neg, -1): amp},
                                     nu, L, J)


def test_config_identities():
    cfg = NashMoserConfig(eps=1e-3, gamma=0.1, tau=3.0)
    mu1 = cfg.mu1
    assert cfg.kappa == 6 * mu1 + 19
    assert cfg.b1 == pytest.approx(2 * mu1 + 4 + cfg.kappa * (1 + 1 / cfg.chi) + 1)
    assert cfg.a1_nm == pytest.approx(cfg.kappa / cfg.chi - 2 * mu1)
    with pytest.raises(ValueError):
        NashMoserConfig(eps=1e-3, gamma=0.1, inversion_path="lu")


def test_zero_mode_closed_form():
    eps = 1e-3
    z = SpaceTimeField.zeros(1, L_, J_)
    v0, p0 = solve_zero_mode(z, CTX, eps)
    assert not np.any(v0.coeffs) and not np.any(p0.coeffs)
    l = 2
    f = SpaceTimeField.from_modes({((l,), 0): 0.5, ((-l,), 0): 0.5}, 1, L_, J_)
    v0, p0 = solve_zero_mode(f, CTX, eps)
    phi = np.linspace(0, 2 * np.pi, 9)[:, None]
    wl = GOLDEN * l
    assert np.allclose(p0(phi), eps * np.sin(l * phi[:, 0]) / wl, atol=1e-16)
    assert np.allclose(v0(phi), -eps * np.cos(l * phi[:, 0]) / wl ** 2, atol=1e-16)


def test_zero_mode_random_and_mean(rng):
    f = SpaceTimeField.random(rng, 1, L_, J_, zero_mean=False).real_part()
    f.coeffs[L_, J_] = 0
    v0, p0 = solve_zero_mode(f, CTX, 1e-2)
    assert zero_mode_residual(v0, p0, f, CTX, 1e-2) < 1e-15
    f.coeffs[L_, J_] = 1.0
    with pytest.raises(ValueError):
        solve_zero_mode(f, CTX, 1e-2)


def test_dense_inverse_constant_coefficients(rng):
    Lin = linearize(StatePair.zeros(1, L_, J_, 1e-3), CTX)
    r1 = SpaceTimeField.random(rng, 1, L_, J_)
    r2 = SpaceTimeField.random(rng, 1, L_, J_)
    h, k = invert_L_dense(Lin, (r1, r2))
    wl = (ell_grid(1, L_) @ CTX.omega)[:, None]
    j2 = np.arange(-J_, J_ + 1) ** 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        ref = np.where(j2 > 0, (r2.coeffs + 1j * wl * r1.coeffs) / (j2 - wl ** 2), 0)
    assert np.max(np.abs(h.coeffs - ref)) < 1e-12
    hr, kr = invert_L_reduced(Lin, (r1, r2))
    assert np.max(np.abs(hr.coeffs - ref)) < 1e-10


def test_inverse_residual_and_zero_rhs(rng):
    u = SpaceTimeField.random(rng, 1, L_, J_, decay=4.0)
    Lin = linearize(StatePair(u * (0.2 / u.dx().norm(0)), SpaceTimeField.zeros(1, L_, J_), 1e-2), CTX)
    r = (SpaceTimeField.random(rng, 1, L_, J_), SpaceTimeField.random(rng, 1, L_, J_))
    h, k = invert_L_dense(Lin, r)
    back = Lin.apply(h, k)
    assert max((a - b).norm(0) for a, b in zip(back, r)) < 1e-10 * max(x.norm(0) for x in r)
    z = SpaceTimeField.zeros(1, L_, J_)
    h0, k0 = build_reduced_inverse(Lin).solve((z, z))
    assert h0.norm(0) == 0 and k0.norm(0) == 0


def test_dense_singular():
    ctx = FrequencyContext(1, [2.0], 0.05, 3.0, 2, 2)
    Lin = linearize(StatePair.zeros(1, 2, 2, 1e-3), ctx)
    r = SpaceTimeField.from_modes({((1,), 2): 1.0}, 1, 2, 2)
    with pytest.raises(NearResonanceError):
        invert_L_dense(Lin, (r, r))


def test_zero_forcing_stays_zero():
    cfg = NashMoserConfig(eps=1e-3, gamma=0.1)
    res = nash_moser_iterate(SpaceTimeField.zeros(1, L_, J_), cfg, CTX)
    assert res.status == "converged" and res.state.norm(0) == 0
    assert res.residuals == [0.0]


@pytest.fixture(scope="module")
def converged():
    eps = 1e-3
    ctx = FrequencyContext(1, [GOLDEN], eps ** (1 / 3), 3.0, 8, 8)
    f = cos_forcing(L=8, J=8)
    cfg = NashMoserConfig(eps=eps, gamma=eps ** (1 / 3))
    return nash_moser_iterate(f, cfg, ctx), f, ctx, eps


def test_iterate_converges(converged):
    res, f, ctx, eps = converged
    assert res.status == "converged" and res.residuals[-1] < 1e-10
    r = res.residuals
    assert all(b < a for a, b in zip(r, r[1:]))
    assert len(res.history) <= 9
    assert res.state.u.is_real() and res.state.u.is_zero_mean()


def test_assembled_solution(converged):
    res, f, ctx, eps = converged
    v0, p0 = solve_zero_mode(f, ctx, eps)
    v, p = assemble_full_solution(res.state, v0, p0)
    F = eval_F_full(v, p, f, eps, ctx)
    assert max(x.norm(ctx.s0) for x in F) < 1e-8
    assert v.coeffs[8, 8] == 0 and p.coeffs[8, 8] == 0


def test_assemble_zero():
    eps = 1e-3
    f = cos_forcing()
    z = StatePair.zeros(1, L_, J_, eps)
    zero = ToroidalFunction.zeros(1, L_)
    v, p = assemble_full_solution(z, zero, zero)
    F = eval_F_full(v, p, f, eps, CTX)
    assert F[0].norm(0) == 0
    assert F[1].norm(0) == pytest.approx((f * eps).norm(0))


def test_reduced_path_agrees(converged):
    res, f, ctx, eps = converged
    cfg = NashMoserConfig(eps=eps, gamma=eps ** (1 / 3), inversion_path="reduced")
    red = nash_moser_iterate(f, cfg, ctx)
    assert red.status == "converged"
    assert (red.state.u - res.state.u).norm(ctx.s0) < 1e-9


def test_csv_header(converged):
    res = converged[0]
    head = res.csv().splitlines()[0]
    assert head == "n,residual_s0,residual_high,u_norm_s0,N,omega_excluded,inversion_path,wall_time"
