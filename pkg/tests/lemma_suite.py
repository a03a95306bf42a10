"""Random-instance checks of the operator norm lemmas, shared by the unit and acceptance tests.

Each lemma is checked against an explicit constant that follows from
<a + b> <= <a> + <b> and Cauchy-Schwarz (product_constant); the fitted
constant is the largest observed ratio lhs / (rhs without the constant).
"""
from dataclasses import dataclass, field

import numpy as np

from kirchhoff_qp.spectral_core import SpaceTimeField, product_constant
from kirchhoff_qp.toeplitz_ops import (PairedOperator, ToeplitzOperator, apply, block_decay_norm,
                                       compose, operator_expm1, projection_operator, truncate_time)


@dataclass
class LemmaResult:
    name: str
    ratios: list = field(default_factory=list)
    violations: int = 0

    @property
    def fitted(self):
        return max(self.ratios)

    def add(self, lhs, rhs, const):
        r = lhs / rhs
        self.ratios.append(r)
        if not np.isfinite(r) or r > const * (1 + 1e-12):
            self.violations += 1

    @property
    def ok(self):
        return self.violations == 0 and np.isfinite(self.fitted) and len(self.ratios) > 0


def _shape(rng):
    nu = int(rng.integers(1, 3))
    return (nu, 3, 5) if nu == 1 else (nu, 2, 4)


def _op(rng, nu, L, J):
    return ToeplitzOperator.random(rng, nu, L, J, decay=rng.uniform(0.5, 4), offdiag_decay=rng.uniform(0.5, 4))


def _s_values(nu):
    s0 = (nu + 1) // 2 + 1
    return s0, (s0, s0 + 1, s0 + 2)


def composition(rng, n):
    res = LemmaResult("block-decay composition")
    for _ in range(n):
        nu, L, J = _shape(rng)
        A, B = _op(rng, nu, L, J), _op(rng, nu, L, J)
        AB = compose(A, B, l_out=2 * L)
        s0, ss = _s_values(nu)
        for s in ss:
            rhs = block_decay_norm(A, s) * block_decay_norm(B, s0) + block_decay_norm(A, s0) * block_decay_norm(B, s)
            res.add(block_decay_norm(AB, s), rhs, product_constant(s, nu))
    return res


def tame_action(rng, n):
    res = LemmaResult("tame action")
    for _ in range(n):
        nu, L, J = _shape(rng)
        R = _op(rng, nu, L, J)
        h = SpaceTimeField.random(rng, nu, L, J, decay=rng.uniform(0, 3), real=False)
        Rh = apply(R, h, l_out=2 * L)
        s0, ss = _s_values(nu)
        for s in ss:
            rhs = block_decay_norm(R, s0) * h.norm(s) + block_decay_norm(R, s) * h.norm(s0)
            res.add(Rh.norm(s), rhs, product_constant(s, nu))
    return res


def smoothing(rng, n):
    res = LemmaResult("smoothing")
    for _ in range(n):
        nu, L, J = _shape(rng)
        R = _op(rng, nu, L, J)
        N = int(rng.integers(1, L))
        s = float(rng.uniform(0, 3))
        b = float(rng.uniform(0.5, 2.5))
        perp = R - truncate_time(R, N)
        res.add(block_decay_norm(perp, s), N ** -b * block_decay_norm(R, s + b), 1.0)
    return res


def projection(rng, n):
    res = LemmaResult("projection operator")
    for _ in range(n):
        nu, L, J = _shape(rng)
        q = SpaceTimeField.random(rng, nu, L, J, decay=rng.uniform(0, 3), real=False)
        g = SpaceTimeField.random(rng, nu, L, J, decay=rng.uniform(0, 3), real=False)
        R = projection_operator(q, g)
        s0, ss = _s_values(nu)
        for s in ss:
            rhs = g.norm(s0) * q.norm(s) + g.norm(s) * q.norm(s0)
            res.add(block_decay_norm(R, s), rhs, 2 * np.pi * np.sqrt(2) * product_constant(s, nu))
    return res


def exponential(rng, n):
    res = LemmaResult("exponential")
    for _ in range(n):
        nu, L, J = _shape(rng)
        P, Q = _op(rng, nu, L, J), _op(rng, nu, L, J)
        Psi = PairedOperator(P, Q).left_abs_D(-0.5).right_abs_D(-0.5)
        s0, ss = _s_values(nu)
        Psi = Psi * (rng.uniform(0.01, 0.5) / Psi.norm(ss[-1]))
        Psi = Psi.resize(3 * L)
        for sign in (1.0, -1.0):
            E = operator_expm1(Psi * sign, tol=1e-15, s=s0, warn=False)
            ED = E.right_abs_D()
            for s in ss:
                C = 2 * 2 * product_constant(s, nu)
                res.add(E.norm(s), Psi.norm(s), np.exp(C * Psi.norm(s0)))
                res.add(ED.norm(s), Psi.norm_D(s), np.exp(C * Psi.norm(s)))
    return res


LEMMAS = (composition, tame_action, smoothing, projection, exponential)


def run_suite(n=100, seed=0):
    rng = np.random.default_rng(seed)
    return [fn(rng, n) for fn in LEMMAS]
