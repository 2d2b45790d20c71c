import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from rsopt import _hampy
from rsopt._backend import BACKEND
from rsopt.constraints import (
    ConstraintSet,
    exp_hamiltonian,
    log_hamiltonian,
    power_batch,
    power_hamiltonian,
)
from rsopt.errors import DomainError
from rsopt.market import CoefficientSet


def coeffs(b, sigma=0.2, r=0.02):
    return CoefficientSet(r, np.array([r + b]), np.array([[sigma]]), 0.0)


def test_contains_examples():
    simplex = ConstraintSet.budget_simplex(1)
    assert simplex.contains([0.5], 0.4)
    assert not simplex.contains([0.8], 0.4)
    assert not ConstraintSet.no_shorting(1).contains([-0.01], 0.1, tol=0.0)


def test_power_examples():
    free = ConstraintSet.unconstrained(1)
    r0 = power_hamiltonian(free, 0.5, 1.0, [0.0], coeffs(0.0))
    assert r0.value == pytest.approx(0.5, abs=1e-12)
    assert r0.argmax_pi[0] == pytest.approx(0.0, abs=1e-12) and r0.argmax_c == pytest.approx(1.0)
    r1 = power_hamiltonian(free, 0.5, 1.0, [0.0], coeffs(0.04))
    assert r1.value == pytest.approx(0.52, abs=1e-12)
    assert r1.argmax_pi[0] == pytest.approx(2.0) and r1.argmax_c == pytest.approx(1.0)
    r2 = power_hamiltonian(ConstraintSet.no_shorting(1), 0.5, 1.0, [0.0], coeffs(-0.04))
    assert r2.argmax_pi[0] == 0.0 and r2.value == pytest.approx(0.5)


def test_budget_simplex_is_active():
    res = power_hamiltonian(ConstraintSet.budget_simplex(1), 0.5, 1.0, [0.0], coeffs(0.04))
    ref, x = oracles.power_oracle(0.5, 1.0, np.zeros(1), np.array([[0.2]]), np.array([0.04]),
                                  "budget-simplex", {})
    assert res.argmax_pi[0] + res.argmax_c == pytest.approx(1.0, abs=1e-12)
    assert res.value == pytest.approx(ref, rel=1e-6)
    assert np.allclose([res.argmax_pi[0], res.argmax_c], x, atol=1e-4)


def test_log_examples():
    free = ConstraintSet.unconstrained(1)
    r = log_hamiltonian(free, 1.0, [0.0], coeffs(0.04))
    assert r.value == pytest.approx(-0.98, abs=1e-12)
    assert r.argmax_pi[0] == pytest.approx(1.0) and r.argmax_c == pytest.approx(1.0)
    assert log_hamiltonian(free, 1.0, [0.0], coeffs(0.0)).value == pytest.approx(-1.0, abs=1e-12)
    single = ConstraintSet.box([0.0], [0.0], 0.5, 0.5)
    assert log_hamiltonian(single, 1.0, [0.0], coeffs(0.04)).value == pytest.approx(np.log(0.5) - 0.5)


def test_exp_examples():
    free = ConstraintSet.unconstrained(1)
    r = exp_hamiltonian(free, 1.0, 1.0, [0.0], coeffs(0.04))
    assert r.value == pytest.approx(0.02, abs=1e-12) and r.argmax_pi[0] == pytest.approx(1.0)
    z = 0.04 / (1.0 * 0.2)
    r0 = exp_hamiltonian(free, 1.0, 1.0, [z], coeffs(0.04))
    assert r0.value == pytest.approx(0.0, abs=1e-14) and r0.argmax_pi[0] == pytest.approx(0.0, abs=1e-12)
    r1 = exp_hamiltonian(ConstraintSet.no_shorting(1), 1.0, 1.0, [0.5], coeffs(0.04))
    assert r1.argmax_pi[0] == 0.0 and r1.value == 0.0


def test_domain_errors():
    free = ConstraintSet.unconstrained(1)
    with pytest.raises(DomainError):
        power_hamiltonian(free, 0.5, -1.0, [0.0], coeffs(0.0))
    with pytest.raises(DomainError):
        log_hamiltonian(free, 0.0, [0.0], coeffs(0.0))
    with pytest.raises(DomainError):
        exp_hamiltonian(free, -1.0, 1.0, [0.0], coeffs(0.0))


@pytest.mark.parametrize("family", ["unconstrained", "no-shorting", "budget-simplex"])
def test_small_oracle_sample(family):
    rng = np.random.default_rng(1)
    theta = ConstraintSet.from_spec(family, 1)
    for _ in range(10):
        gamma = float(rng.choice([-2.0, 0.3]))
        P, lam, b = rng.uniform(0.5, 5), rng.uniform(-1, 1, 1), rng.uniform(-0.05, 0.15)
        res = power_hamiltonian(theta, gamma, P, lam, coeffs(b, 0.4))
        ref, _ = oracles.power_oracle(gamma, P, lam, np.array([[0.4]]), np.array([b]), family, {})
        assert abs(res.value - ref) <= 1e-4 * (1 + abs(ref))


@pytest.mark.skipif(BACKEND != "compiled", reason="compiled kernel not built")
def test_backends_agree(monkeypatch):
    from rsopt import _backend

    rng = np.random.default_rng(3)
    B, m = 500, 2
    sig = np.eye(m) * 0.3 + np.tril(rng.uniform(-0.05, 0.05, (B, m, m)), -1)
    for theta in (ConstraintSet.unconstrained(m), ConstraintSet.budget_simplex(m),
                  ConstraintSet.half_space([1.0, -0.5], 0.3, 1.0)):
        P = rng.uniform(0.5, 3, B)
        Lam = rng.uniform(-1, 1, (B, m))
        b = rng.uniform(-0.05, 0.15, (B, m))
        fast = power_batch(theta, 0.5, P, Lam, sig, b)
        monkeypatch.setattr(_backend, "solve_batch", _hampy.solve_batch)
        slow = power_batch(theta, 0.5, P, Lam, sig, b)
        monkeypatch.undo()
        assert np.allclose(fast.value, slow.value, rtol=1e-12, atol=1e-12)
        assert np.allclose(fast.pi, slow.pi, atol=1e-9)
        assert np.allclose(fast.c, slow.c, atol=1e-9)


GAMMAS = st.sampled_from([-2.0, -0.5, 0.3, 0.7])


@settings(max_examples=60, deadline=None)
@given(P=st.floats(0.1, 10), lam=st.floats(-2, 2), b=st.floats(-0.1, 0.2), gamma=GAMMAS,
       family=st.sampled_from(["budget-simplex", "half-space", "no-shorting"]))
def test_argmax_feasible_and_nested_value(P, lam, b, gamma, family):
    theta = (ConstraintSet.half_space([1.0], 0.5, 1.0) if family == "half-space"
             else ConstraintSet.from_spec(family, 1))
    res = power_hamiltonian(theta, gamma, P, [lam], coeffs(b, 0.3))
    assert theta.contains(res.argmax_pi, res.argmax_c, 1e-9)
    free = power_hamiltonian(ConstraintSet.unconstrained(1), gamma, P, [lam], coeffs(b, 0.3))
    # the reported value is gamma * sup, so compare the sups
    assert res.value / gamma <= free.value / gamma + 1e-10 * (1 + abs(free.value))


@settings(max_examples=60, deadline=None)
@given(P=st.floats(0.1, 10), lam=st.floats(-2, 2), b=st.floats(-0.1, 0.2), gamma=GAMMAS,
       scale=st.floats(0.1, 10), family=st.sampled_from(["unconstrained", "no-shorting", "box"]))
def test_portfolio_argmax_scale_invariant(P, lam, b, gamma, scale, family):
    # without a coupling constraint the pi-part is homogeneous in (P, Lambda)
    theta = (ConstraintSet.box([-1.0], [1.0], 0.0, 2.0) if family == "box"
             else ConstraintSet.from_spec(family, 1))
    a = power_hamiltonian(theta, gamma, P, [lam], coeffs(b, 0.3))
    s = power_hamiltonian(theta, gamma, scale * P, [scale * lam], coeffs(b, 0.3))
    assert np.allclose(a.argmax_pi, s.argmax_pi, atol=1e-8)
