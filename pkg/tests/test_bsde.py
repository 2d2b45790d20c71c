import numpy as np
import pytest

import oracles
from rsopt import bsde
from rsopt.bsde import LinearSystem, RegimeField, TimeGrid, check_comparison, compute_bounds
from rsopt.constraints import ConstraintSet
from rsopt.errors import DomainError, PreconditionError, SolverError
from rsopt.market import CoefficientCurve, MarketModel, RegimeGenerator, constant_model

FREE = ConstraintSet.unconstrained(1)
Q2 = [[-1.0, 1.0], [2.0, -2.0]]


def single(r=0.02, mu=0.06, sigma=0.2, rho=0.0, T=1.0):
    return constant_model([[0.0]], r, mu, sigma, rho, T)


def twin(r=0.02, mu=0.06, sigma=0.2, rho=0.05):
    return constant_model([[-1.0, 1.0], [1.0, -1.0]], r, mu, sigma, rho, 1.0)


# -- bound constants ------------------------------------------------------------------


def test_power_bound_constants():
    rep = compute_bounds(single(r=0.0, mu=0.0), "power", gamma=0.5)
    assert rep.constants["a"] == pytest.approx(1 + 1e-9, abs=1e-15)
    assert rep.constants["a1"] == pytest.approx(np.exp(-1.0), rel=1e-8)
    assert rep.constants["a2"] == pytest.approx(2 * np.e, rel=1e-8)


def test_log_and_exp_bound_constants():
    rep = compute_bounds(single(rho=2.0), "log")
    assert rep.constants["k"] == 2.0
    assert rep.lower == pytest.approx(np.exp(-2.0))
    ex = compute_bounds(single(r=0.0), "exp-deterministic")
    assert ex.constants["a3"] == pytest.approx(0.5, abs=1e-12)


def test_gamma_negative_needs_eps():
    with pytest.raises(DomainError):
        compute_bounds(single(), "power", gamma=-1.0)


# -- power ----------------------------------------------------------------------------


def test_power_closed_form_path():
    g = TimeGrid(1.0, 200)
    P = bsde.solve_power(single(r=0.03, mu=0.03, rho=0.015), 0.5, FREE, g)
    assert np.allclose(P.values[:, 0, 0], np.sqrt(2.0 - g.nodes), atol=1e-10)


def test_power_merton_matches_closed_form():
    g = TimeGrid(1.0, 1000)
    P = bsde.solve_power(single(), 0.5, FREE, g)
    ref = oracles.merton_power_P(g.nodes, 1.0, 0.5, 0.02, 0.0, 0.04, 0.2)
    assert np.max(np.abs(P.values[:, 0, 0] - ref)) <= 1e-6


def test_power_identical_regimes_agree():
    P = bsde.solve_power(twin(), -1.0, ConstraintSet.budget_simplex(1), TimeGrid(1.0, 100))
    assert np.array_equal(P.values[:, 0], P.values[:, 1])


def test_logform_closed_form_and_symmetry():
    Y = bsde.solve_power_logform(single(r=0.03, mu=0.03, rho=0.015), 0.5, FREE, TimeGrid(1.0, 200))
    assert Y.initial(0) == pytest.approx(0.5 * np.log(2.0), abs=1e-10)
    Yt = bsde.solve_power_logform(twin(), 0.5, FREE, TimeGrid(1.0, 100))
    assert np.array_equal(Yt.values[:, 0], Yt.values[:, 1])


def test_rk4_refinement_ratio():
    model = constant_model(Q2, [0.02, 0.01], [[0.07], [0.04]], [[[0.2]], [[0.3]]], [0.1, 0.2], 1.0)
    P0 = [bsde.solve_power(model, -1.0, FREE, TimeGrid(1.0, N), picard=0).initial(0) for N in (20, 40, 80)]
    d1, d2 = abs(P0[0] - P0[1]), abs(P0[1] - P0[2])
    assert d2 > 0 and d1 / d2 >= 4.0


def test_step_rule_enforced():
    model = constant_model([[-30.0, 30.0], [1.0, -1.0]], 0.02, 0.06, 0.2, 0.05, 1.0)
    with pytest.raises(SolverError, match="exceeds"):
        bsde.solve_power(model, 0.5, FREE, TimeGrid(1.0, 100))


def test_bounds_contain_solution():
    model = constant_model(Q2, [0.02, 0.01], [[0.07], [0.04]], [[[0.2]], [[0.3]]], [0.1, 0.2], 1.0)
    g = TimeGrid(1.0, 200)
    for gamma in (0.5, -2.0):
        P = bsde.solve_power(model, gamma, ConstraintSet.budget_simplex(1), g)
        rep = P.aux["bounds"]
        assert rep.contains(P.values)
        assert np.all(P.values[:, 0, 0] >= rep.lower_curve(g.nodes) - 1e-9)


# -- log ------------------------------------------------------------------------------


def test_log_h_examples():
    g = TimeGrid(1.0, 400)
    h1 = bsde.solve_log_h(constant_model(Q2, 0.02, 0.06, 0.2, 1.0, 1.0), g)
    assert np.max(np.abs(h1.values - 1.0)) < 1e-13
    h2 = bsde.solve_log_h(constant_model(Q2, 0.02, 0.06, 0.2, [1.0, 2.0], 1.0), g)
    assert np.all(h2.values[0] >= np.exp(-2.0)) and np.all(h2.values[0] <= 2.0)


def test_log_P_quadrature():
    g = TimeGrid(1.0, 400)
    model = single(r=0.0, mu=0.0)
    h = bsde.solve_log_h(model, g)
    P = bsde.solve_log_P(model, FREE, h, g)
    assert h.initial(0) == pytest.approx(2.0, abs=1e-12)
    assert P.initial(0) == pytest.approx(-2 * np.log(2.0), abs=1e-9)


def test_log_P_merton():
    g = TimeGrid(1.0, 400)
    model = single(rho=0.1)
    P = bsde.solve_log_P(model, FREE, bsde.solve_log_h(model, g), g)
    assert P.initial(0) == pytest.approx(oracles.merton_log_P0(1.0, 0.02, 0.04, 0.2, 0.1), abs=1e-9)


def test_log_P_singleton():
    g = TimeGrid(1.0, 400)
    model = single(r=0.0, mu=0.0)
    eps = 0.5
    h = bsde.solve_log_h(model, g)
    P = bsde.solve_log_P(model, ConstraintSet.box([0.0], [0.0], eps, eps), h, g)
    # P_0 = int_0^1 (ln eps - eps h_s) ds with h_s = 2 - s
    assert P.initial(0) == pytest.approx(np.log(eps) - 1.5 * eps, abs=1e-9)


def test_log_P_identical_regimes():
    g = TimeGrid(1.0, 100)
    model = twin()
    P = bsde.solve_log_P(model, FREE, bsde.solve_log_h(model, g), g)
    assert np.array_equal(P.values[:, 0], P.values[:, 1])


def test_log_P_rejects_foreign_h():
    g = TimeGrid(1.0, 100)
    h = bsde.solve_log_h(single(rho=0.3), g)
    from rsopt.errors import ConfigurationError

    with pytest.raises(ConfigurationError):
        bsde.solve_log_P(single(rho=0.1), FREE, h, g)


# -- exponential, deterministic rate -----------------------------------------------------


def test_exp_h_deterministic():
    hc = bsde.solve_exp_h_deterministic(single(r=0.0))
    t = np.linspace(0.0, 0.99, 12)
    assert np.allclose(hc(t), 1.0 / (2.0 - t), rtol=0, atol=1e-15)
    assert np.max(np.abs(hc.derivative_residual(np.linspace(0.1, 0.9, 9)))) <= 1e-8


def test_exp_h_piecewise_rate():
    curve = CoefficientCurve(np.array([0.0, 0.5]), np.array([[0.05, 0.0]]), np.full((1, 2, 1), 0.06),
                             np.full((1, 2, 1, 1), 0.2), np.zeros((1, 2)))
    model = MarketModel(RegimeGenerator(np.zeros((1, 1))), 1, 1, curve, 1.0)
    hc = bsde.solve_exp_h_deterministic(model)

    def r_fn(s):
        return 0.05 if s < 0.5 else 0.0

    for t in (0.0, 0.3, 0.5, 0.8):
        assert hc(t)[0] == pytest.approx(oracles.exp_h_quadrature(t, 1.0, r_fn, (0.5,)), abs=1e-8)


def test_exp_Y_against_ode():
    beta = 2.0
    model = single(r=0.0, mu=0.0)
    g = TimeGrid(1.0, 200)
    hc = bsde.solve_exp_h_deterministic(model, g)
    Y = bsde.solve_exp_Y(model, FREE, beta, hc, g)

    def rhs(t, y):
        h = 1.0 / (2.0 - t)
        return h * y + (h / beta) * (1 - np.log(h))

    ref = oracles.backward_ivp(rhs, [0.0], 1.0, g.nodes)[0]
    assert np.max(np.abs(Y.values[:, 0, 0] - ref)) <= 1e-9


def test_exp_Y_identical_regimes():
    model = twin()
    g = TimeGrid(1.0, 100)
    Y = bsde.solve_exp_Y(model, ConstraintSet.no_shorting(1), 1.0, bsde.solve_exp_h_deterministic(model, g), g)
    assert np.array_equal(Y.values[:, 0], Y.values[:, 1])


# -- exponential, random rate -------------------------------------------------------------


def test_exp_h_random_constant_rate():
    g = TimeGrid(1.0, 200)
    r = 0.04
    h = bsde.solve_exp_h_random(single(r=r), g)
    tau = 1.0 - g.nodes
    p = np.exp(-r * tau) + (1 - np.exp(-r * tau)) / r
    assert np.allclose(h.aux["p"].values[:, 0, 0], p, atol=1e-12)
    assert np.max(np.abs(h.gradients)) == 0.0
    h0 = bsde.solve_exp_h_random(single(r=0.0), g)
    assert np.allclose(h0.values[:, 0, 0], 1.0 / (2.0 - g.nodes), atol=1e-12)


def test_exp_P_random_quadrature():
    beta = 2.0
    g = TimeGrid(1.0, 400)
    model = single(r=0.0, mu=0.0)
    P = bsde.solve_exp_P_random(model, beta, bsde.solve_exp_h_random(model, g), g)
    assert P.initial(0) == pytest.approx(-2 * np.log(2.0) / beta, abs=1e-9)


def test_exp_random_matches_deterministic_solver():
    model = constant_model(Q2, 0.03, 0.08, 0.25, [0.05, 0.15], 1.0)
    g = TimeGrid(1.0, 400)
    P = bsde.solve_exp_P_random(model, 1.5, bsde.solve_exp_h_random(model, g), g)
    Y = bsde.solve_exp_Y(model, FREE, 1.5, bsde.solve_exp_h_deterministic(model, g), g)
    assert np.max(np.abs(P.aux["Y"].values - Y.values)) <= 1e-5
    twin_P = bsde.solve_exp_P_random(twin(), 1.0, bsde.solve_exp_h_random(twin(), g), g)
    assert np.array_equal(twin_P.values[:, 0], twin_P.values[:, 1])


# -- factor mode ---------------------------------------------------------------------------


def test_factor_mode_flat_when_insensitive():
    from rsopt.market import FactorSpec

    fac = FactorSpec(enabled=True, kappa=1.0, theta=0.0, vol=np.array([0.3]), x0=0.0,
                     x_min=-1.0, x_max=1.0, nodes=11)
    base = dict(q=Q2, r=0.02, mu=0.06, sigma=0.2, rho=[0.05, 0.1], horizon=1.0)
    ode = constant_model(**base)
    pde = constant_model(**base, factor=fac, r_slope=np.zeros(2), mu_slope=np.zeros((2, 1)))
    g = TimeGrid(1.0, 200)
    a = bsde.solve_power(ode, 0.5, FREE, g).values
    b = bsde.solve_power(pde, 0.5, FREE, g).values
    assert np.max(b.max(-1) - b.min(-1)) <= 1e-8
    assert np.max(np.abs(b - a)) <= 1e-6


def test_factor_mode_responds_to_slope():
    from rsopt.market import FactorSpec

    fac = FactorSpec(enabled=True, kappa=1.0, theta=0.0, vol=np.array([0.3]), x0=0.0,
                     x_min=-1.0, x_max=1.0, nodes=11)
    model = constant_model([[0.0]], 0.02, 0.06, 0.2, 0.05, 1.0, factor=fac,
                           r_slope=np.zeros(1), mu_slope=np.array([[0.05]]))
    P = bsde.solve_power(model, 0.5, FREE, TimeGrid(1.0, 200))
    assert np.all(np.diff(np.abs(P.values[0, 0])[5:]) > 0)
    assert np.any(P.gradients != 0)


# -- comparison ------------------------------------------------------------------------------


def test_comparison_identical_and_shift():
    g = TimeGrid(1.0, 100)
    A = np.array([[-1.0, 0.5], [0.3, -0.2]])
    a = LinearSystem(np.array([0.1, -0.2]), A, np.array([1.0, 0.0]))
    same = check_comparison(a, a, g)
    assert same.ok and same.max_violation == 0.0
    b = LinearSystem(np.array([0.2, -0.1]), A, np.array([1.0, 0.0]))
    rep = check_comparison(a, b, g)
    gap = rep.upper - rep.lower
    assert rep.ok and np.all(gap[:-1] > 0)
    assert np.all(gap[0] >= 0.1 * np.exp(-1.0))


def test_comparison_preconditions():
    g = TimeGrid(1.0, 50)
    bad = LinearSystem(np.zeros(2), np.array([[0.0, -1.0], [0.0, 0.0]]), np.zeros(2))
    ok = LinearSystem(np.zeros(2), np.zeros((2, 2)), np.zeros(2))
    with pytest.raises(PreconditionError):
        check_comparison(bad, ok, g)
    with pytest.raises(PreconditionError):
        check_comparison(LinearSystem(np.zeros(2), np.zeros((2, 2)), np.ones(2)), ok, g)


def test_lower_curve_below_power_solution():
    model = single(r=0.02, rho=0.04)
    g = TimeGrid(1.0, 200)
    P = bsde.solve_power(model, 0.5, FREE, g)
    low = P.aux["bounds"].lower_curve(g.nodes)
    assert np.all(low <= P.values[:, 0, 0] + 1e-12)


# -- serialisation --------------------------------------------------------------------------


def test_field_csv_round_trip(tmp_path):
    model = constant_model(Q2, 0.02, 0.06, 0.2, [0.05, 0.1], 1.0)
    P = bsde.solve_power(model, 0.5, FREE, TimeGrid(1.0, 50))
    path = tmp_path / "P.csv"
    P.to_csv(path)
    back = RegimeField.from_csv(path, "P", P.terminal)
    assert np.array_equal(back.values, P.values)
    assert np.array_equal(back.gradients, P.gradients)
    assert back.grid == P.grid
