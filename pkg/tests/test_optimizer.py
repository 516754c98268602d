from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from priorsr.constraints import DataStats, catalog
from priorsr.datagen import Dataset, VariableInfo, make_dataset
from priorsr.expr import evaluate, parse
from priorsr.optimizer import FitConfig, _Objective, fd_gradient, fit_params, fit_with_retries


def _dataset(x, y, names=("x",)):
    X = np.column_stack([x] if len(names) == 1 else x)
    return Dataset("toy", tuple(VariableInfo(n) for n in names), "y", X, y, ["train"] * len(y))


def test_linear_least_squares():
    x = np.arange(1.0, 11.0)
    r = fit_params(parse("p0*x"), _dataset(x, 2 * x))
    assert r.params[0] == pytest.approx(2.0, abs=1e-6)


def test_constant_is_mean():
    r = fit_params(parse("p0"), _dataset(np.zeros(3), np.full(3, 3.0)))
    assert r.params[0] == pytest.approx(3.0, abs=1e-9)


def test_osc2_recovery():
    d = make_dataset("osc2")
    r = fit_params(parse("p0*sin(t) - p1*v^3 - p2*x*v - p3*x*exp(p4*x)"), d)
    np.testing.assert_allclose(r.params[:5], [0.3, 0.5, 1.0, 5.0, 0.5], atol=1e-2)


def test_crk_recovery():
    d = make_dataset("crk")
    r = fit_params(parse("p1*A^2/(p2*A^4 + 1) - p0*A^2"), d)
    np.testing.assert_allclose(r.params[:3], [0.1899, 0.4598, 0.7498], atol=1e-2)


def test_mse_recomputed_independently():
    d = make_dataset("crk")
    e = parse("p0*A - p1*A^2")
    r = fit_params(e, d)
    pred = evaluate(e, d.table("train"), r.params)
    assert abs(np.mean((d.target("train") - pred) ** 2) - r.mse) <= 1e-12


def test_infeasible_init():
    x = np.array([-1.0, 1.0])
    r = fit_params(parse("log(x)*p0"), _dataset(x, x))
    assert not r.feasible and not r.converged and r.mse == np.inf


def test_bounds_and_frozen_slots():
    x = np.linspace(0, 1, 20)
    cfg = FitConfig(init=(1.0, 0.7, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.25))
    r = fit_params(parse("p0*x + p2"), _dataset(x, -3 * x - 1), cfg)
    assert np.all(r.params >= 0) and np.all(r.params <= 1e6)
    assert r.params[1] == 0.7 and r.params[9] == 0.25
    # symmetric bounds reach the negative optimum
    r2 = fit_params(parse("p0*x + p2"), _dataset(x, -3 * x - 1), FitConfig.symmetric())
    assert r2.params[0] == pytest.approx(-3, abs=1e-5) and r2.params[2] == pytest.approx(-1, abs=1e-5)


def test_objective_history_monotone():
    d = make_dataset("osc1")
    r = fit_params(parse("p0*sin(x) - p1*v^3 - p2*x^3 - p3*x*v - p4*x*cos(x)"), d)
    h = np.array(r.history)
    assert np.all(np.diff(h) <= 1e-15)
    assert r.mse <= h[0]


def test_deterministic_fit():
    d = make_dataset("crk")
    a = fit_params(parse("p0*A^2 - p1*A^3"), d)
    b = fit_params(parse("p0*A^2 - p1*A^3"), d)
    np.testing.assert_array_equal(a.params, b.params)


def test_config_validation():
    with pytest.raises(ValueError):
        FitConfig(bounds=(1.0, 0.0))
    with pytest.raises(ValueError):
        FitConfig(init=(5.0,) * 10, bounds=(0.0, 2.0))


@settings(max_examples=10, deadline=None)
@given(st.lists(st.floats(0.1, 3.0), min_size=3, max_size=3))
def test_gradient_matches_central_difference(theta):
    d = make_dataset("crk")
    e = parse("p1*A^2/(p2*A^4 + 1) - p0*A^2")
    obj = _Objective(e, d.table("train"), d.target("train"), np.ones(10), [0, 1, 2])
    th = np.array(theta)
    g = fd_gradient(obj, th, 1e-7, np.full(3, 1e6))
    central = np.zeros(3)
    for i in range(3):
        h = 1e-5 * max(1, abs(th[i]))
        up, dn = th.copy(), th.copy()
        up[i] += h
        dn[i] -= h
        central[i] = (obj(up) - obj(dn)) / (2 * h)
    np.testing.assert_allclose(g, central, rtol=1e-4, atol=1e-9)


def test_backward_step_at_upper_bound():
    x = np.linspace(0, 1, 5)
    obj = _Objective(parse("p0^2*x"), {"x": x}, np.zeros(5), np.ones(10), [0])
    g = fd_gradient(obj, np.array([2.0]), 1e-7, np.array([2.0]))
    # d/dp mean((p^2 x)^2) = 4 p^3 mean(x^2)
    assert g[0] == pytest.approx(32 * np.mean(x**2), rel=1e-5)


@pytest.fixture(scope="module")
def crk():
    d = make_dataset("crk")
    return d, catalog("crk"), DataStats.from_dataset(d)


def test_retry_first_fit_valid(crk):
    d, cs, s = crk
    c = fit_with_retries(parse("p1*A^2/(p2*A^4 + 1) - p0*A^2"), d, cs, stats=s)
    assert c.valid and c.restarts_used == 0
    assert c.residual.shape == (int(d.mask("train").sum()),)


def test_retries_zero_is_single_fit(crk):
    d, cs, s = crk
    e = parse("p0*A")
    c = fit_with_retries(e, d, cs, retries=0, stats=s)
    r = fit_params(e, d)
    np.testing.assert_array_equal(c.params, r.params)
    assert c.restarts_used == 0 and not c.valid


def test_retries_exhaust_and_return_best_invalid(crk):
    d, cs, s = crk
    c = fit_with_retries(parse("p0*A"), d, cs, retries=3, seed=1, stats=s)
    assert not c.valid and c.restarts_used == 3
    assert c.failure_reason


def test_retry_deterministic(crk):
    d, cs, s = crk
    e = parse("p0*A^2 - p1*A^4 + p2")
    a = fit_with_retries(e, d, cs, seed=5, stats=s)
    b = fit_with_retries(e, d, cs, seed=5, stats=s)
    assert a.same_as(b)


def test_retry_infeasible(crk):
    d, cs, s = crk
    c = fit_with_retries(parse("log(A - 5)*p0"), d, cs, retries=2, stats=s)
    assert c.infeasible and not c.valid
