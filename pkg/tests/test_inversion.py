import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pmlfwi.forward import TraceRecord
from pmlfwi.inversion import (
    InversionConfig,
    LBFGSMemory,
    LineSearchParams,
    Stage,
    armijo_search,
    bias_lambda_direction,
    bias_weight,
    choose_reg_factor,
    export_history,
    invert,
    lbfgs_direction,
    misfit_value,
    rms_error,
    single_parameter_mode,
)
from pmlfwi.operators import PULSES

finite = st.floats(-10, 10, allow_nan=False)


def test_lbfgs_empty_memory_is_steepest_descent():
    g = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(lbfgs_direction(LBFGSMemory(), g), -g)


def test_lbfgs_single_pair_hand_example():
    mem = LBFGSMemory()
    mem.push(np.array([1.0, 0.0]), np.array([2.0, 0.0]))
    np.testing.assert_allclose(lbfgs_direction(mem, np.array([1.0, 1.0])), [-0.5, -0.5])


@given(arrays(float, 4, elements=finite), arrays(float, 4, elements=finite))
def test_lbfgs_secant_condition(s, y):
    mem = LBFGSMemory()
    if not mem.push(s, y) or float(s @ y) < 1e-6:
        return
    np.testing.assert_allclose(lbfgs_direction(mem, y), -s, rtol=1e-7, atol=1e-7 * np.abs(s).max())


def test_lbfgs_memory_rules():
    mem = LBFGSMemory(2)
    assert not mem.push(np.array([1.0, 0.0]), np.array([-1.0, 0.0]))
    assert mem.skipped == 1 and len(mem) == 0
    for k in range(4):
        mem.push(np.array([1.0, k]), np.array([1.0, 0.0]))
    assert len(mem) == 2
    assert mem.pairs[-1][0][1] == 3.0
    mem.reset()
    assert len(mem) == 0
    with pytest.raises(ValueError):
        lbfgs_direction(mem, np.array([np.nan, 0.0]))


def test_lbfgs_solves_quadratic_with_exact_line_search():
    A = np.diag([1.0, 10.0])
    x = np.array([1.0, 1.0])
    mem = LBFGSMemory(5)
    g = A @ x
    for _ in range(3):
        s = lbfgs_direction(mem, g)
        alpha = -float(g @ s) / float(s @ A @ s)
        x_new = x + alpha * s
        g_new = A @ x_new
        mem.push(x_new - x, g_new - g)
        x, g = x_new, g_new
        if np.linalg.norm(x) < 1e-12:
            break
    assert np.linalg.norm(x) < 1e-10


def test_bias_weight():
    assert bias_weight(0, 50) == 1.0
    assert bias_weight(25, 50) == 0.5
    assert bias_weight(60, 50) == 0.0
    assert bias_weight(3, 0) == 0.0


def test_bias_direction_examples():
    sl, sm = np.array([1.0, 0.0]), np.array([0.0, 2.0])
    np.testing.assert_allclose(bias_lambda_direction(sl, sm, 0.5), [0.5, 0.5])
    np.testing.assert_allclose(bias_lambda_direction(sl, sm, 1.0), [0.0, 1.0])
    np.testing.assert_array_equal(bias_lambda_direction(sl, sm, 0.0), sl)
    with pytest.raises(ValueError):
        bias_lambda_direction(sl, np.zeros(2), 0.5)


def test_choose_reg_factor(caplog):
    assert choose_reg_factor(np.array([3.0, 4.0]), np.array([0.0, 10.0]), 0.5) == pytest.approx(1.0)
    with caplog.at_level(logging.WARNING):
        assert choose_reg_factor(np.zeros(2), np.ones(2), 0.5) == 0.0
    assert "vanishes" in caplog.text


def _bowl(l, m):
    return float(l @ l + m @ m)


def test_armijo_backtracks_once():
    one = np.ones(1)
    r = armijo_search(_bowl, one, one, -2 * one, -2 * one, 2 * one, 2 * one, LineSearchParams())
    assert r.accepted and r.backtracks == 1
    assert (r.alpha_lambda, r.alpha_mu) == (0.5, 0.5)
    assert r.J_new == 0.0


def test_armijo_accepts_full_step_and_reports_failure():
    one = np.ones(1)
    r = armijo_search(_bowl, one, one, -one, -one, 2 * one, 2 * one, LineSearchParams(), J0=2.0)
    assert r.accepted and r.backtracks == 0 and r.alpha_lambda == 1.0
    bad = armijo_search(_bowl, one, one, one, one, 2 * one, 2 * one, LineSearchParams(max_backtracks=3))
    assert not bad.accepted
    assert (bad.alpha_lambda, bad.alpha_mu, bad.J_new) == (0.0, 0.0, 2.0)


def test_misfit_value_trapezoid():
    times = np.array([0.0, 1.0, 2.0])
    data = np.zeros((3, 2, 3))
    a = TraceRecord(np.arange(2), np.zeros((2, 3)), times, data)
    b = a.with_data(data.copy())
    b.data[:, 1, 2] = 1.0
    assert misfit_value(a, b) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        misfit_value(a, TraceRecord(np.arange(1), np.zeros((1, 3)), times, np.zeros((3, 1, 3))))


def test_stage_ratio_schedule():
    s = Stage(PULSES["p20"], 0.3, 0.5, 5, reg_ratio_end=0.3)
    assert [round(s.ratio_at(k), 12) for k in (0, 2, 4, 9)] == [0.5, 0.4, 0.3, 0.3]
    assert Stage(PULSES["p20"], 0.3, 0.5).ratio_at(7) == 0.5
    with pytest.raises(ValueError):
        Stage(PULSES["p20"], 0.3, 1.5)


def test_config_validation():
    stages = (Stage(PULSES["p30"], 0.3), Stage(PULSES["p20"], 0.3))
    with pytest.raises(ValueError):
        InversionConfig(stages)
    with pytest.raises(ValueError):
        InversionConfig(())
    cfg = InversionConfig((Stage(PULSES["p20"], 0.3),))
    frozen = single_parameter_mode(cfg, "lambda")
    assert frozen.freeze == "lambda" and not frozen.bias
    with pytest.raises(ValueError):
        single_parameter_mode(cfg, "both")
    assert cfg.inner_product == "mass"
    with pytest.raises(ValueError):
        InversionConfig(cfg.stages, inner_product="l1")


def test_rms_error():
    assert rms_error(np.array([1.0, 2.0, 5.0]), np.array([1.0, 0.0, 5.0]), np.array([0, 1])) == pytest.approx(np.sqrt(2))


def test_inverse_crime_start_stops_immediately(toy):
    cfg = InversionConfig((toy.stage,))
    state = invert(toy.problem, cfg, *toy.target)
    assert state.k == 0 and state.stop_reason == "tolerance"
    assert len(state.history) == 1 and state.history[0].J == 0.0


@pytest.mark.slow
def test_first_iteration_descends(toy, tmp_path):
    n = toy.mesh.n_nodes
    lam0 = np.full(n, 80e6)
    mu0 = np.full(n, 80e6)
    cfg = InversionConfig((Stage(toy.stage.pulse, toy.T, max_iter=2),), k_bias=2)
    seen = []
    state = invert(toy.problem, cfg, lam0, mu0, callback=lambda s, r: seen.append(r))
    assert len(state.history) == 2 == len(seen)
    first = state.history[0]
    assert first.armijo_lhs < first.armijo_rhs
    assert state.history[1].misfit < first.misfit
    assert first.W == 1.0 and state.history[1].W == 0.5
    assert set(state.first_directions) == {"s_lambda", "s_mu", "biased"}
    # the first trial step is scaled to a fixed fraction of the field magnitude
    nodes = toy.mesh.rd_nodes
    step = np.abs(state.first_directions["s_mu"][nodes]).max() * first.alpha_mu
    assert step <= 0.05 * 80e6 * (1 + 1e-12)
    export_history(state.history, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0].startswith("k,stage,J,misfit") and len(lines) == 3


@pytest.mark.slow
def test_frozen_field_is_untouched(toy):
    n = toy.mesh.n_nodes
    lam0 = np.full(n, 80e6)
    cfg = single_parameter_mode(InversionConfig((Stage(toy.stage.pulse, toy.T, max_iter=1),)), "lambda")
    state = invert(toy.problem, cfg, lam0, np.full(n, 80e6))
    np.testing.assert_array_equal(state.lam, lam0)
    assert np.abs(state.mu - 80e6).max() > 0
    assert state.history[0].R_lambda == 0.0
