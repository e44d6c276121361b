import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decolab.collapse import (CollapseError, WeightState, analytic_weights, collapse_ensemble, collapse_jump,
                              mean_jump_formula, simulate_collapse, weight_drift_step)
from decolab.numerics import RngStream


def test_weight_state_validation():
    with pytest.raises(ValueError):
        WeightState([0.5, 0.6], [0, 1])
    with pytest.raises(ValueError):
        WeightState([1.2, -0.2], [0, 1])
    with pytest.raises(ValueError):
        WeightState([1.0], [0])
    s = WeightState.pair(0.3, separation=2.0, lambda_loc=0.5)
    assert s.rate_scale == pytest.approx(2.0)
    assert s.jump_rate() == pytest.approx(2 * 2.0 * 0.3 * 0.7)


@pytest.mark.parametrize("w1", [0.5, 1.0, 0.0])
def test_drift_fixed_points(w1):
    s = WeightState.pair(w1)
    assert weight_drift_step(s, 0.1).weights[0] == w1


def test_drift_matches_closed_form():
    s = WeightState.pair(0.6)
    dt = 1e-3
    for _ in range(1000):
        s = weight_drift_step(s, dt)
    assert s.weights[0] == pytest.approx(analytic_weights(0.6, 1.0, 1.0), abs=1e-8)
    assert abs(s.weights.sum() - 1) <= 1e-12


def test_drift_matches_closed_form_over_ten_time_units():
    s = WeightState.pair(0.52, lambda_loc=0.2)
    worst = 0.0
    for k in range(1, 10_001):
        s = weight_drift_step(s, 1e-3)
        if k % 1000 == 0:
            worst = max(worst, abs(s.weights[0] - analytic_weights(0.52, k * 1e-3, 0.2)))
    assert worst <= 1e-8


def test_analytic_weights_limits():
    assert analytic_weights(0.5, 3.0, 1.0) == 0.5
    assert analytic_weights(0.7, 0.0, 1.0) == pytest.approx(0.7, abs=1e-15)
    assert analytic_weights(0.7, 1e4, 1.0) == 1.0
    assert analytic_weights(0.3, 1e4, 1.0) == 0.0
    assert analytic_weights(0.0, 1.0, 1.0) == 0.0 and analytic_weights(1.0, 1.0, 1.0) == 1.0


def test_jump_rules():
    s = WeightState.pair(0.3)
    once = collapse_jump(s)
    assert np.allclose(once.weights, [0.7, 0.3])
    assert np.allclose(collapse_jump(once).weights, s.weights)
    three = WeightState(np.full(3, 1 / 3), [-1.0, 0.0, 1.0])
    assert np.allclose(collapse_jump(three).weights, [0.5, 0.0, 0.5])
    with pytest.raises(CollapseError):
        collapse_jump(WeightState([0.5, 0.5], [1.0, 1.0]))


@given(st.floats(min_value=0.01, max_value=0.99))
@settings(max_examples=40, deadline=None)
def test_jump_preserves_weight_sum(w1):
    s = collapse_jump(WeightState.pair(w1))
    assert abs(s.weights.sum() - 1) <= 1e-12


def test_mean_jump_formula():
    assert mean_jump_formula(0.75) == pytest.approx(0.5 * math.log(2))
    assert mean_jump_formula(0.25) == pytest.approx(0.5 * math.log(2))
    assert mean_jump_formula(0.5) == math.inf


def test_settled_state_has_no_jumps():
    res = simulate_collapse(WeightState.pair(1.0), None, RngStream(0))
    assert res.winner == 0 and res.n_jumps == 0


def test_single_run_is_reproducible(tmp_path):
    a = simulate_collapse(WeightState.pair(0.55), None, RngStream(4, 1))
    b = simulate_collapse(WeightState.pair(0.55), None, RngStream(4, 1))
    assert (a.winner, a.n_jumps, a.t_final) == (b.winner, b.n_jumps, b.t_final)
    assert max(a.path.w1[-1], 1 - a.path.w1[-1]) > 1 - 1e-6
    assert sum(a.path.jumped) == a.n_jumps
    a.path.to_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "t,w1,jumped" and len(lines) == len(a.path.times) + 1


def test_ensemble_does_not_depend_on_chunking():
    s0 = WeightState.pair(0.6)
    a = collapse_ensemble(s0, 500, seed=5, chunk=64)
    b = collapse_ensemble(s0, 500, seed=5, chunk=500)
    assert np.array_equal(a.winners, b.winners) and np.array_equal(a.n_jumps, b.n_jumps)


def test_ensemble_row_matches_single_run():
    s0 = WeightState.pair(0.6)
    ens = collapse_ensemble(s0, 10, seed=6)
    solo = simulate_collapse(s0, None, RngStream(6, 7))
    assert ens.winners[7] == solo.winner and ens.n_jumps[7] == solo.n_jumps


def test_finishing_time_is_unrelated_to_jump_count():
    ens = collapse_ensemble(WeightState.pair(0.6), 10_000, seed=7)
    assert abs(ens.jump_time_correlation()) <= 0.1


@pytest.mark.parametrize("w1", [0.1, 0.9])
def test_born_frequencies(w1):
    ens = collapse_ensemble(WeightState.pair(w1), 10_000, seed=int(w1 * 100))
    freq = ens.winner_frequencies()
    assert abs(freq[0] - w1) <= 3 * math.sqrt(w1 * (1 - w1) / 10_000)
