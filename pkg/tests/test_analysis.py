import math

import numpy as np
import pytest

from decolab.analysis import (SCALE_TABLE, AnalysisError, ScaleInput, chaos_margin, gap_recovery,
                              langevin_fit, localization_fit, pointer_scales, within_decade)
from decolab.localization import LocalizationParams, TrajectoryRecord

P = LocalizationParams(mass=1.0, lambda_loc=10.0)


def _record(t, var_x, var_p=None, jumped=None, mean_p=None):
    n = len(t)
    return TrajectoryRecord(
        np.asarray(t, dtype=float), np.zeros(n),
        np.zeros(n) if mean_p is None else np.asarray(mean_p, dtype=float),
        np.asarray(var_x, dtype=float),
        np.full(n, P.pointer_var_p) if var_p is None else np.asarray(var_p, dtype=float),
        np.zeros(n, dtype=bool) if jumped is None else np.asarray(jumped, dtype=bool),
    )


def test_unit_scales():
    sc = pointer_scales(ScaleInput(1.0, 1.0, 1.0))
    assert (sc.dx, sc.dp, sc.t_loc) == (1.0, 1.0, 1.0)
    with pytest.raises(AnalysisError):
        ScaleInput(-1.0, 1.0)


@pytest.mark.parametrize("row", SCALE_TABLE, ids=lambda r: r.name)
def test_table_rows_within_a_decade(row):
    out = row.evaluate()
    assert all(out["within_decade"].values())
    assert 0.1 <= out["dx_dp_over_hbar"] <= 10


def test_chaos_margin():
    ratio, ok = chaos_margin(ScaleInput(1.0, 1.0, 1.0), 0.5)
    assert ratio == 0.5 and ok
    assert not chaos_margin(ScaleInput(1.0, 1.0, 1.0), 2.0)[1]
    with pytest.raises(AnalysisError):
        chaos_margin(ScaleInput(1.0, 1.0, 1.0), -1.0)
    assert within_decade(5.0, 1.0) and not within_decade(11.0, 1.0)


def test_langevin_fit_zero_noise_and_minimum_size():
    t = np.linspace(0, 1, 11)
    quiet = [_record(t, np.full(11, P.pointer_var_x)) for _ in range(500)]
    assert langevin_fit(quiet).sigma_p == 0.0
    with pytest.raises(AnalysisError):
        langevin_fit(quiet[:499])


def test_langevin_fit_recovers_diffusion():
    rng = np.random.default_rng(0)
    t = np.linspace(0, 2, 41)
    sigma = 1.7
    steps = rng.normal(scale=sigma * math.sqrt(t[1]), size=(4000, 40))
    paths = np.concatenate([np.zeros((4000, 1)), np.cumsum(steps, axis=1)], axis=1)
    fit = langevin_fit([_record(t, np.ones(41), mean_p=p) for p in paths])
    assert fit.sigma_p == pytest.approx(sigma, rel=0.05)
    assert fit.r_squared > 0.95


def test_localization_fit_recovers_time_constant():
    t = np.linspace(0, 10, 400)
    rec = _record(t, P.pointer_var_x * (1 + 2 * np.exp(-t / 2.0)))
    fit = localization_fit(rec, P)
    assert fit.t_loc_measured == pytest.approx(2.0, rel=0.01)
    assert fit.r_squared > 0.999


def test_localization_fit_needs_a_window():
    t = np.linspace(0, 1, 10)
    jumped = np.zeros(10, dtype=bool)
    jumped[1] = True
    with pytest.raises(AnalysisError):
        localization_fit(_record(t, np.full(10, 2 * P.pointer_var_x), jumped=jumped), P)
    with pytest.raises(AnalysisError):
        localization_fit(_record(t, np.full(10, P.pointer_var_x)), P)


def test_gap_recovery_counts_long_gaps_only():
    t = np.arange(0, 20, 0.01) * P.t_loc
    n = len(t)
    jumped = np.zeros(n, dtype=bool)
    jumped[[0, 100, 600, 1200]] = True
    var_x = np.full(n, P.pointer_var_x)
    var_x[1199] = 1.2 * P.pointer_var_x
    stats = gap_recovery([_record(t, var_x, jumped=jumped)], P)
    assert (stats.n_gaps, stats.n_recovered) == (2, 1)
    assert stats.fraction == 0.5
    assert math.isnan(gap_recovery([], P).fraction)
