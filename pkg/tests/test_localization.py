import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decolab.analysis import localization_fit
from decolab.localization import (LocalizationParams, PotentialSpec, TrajectoryRecord, WaveFunction,
                                  apply_jump, chaos_probe, default_grid, evolve_ensemble,
                                  evolve_no_jump, evolve_trajectory, heff_step, inverted_attractor_var_x,
                                  jump_rate, pointer_state)
from decolab.master import DensityMatrix, evolve_master, trace_distance
from decolab.numerics import Grid1D, RngStream

P10 = LocalizationParams(mass=1.0, lambda_loc=10.0)


def test_defaults_and_pointer_values():
    assert P10.t_loc == pytest.approx(math.sqrt(0.1))
    assert P10.dt == pytest.approx(P10.t_loc / 200)
    # frozen from the closed-form attractor at M = 1, Lambda = 10
    assert P10.pointer_var_x == pytest.approx(0.15811388300841897, rel=1e-12)
    assert P10.pointer_var_p == pytest.approx(3.1622776601683795, rel=1e-12)


def test_params_reject_bad_input():
    with pytest.raises(ValueError):
        LocalizationParams(mass=0.0)
    with pytest.raises(ValueError):
        LocalizationParams(lambda_loc=0.0)
    with pytest.raises(ValueError):
        PotentialSpec("quartic")


def test_pointer_width_scalings():
    base = LocalizationParams(mass=1.0, lambda_loc=1.0)
    heavy = base.replace(mass=4.0)
    strong = base.replace(lambda_loc=16.0)
    assert math.sqrt(base.pointer_var_x / heavy.pointer_var_x) == pytest.approx(math.sqrt(2), rel=1e-12)
    assert math.sqrt(base.pointer_var_x / strong.pointer_var_x) == pytest.approx(2.0, rel=1e-12)


def test_pointer_state_matches_closed_form_width():
    psi = pointer_state(P10)
    assert psi.norm == pytest.approx(1.0, abs=1e-10)
    assert psi.var_x() == pytest.approx(P10.pointer_var_x, rel=1e-6)
    assert psi.var_p() == pytest.approx(P10.pointer_var_p, rel=1e-4)


def test_pointer_state_is_stationary_without_jumps():
    psi = pointer_state(P10)
    for step in range(50):
        psi = heff_step(psi, P10, step)
    assert psi.norm == pytest.approx(1.0, abs=1e-10)
    assert psi.var_x() == pytest.approx(P10.pointer_var_x, rel=1e-4)


@given(st.integers(min_value=0, max_value=2**32))
@settings(max_examples=30, deadline=None)
def test_jump_is_orthogonal_and_normalized(seed):
    rng = np.random.default_rng(seed)
    g = Grid1D.centered(64, 0.1)
    amps = rng.normal(size=64) + 1j * rng.normal(size=64)
    psi = WaveFunction(amps / np.linalg.norm(amps), g)
    out = apply_jump(psi)
    assert abs(np.vdot(psi.amplitudes, out.amplitudes)) < 1e-10
    assert out.norm == pytest.approx(1.0, abs=1e-10)


def test_jump_rate_is_twice_lambda_variance():
    psi = pointer_state(P10)
    assert jump_rate(psi, P10) == pytest.approx(2 * 10.0 * psi.var_x())


@pytest.mark.parametrize("width,center,momentum", [(2.0, 0.0, 0.0), (3.0, 0.7, 1.5), (0.5, -0.4, -2.0)])
def test_attractor_from_smooth_packets(width, center, momentum):
    grid = default_grid(P10)
    wf = WaveFunction.gaussian(grid, center, width * math.sqrt(P10.pointer_var_x), momentum)
    _, rec = evolve_no_jump(wf, P10, 10 * P10.t_loc)
    assert rec.var_x[-1] == pytest.approx(P10.pointer_var_x, rel=0.05)
    fit = localization_fit(rec, P10)
    assert fit.r_squared >= 0.95


def test_ehrenfest_along_jump_free_segment():
    grid = default_grid(P10)
    wf = WaveFunction.gaussian(grid, 0.3, math.sqrt(P10.pointer_var_x), momentum=2.0)
    _, rec = evolve_no_jump(wf, P10, 2 * P10.t_loc)
    dxdt = np.gradient(rec.mean_x, rec.times)
    inner = slice(5, -5)
    rel = np.abs(dxdt[inner] - rec.mean_p[inner] / P10.mass) / np.abs(rec.mean_p[inner])
    assert rel.max() <= 1e-3


def test_trajectory_is_reproducible_and_normalized():
    psi = pointer_state(P10)
    f1, r1 = evolve_trajectory(psi, P10, 5 * P10.t_loc, RngStream(3))
    f2, r2 = evolve_trajectory(psi, P10, 5 * P10.t_loc, RngStream(3))
    assert np.array_equal(r1.var_x, r2.var_x) and np.array_equal(r1.jumped, r2.jumped)
    assert f1.norm == pytest.approx(1.0, abs=1e-10)
    assert r1.n_jumps > 0


def test_ensemble_rows_match_single_trajectories():
    psi = pointer_state(P10)
    ens = evolve_ensemble(psi, P10, 2 * P10.t_loc, 3, seed=11, chunk=2)
    _, solo = evolve_trajectory(psi, P10, 2 * P10.t_loc, RngStream(11, 2))
    assert np.array_equal(ens.records[2].mean_p, solo.mean_p)


def test_snapshots_land_at_requested_times():
    psi = pointer_state(P10)
    _, rec = evolve_no_jump(apply_jump(psi), P10, P10.t_loc, snapshot_times=[0.0, 0.5 * P10.t_loc])
    assert [t for t, _ in rec.snapshots] == pytest.approx([0.0, 0.5 * P10.t_loc], abs=P10.dt)


def test_record_csv_and_json_roundtrip(tmp_path):
    _, rec = evolve_trajectory(pointer_state(P10), P10, 3 * P10.t_loc, RngStream(4))
    rec.to_csv(tmp_path / "r.csv")
    back = TrajectoryRecord.from_csv(tmp_path / "r.csv")
    assert np.array_equal(back.var_p, rec.var_p) and np.array_equal(back.jumped, rec.jumped)
    rec.to_json(tmp_path / "r.json")
    again = TrajectoryRecord.from_json(tmp_path / "r.json")
    assert np.array_equal(again.jumped, rec.jumped)
    header = (tmp_path / "r.csv").read_text().splitlines()[0]
    assert header == "t,mean_x,mean_p,var_x,var_p,jumped"


def test_moving_packet_survives_recentering():
    grid = default_grid(P10)
    wf = WaveFunction.gaussian(grid, 0.0, math.sqrt(P10.pointer_var_x), momentum=30.0)
    final, rec = evolve_no_jump(wf, P10, 20 * P10.t_loc)
    travelled = rec.mean_x[-1] - rec.mean_x[0]
    assert travelled > grid.length
    assert travelled == pytest.approx(rec.mean_p[0] * rec.times[-1], rel=0.02)


@pytest.mark.parametrize("mult,expected", [(0.0, True), (0.1, True)])
def test_chaos_probe_clear_localizing_cases(mult, expected):
    lyap = math.sqrt(mult * 2 * P10.hbar * P10.lambda_loc / P10.mass)
    p = P10.replace(potential=PotentialSpec.inverted(lyap))
    res = chaos_probe(p)
    assert res.localized is expected
    assert res.attractor_spread == pytest.approx(math.sqrt(inverted_attractor_var_x(p)), rel=0.05)


def test_chaos_probe_needs_inverted_potential():
    with pytest.raises(ValueError):
        chaos_probe(P10)


@pytest.mark.slow
def test_ensemble_average_matches_master_equation():
    p = P10
    grid = Grid1D.centered(128, math.sqrt(p.pointer_var_x) / 6)
    psi0 = WaveFunction.gaussian(grid, 0.0, 1.5 * math.sqrt(p.pointer_var_x))
    n = 2000
    ens = evolve_ensemble(psi0, p, 2 * p.t_loc, n, seed=21)
    rho_traj = DensityMatrix(ens.density_matrix(grid))
    rho_master, _ = evolve_master(DensityMatrix.from_pure(psi0.amplitudes, grid), p, 2 * p.t_loc)
    assert trace_distance(rho_traj, rho_master) <= 5 / math.sqrt(n)
