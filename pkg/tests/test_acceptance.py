"""Acceptance suite: one test per numbered criterion, each printing a
PASS/FAIL line (collected again in the pytest terminal summary).

Run with ``pytest tests/test_acceptance.py -v``; the lines also appear
with ``-s``. Tolerances are fixed here and never adjusted per run.
"""

import filecmp
import itertools
import json
import math
import time

import numpy as np
import pytest
from scipy.stats import unitary_group

from decolab import analysis, cli, collapse, frames, scenarios, unravel
from decolab.localization import (LocalizationParams, PotentialSpec, WaveFunction, chaos_probe,
                                  default_grid, evolve_ensemble, evolve_no_jump, pointer_state)
from decolab.master import DensityMatrix, evolve_master
from decolab.numerics import Grid1D

N_RUNS = 10_000


def _winner2_frequency(w0, seed):
    # w0 is the initial weight of packet 2
    ens = collapse.collapse_ensemble(collapse.WeightState.pair(1.0 - w0), N_RUNS, seed)
    return ens.winner_frequencies()[1]


def test_01_born_rule(report):
    start = time.perf_counter()
    rows = []
    for k, w0 in enumerate((0.7, 0.1, 0.3, 0.5, 0.9)):
        freq = _winner2_frequency(w0, seed=100 + k)
        tol = 3.0 * math.sqrt(w0 * (1 - w0) / N_RUNS)
        rows.append((w0, freq, tol, abs(freq - w0) <= tol))
    elapsed = time.perf_counter() - start
    ok = all(r[3] for r in rows) and elapsed <= 60.0
    detail = ", ".join(f"w0={w:.1f}: {f:.4f} (tol {t:.4f})" for w, f, t, _ in rows)
    report(1, "Born rule", ok, f"{detail}; {elapsed:.1f}s")
    assert ok


def test_02_mean_jump_count(report):
    formula = collapse.mean_jump_formula(0.75)
    ens = collapse.collapse_ensemble(collapse.WeightState.pair(0.75), N_RUNS, seed=200)
    mc = ens.mean_jumps()
    target = 0.5 * math.log(2.0)
    ok = abs(formula - target) <= 1e-12 and abs(mc - formula) <= 0.02
    report(2, "mean jump count", ok, f"formula {formula:.4f}, Monte Carlo {mc:.4f}, target {target:.4f} +- 0.02")
    assert ok


def test_03_martingale(report):
    s0 = collapse.WeightState.pair(0.65)
    horizon = 5.0 / s0.rate_scale
    cps = np.linspace(horizon / 10, horizon, 10)
    ens = collapse.collapse_ensemble(s0, N_RUNS, seed=300, checkpoints=cps)
    table = ens.martingale_table()
    devs = [abs(r["mean_w1"] - 0.65) / r["sem"] for r in table]
    ok = len(table) == 10 and max(devs) <= 3.0
    report(3, "martingale", ok, f"10 checkpoints, worst deviation {max(devs):.2f} sigma (limit 3)")
    assert ok


def test_04_unravelling_matches_master(report):
    rows = []
    for seed in range(5):
        model = unravel.LindbladModel.random(3, np.random.default_rng(400 + seed), rate_scale=2.0)
        psi0 = np.zeros(3, dtype=complex)
        psi0[0] = 1.0
        start = time.perf_counter()
        res = unravel.ensemble_vs_master(model, psi0, t_final=1.0, dt=0.01, n_traj=5000, seed=seed)
        rows.append((res["trace_distance"], res["bound"], time.perf_counter() - start))
    ok = all(d <= b and t <= 120.0 for d, b, t in rows)
    detail = ", ".join(f"{d:.4f}" for d, _, _ in rows)
    report(4, "unravelling vs master", ok,
           f"trace distances [{detail}] <= {rows[0][1]:.4f}; slowest model {max(t for *_, t in rows):.1f}s")
    assert ok


def test_05_unravelling_defect_order(report):
    rng = np.random.default_rng(500)
    ratios = []
    for _ in range(10):
        dim = int(rng.integers(2, 6))
        model = unravel.LindbladModel.random(dim, rng, rate_scale=1.0)
        psi = rng.normal(size=dim) + 1j * rng.normal(size=dim)
        psi /= np.linalg.norm(psi)
        d1 = unravel.verify_unravelling(model, psi, 0.01)
        d2 = unravel.verify_unravelling(model, psi, 0.005)
        ratios.append(d1 / d2)
    ok = min(ratios) >= 3.5
    report(5, "unravelling defect order", ok, f"min halving ratio {min(ratios):.3f} over 10 models (need >= 3.5)")
    assert ok


def test_06_jump_operator_invariants(report):
    rng = np.random.default_rng(600)
    worst = 0.0
    for k in range(100):
        dim = 2 + k % 7
        model = unravel.LindbladModel.random(dim, rng, rate_scale=float(rng.uniform(0.1, 3.0)))
        psi = rng.normal(size=dim) + 1j * rng.normal(size=dim)
        psi /= np.linalg.norm(psi)
        dec = unravel.adapt_and_decompose(model, psi)
        J = np.array(dec.jump_ops)
        means = np.einsum("i,jik,k->j", psi.conj(), J, psi)
        vecs = J @ psi
        gram = vecs.conj() @ vecs.T
        worst = max(worst, np.abs(means).max(), np.abs(gram - np.diag(dec.rates)).max())
    ok = worst <= 1e-9
    report(6, "jump operator invariants", ok, f"max deviation {worst:.2e} over 100 pairs, dims 2-8")
    assert ok


def test_07_localization_attractor(report):
    start = time.perf_counter()
    p = LocalizationParams(mass=1.0, lambda_loc=10.0)
    p = p.replace(dt=p.t_loc / 200)
    grid = default_grid(p)
    wide = WaveFunction.gaussian(grid, 0.0, 3.0 * math.sqrt(p.pointer_var_x))
    _, smooth = evolve_no_jump(wide, p, 10 * p.t_loc)
    converged = abs(smooth.var_x[-1] / p.pointer_var_x - 1.0)
    fit = analysis.localization_fit(smooth, p)
    ratio = fit.t_loc_measured / p.t_loc
    ens = evolve_ensemble(pointer_state(p, grid), p, 40 * p.t_loc, 32, seed=700)
    gaps = analysis.gap_recovery(ens.records, p)
    elapsed = time.perf_counter() - start
    ok = converged <= 0.05 and 0.5 <= ratio <= 2.0 and gaps.n_gaps > 0 and gaps.fraction >= 0.8 and elapsed <= 60
    report(7, "localization attractor", ok,
           f"final var_x off by {converged:.2e}; fitted time {ratio:.2f} T_loc; "
           f"gaps recovered {gaps.n_recovered}/{gaps.n_gaps}; {elapsed:.1f}s")
    assert ok


def test_08_decoherence_rate_law(report):
    lam = 1.0
    p = LocalizationParams(mass=1e12, lambda_loc=lam)
    grid = Grid1D.centered(32, 0.1)
    psi = np.exp(-grid.x**2 / 4.0)
    psi /= np.linalg.norm(psi)
    rho = DensityMatrix.from_pure(psi, grid)
    times = np.linspace(0.1, 1.0, 10)
    _, saved = evolve_master(rho, p, 1.0, checkpoints=list(times))
    i0 = 16
    errors = []
    for sep in (2, 5, 9):
        j = i0 + sep
        vals = [abs(s.entries[i0, j]) for _, s in saved]
        ts = [t for t, _ in saved]
        rate, _ = analysis.decay_rate_fit(ts, vals)
        expected = lam * (grid.x[j] - grid.x[i0]) ** 2
        errors.append(abs(rate / expected - 1.0))
    ok = max(errors) <= 0.02
    report(8, "decoherence rate law", ok, f"relative rate errors {[f'{e:.1e}' for e in errors]} (limit 2%)")
    assert ok


def test_09_langevin_scaling(report):
    start = time.perf_counter()
    fits = {}
    for lam in (10.0, 20.0):
        p = LocalizationParams(mass=1.0, lambda_loc=lam)
        p = p.replace(dt=p.t_loc / 200)
        ens = evolve_ensemble(pointer_state(p, default_grid(p)), p, 2.0, 500, seed=900)
        fits[lam] = analysis.langevin_fit(ens.records)
    elapsed = time.perf_counter() - start
    f10 = fits[10.0]
    factor = f10.sigma_p / math.sqrt(10.0)
    doubling = fits[20.0].sigma_p ** 2 / f10.sigma_p ** 2
    ok = (min(f.r_squared for f in fits.values()) >= 0.9 and 1 / 3 <= factor <= 3
          and abs(doubling - 2.0) <= 0.6 and elapsed <= 300)
    report(9, "Langevin scaling", ok,
           f"sigma_p {f10.sigma_p:.3f} = {factor:.2f} x sqrt(Lambda); R^2 "
           f"{fits[10.0].r_squared:.3f}/{fits[20.0].r_squared:.3f}; sigma_p^2 ratio {doubling:.3f}; {elapsed:.0f}s")
    assert ok


def test_10_chaos_criterion(report):
    p0 = LocalizationParams(mass=1.0, lambda_loc=10.0)
    scale = 2.0 * p0.hbar * p0.lambda_loc / p0.mass
    rows = []
    ok = True
    for mult in (0.1, 0.5, 2.0, 10.0):
        lyap = math.sqrt(mult * scale)
        p = p0.replace(potential=PotentialSpec.inverted(lyap))
        p = p.replace(dt=p.t_loc / 200)
        res = chaos_probe(p)
        expected = mult < 1.0
        threshold = 10.0 * res.reference_spread
        near = threshold / 2 <= res.attractor_spread <= 2 * threshold
        fine = res.localized == expected or (mult in (0.5, 2.0) and near)
        ok &= fine
        rows.append(f"x{mult:g}: localized={res.localized} spread/ref={res.spread_ratio:.2f}"
                    f"{'' if fine else ' MISMATCH'}")
    report(10, "chaos criterion", ok, "; ".join(rows))
    assert ok


def test_11_scale_tables(report):
    rows = [r.evaluate() for r in analysis.SCALE_TABLE]
    ok = all(all(r["within_decade"].values()) for r in rows)
    hyperion = rows[-1]["lyapunov_t_loc"]
    ok &= analysis.within_decade(hyperion, 0.1)
    report(11, "scale tables", ok,
           f"{len(rows)} rows within one decade: {[r['name'] for r in rows]}; Hyperion lambda*T_loc {hyperion:.3f}")
    assert ok


def test_12_epr(report):
    rep = scenarios.run_epr()
    joint = rep.values["joint_probabilities"]
    probs_ok = all(abs(v - 0.5) <= 1e-9 for v in joint.values()) and len(joint) == 2
    decoherent = all(frames.decoherence_check(t)[0] for t in rep.trees.values())
    consistent = rep.values["consistency"]["consistent"]
    ok = probs_ok and decoherent and len(rep.trees) == 3 and consistent
    report(12, "EPR", ok, f"joint {joint}; three frames decoherent={decoherent}; consistent={consistent}")
    assert ok


@pytest.mark.parametrize("phi", [math.pi / 4, 0.3])
def test_13_wigner(report, phi):
    rep = scenarios.run_wigner(phi)
    a, b = rep.params["a"], rep.params["b"]
    f = rep.values["F_step1"]
    w = rep.values["W_step2"]
    ok = abs(f.get("F+", 0) - math.cos(phi) ** 2) <= 1e-9 and abs(f.get("F-", 0) - math.sin(phi) ** 2) <= 1e-9
    ok &= abs(w.get("W+", 0) - 2 * a * a) <= 1e-9 and abs(w.get("W-", 0) - 2 * b * b) <= 1e-9
    if abs(phi - math.pi / 4) < 1e-12:
        ok &= abs(w.get("W+", 0) - 1.0) <= 1e-9 and w.get("W-", 0.0) <= 1e-9
    recoherent = not frames.decoherence_check(rep.trees["F+W"])[0]
    consistent = rep.values["consistency"]["consistent"]
    ok &= recoherent and not consistent
    report(13, f"Wigner phi={phi:.4f}", ok, f"F {f}; W {w}; joint recoherent={recoherent}; consistent={consistent}")
    assert ok


def test_14_chsh(report):
    value, violated, rep = scenarios.run_chsh(math.pi / 8)
    surrogate = rep.values["surrogate"]
    ok = abs(value - 2 * math.sqrt(2)) <= 1e-9 and abs(surrogate) <= 2.0 and violated
    report(14, "CHSH", ok, f"value {value:.12f} (2*sqrt2 = {2 * math.sqrt(2):.12f}); surrogate {surrogate:.3f}")
    assert ok


def test_15_frauchiger_renner(report):
    rep = scenarios.run_frauchiger_renner()
    v = rep.values
    ok = abs(v["p(F1-,F2+)"]) <= 1e-10 and abs(v["p(W1-,W2-)"] - 1 / 12) <= 1e-10
    ok &= abs(v["p(F1-|W2-)"] - 1) <= 1e-10 and abs(v["p(F2+|W1-)"] - 1) <= 1e-10
    ok &= all(abs(x - 1 / 3) <= 1e-10 for x in v["t1_branches"]) and len(v["t1_branches"]) == 3
    ok &= v["t2_max_violation"] > 1e-8 and not v["consistency"]["consistent"]
    report(15, "Frauchiger-Renner", ok,
           f"p(F1-,F2+)={v['p(F1-,F2+)']:.1e}, p(W1-,W2-)={v['p(W1-,W2-)']:.12f}, implications "
           f"{v['p(F1-|W2-)']:.3f}/{v['p(F2+|W1-)']:.3f}, t1 {[round(x, 6) for x in v['t1_branches']]}, "
           f"joint recoherent")
    assert ok


# -- criterion 16 -----------------------------------------------------------

def _random_script(rng, decoherent):
    """Three parties S (qubit), A (qutrit device), B (qutrit); frame S+A.

    Decoherent scripts measure S in a random basis twice, recording into A
    and then B. The others apply random unitaries across all parties.
    """
    layout = frames.SubsystemLayout(("S", "A", "B"), (2, 3, 3))
    amps = rng.normal(size=2) + 1j * rng.normal(size=2)
    initial = frames.TensorState.from_terms(
        layout, [(amps[0], {"S": 0, "A": 0, "B": 0}), (amps[1], {"S": 1, "A": 0, "B": 0})], normalize=True)
    if decoherent:
        u = unitary_group.rvs(2, random_state=rng)
        events = [
            frames.Event([frames.measurement_operation(layout, "S", u, "A")]),
            frames.Event([frames.Operation(("S",), unitary_group.rvs(2, random_state=rng))]),
            frames.Event([frames.measurement_operation(layout, "S", u, "B")]),
        ]
        frame = ("S", "B")
    else:
        events = [frames.Event([frames.Operation(("S", "A", "B"), unitary_group.rvs(18, random_state=rng))])
                  for _ in range(2)]
        frame = ("S",)
    return frames.EventScript(layout, events, initial=initial), frame


def _appendix_checks(tree, rng, generalized):
    leaves = tree.leaves()
    diag = max(abs(frames.decoherence_functional(tree, l.label, l.label) - l.prob) for l in leaves)
    kraus = 0.0
    for step in range(1, tree.script.n_steps + 1):
        if len({tuple(f) for f in tree.frames_per_step}) > 1:
            break
        for parent in tree.nodes_at(step - 1):
            kraus = max(kraus, frames.krauss_operators(tree, step, parent.label).completeness_defect())
    gen = 0.0
    if generalized:
        dim = tree.layout.dim_of(tree.frame)
        for _ in range(5):
            obs = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
            for a, b in itertools.product(leaves, leaves):
                val = frames.decoherence_functional(tree, a.label, b.label, obs)
                ref = a.prob * np.vdot(a.state_S, obs @ a.state_S) if a.label == b.label else 0.0
                gen = max(gen, abs(val - ref))
    return diag, kraus, gen


def test_16_histories_and_kraus(report):
    rng = np.random.default_rng(1600)
    worst = {"diag": 0.0, "kraus": 0.0, "gen": 0.0}
    n_trees = n_gen = 0
    specs = [scenarios.epr_spec(), scenarios.wigner_spec(math.pi / 4), scenarios.wigner_spec(0.3),
             scenarios.chsh_spec(math.pi / 8, 0.0), scenarios.fr_spec()]
    trees = [frames.build_branch_tree(None, s.script, fr) for s in specs for fr in s.frames.values()]
    for k in range(20):
        script, frame = _random_script(rng, decoherent=k % 2 == 0)
        trees.append(frames.build_branch_tree(None, script, frame))
    for tree in trees:
        decoherent = frames.decoherence_check(tree)[0]
        small = len(tree.leaves()) <= 64
        d, kr, g = _appendix_checks(tree, rng, decoherent and small)
        worst["diag"] = max(worst["diag"], d)
        worst["kraus"] = max(worst["kraus"], kr)
        worst["gen"] = max(worst["gen"], g)
        n_trees += 1
        n_gen += decoherent and small
    ok = worst["diag"] <= 1e-9 and worst["kraus"] <= 1e-9 and worst["gen"] <= 1e-8 and n_gen >= 10
    report(16, "decoherence functional and Kraus sets", ok,
           f"{n_trees} trees (20 random); diagonal {worst['diag']:.1e}, completeness {worst['kraus']:.1e}, "
           f"generalized condition {worst['gen']:.1e} on {n_gen} decoherent trees")
    assert ok


def test_17_determinism(report, tmp_path):
    names = cli.bundled_configs()
    differing = []
    for name in names:
        command = cli.load_config(name)["command"]
        for run in ("a", "b"):
            assert cli.run([command, "--config", name, "--out", str(tmp_path / run / name)]) == 0
        cmp = filecmp.dircmp(tmp_path / "a" / name, tmp_path / "b" / name)
        _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a" / name, tmp_path / "b" / name,
                                               cmp.common_files, shallow=False)
        if mismatch or errors or cmp.left_only or cmp.right_only:
            differing.append(name)
    ok = not differing and len(names) >= 8
    report(17, "determinism", ok, f"{len(names)} bundled configs rerun byte-identical"
           + (f"; differing: {differing}" if differing else ""))
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
