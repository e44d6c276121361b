"""Command-line entry point.

    decolab <localize|collapse|unravel|frames|scales> --config <path|name>
            [--seed N] [--out DIR] [--scenario NAME]

Each run reads one JSON document. Unknown keys are rejected. Outputs are
CSV and JSON files in ``--out``; every output depends only on the config
and the seed. Exit status is 0 when all requested checks pass, 1 when a
check fails (``failure.json`` describes it) and 2 on bad input.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import analysis, collapse, frames, localization, scenarios, unravel
from .master import trace_distance
from .numerics import RngStream

DEFAULT_SEED = 0
COMMANDS = ("localize", "collapse", "unravel", "frames", "scales")
FORMATS = ("csv", "json")


class ConfigError(ValueError):
    """Malformed or unknown configuration."""


def bundled_configs() -> list[str]:
    root = resources.files("decolab") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_config(ref: str) -> dict:
    """Read a config from a path, or a bundled config by name."""
    path = Path(ref)
    if path.is_file():
        text = path.read_text(encoding="utf-8")
    else:
        res = resources.files("decolab") / "configs" / f"{ref}.json"
        if not res.is_file():
            raise ConfigError(f"no config file {ref!r} and no bundled config of that name "
                              f"(bundled: {', '.join(bundled_configs())})")
        text = res.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return doc


def _section(doc, defaults: dict, where: str) -> dict:
    doc = {} if doc is None else doc
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be an object")
    extra = set(doc) - set(defaults)
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")
    return {**defaults, **doc}


COMMON = {"command": None, "seed": DEFAULT_SEED, "workers": None, "formats": list(FORMATS), "checks": []}


def _common(cfg: dict, command: str, known: tuple) -> None:
    if cfg["command"] not in (None, command):
        raise ConfigError(f"config is for {cfg['command']!r}, not {command!r}")
    bad = set(cfg["formats"]) - set(FORMATS)
    if bad:
        raise ConfigError(f"unknown formats {sorted(bad)}")
    bad = set(cfg["checks"]) - set(known)
    if bad:
        raise ConfigError(f"unknown checks {sorted(bad)}; available: {list(known)}")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(_plain(doc), indent=2) + "\n", encoding="utf-8")


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _check(name: str, passed: bool, **detail) -> dict:
    return {"name": name, "passed": bool(passed), **detail}


# ------------------------------------------------------------ localize

LOCALIZE = {
    **COMMON,
    "mass": 1.0, "lambda_loc": 10.0, "hbar": 1.0, "dt": None, "steps_per_tloc": 200,
    "potential": None, "grid": None, "initial": None,
    "t_final_tloc": 20.0, "n_traj": 1, "jumps": True, "snapshots_tloc": [],
}
POTENTIAL = {"kind": "free", "omega": 0.0, "lyapunov": 0.0, "center": 0.0}
GRID = {"n_points": 256, "cells_per_width": 8.0}
INITIAL = {"kind": "pointer", "center": 0.0, "width_factor": 1.0, "momentum": 0.0, "skew": 0.0,
           "apply_jump": False}
LOCALIZE_CHECKS = ("attractor", "t_loc_fit")


def _localization_setup(cfg):
    pot = _section(cfg["potential"], POTENTIAL, "potential")
    kind = pot["kind"]
    if kind == "free":
        potential = localization.PotentialSpec.free()
    elif kind == "harmonic":
        potential = localization.PotentialSpec.harmonic(pot["omega"], pot["center"])
    elif kind == "inverted":
        potential = localization.PotentialSpec.inverted(pot["lyapunov"], pot["center"])
    else:
        raise ConfigError(f"unknown potential kind {kind!r}")
    base = localization.LocalizationParams(mass=cfg["mass"], lambda_loc=cfg["lambda_loc"],
                                           potential=potential, hbar=cfg["hbar"])
    dt = cfg["dt"] if cfg["dt"] is not None else base.t_loc / cfg["steps_per_tloc"]
    params = base.replace(dt=dt)
    g = _section(cfg["grid"], GRID, "grid")
    grid = localization.default_grid(params, g["n_points"], g["cells_per_width"])
    ini = _section(cfg["initial"], INITIAL, "initial")
    if ini["kind"] == "pointer":
        psi0 = localization.pointer_state(params, grid, ini["center"])
    elif ini["kind"] == "gaussian":
        psi0 = localization.WaveFunction.gaussian(
            grid, ini["center"], ini["width_factor"] * math.sqrt(params.pointer_var_x),
            ini["momentum"], params.hbar)
    else:
        raise ConfigError(f"unknown initial kind {ini['kind']!r}")
    if ini["skew"]:
        # tilt the packet by a factor (1 + skew * (x - c) / width) to break parity
        width = math.sqrt(psi0.var_x())
        tilt = 1.0 + ini["skew"] * (grid.x - psi0.mean_x()) / width
        psi0 = localization.WaveFunction(psi0.amplitudes * tilt, grid, psi0.momentum_offset).normalized()
    if ini["apply_jump"]:
        psi0 = localization.apply_jump(psi0)
    return params, psi0


def _snapshot_rows(wf: localization.WaveFunction, hbar: float):
    amps = wf.physical_amplitudes(hbar)
    return [(x, a.real, a.imag, abs(a) ** 2) for x, a in zip(wf.grid.x, amps)]


def cmd_localize(cfg: dict, out: Path) -> dict:
    cfg = _section(cfg, LOCALIZE, "localize config")
    _common(cfg, "localize", LOCALIZE_CHECKS)
    params, psi0 = _localization_setup(cfg)
    t_final = cfg["t_final_tloc"] * params.t_loc
    snaps = [s * params.t_loc for s in cfg["snapshots_tloc"]]
    n = int(cfg["n_traj"])
    if n < 1:
        raise ConfigError("n_traj must be at least 1")
    if not cfg["jumps"]:
        _, rec = localization.evolve_no_jump(psi0, params, t_final, snapshot_times=snaps)
        records = [rec]
    elif n == 1:
        _, rec = localization.evolve_trajectory(psi0, params, t_final, RngStream(cfg["seed"], 0), snaps)
        records = [rec]
    else:
        records = localization.evolve_ensemble(psi0, params, t_final, n, cfg["seed"], cfg["workers"],
                                               snapshot_times=snaps).records
    _, smooth = localization.evolve_no_jump(psi0, params, t_final)
    summary = {
        "command": "localize",
        "seed": cfg["seed"],
        "params": {"mass": params.mass, "lambda_loc": params.lambda_loc, "hbar": params.hbar,
                   "dt": params.dt, "t_loc": params.t_loc, "potential": params.potential.to_dict()},
        "pointer_var_x": params.pointer_var_x,
        "pointer_var_p": params.pointer_var_p,
        "n_traj": len(records),
        "n_jumps": [r.n_jumps for r in records],
        "final_var_x_no_jump": float(smooth.var_x[-1]),
    }
    if len(records) == 1:
        summary["jump_times"] = records[0].jump_times
    for key, rec in (("t_loc_fit_first_window", records[0]), ("t_loc_fit_no_jump", smooth)):
        try:
            summary[key] = analysis.localization_fit(rec, params).to_dict()
        except analysis.AnalysisError as exc:
            summary[key] = {"error": str(exc)}
    if len(records) >= analysis.MIN_LANGEVIN_TRAJ and params.potential.is_zero:
        summary["langevin"] = analysis.langevin_fit(records).to_dict()
    if "csv" in cfg["formats"]:
        if len(records) == 1:
            records[0].to_csv(out / "trajectory.csv")
        else:
            for r in records:
                r.to_csv(out / f"trajectory_{r.stream_id:04d}.csv")
        for k, (t, wf) in enumerate(records[0].snapshots):
            _write_rows(out / f"snapshot_{k:02d}.csv", ("x", "re", "im", "density"),
                        _snapshot_rows(wf, params.hbar))
    summary["snapshot_times"] = [t for t, _ in records[0].snapshots]
    if "json" in cfg["formats"]:
        _write_json(out / "trajectories.json", [r.to_dict() for r in records])
    checks = []
    if "attractor" in cfg["checks"]:
        rel = abs(smooth.var_x[-1] / params.pointer_var_x - 1)
        checks.append(_check("attractor", rel <= 0.05, relative_error=rel, tol=0.05))
    if "t_loc_fit" in cfg["checks"]:
        fit = summary["t_loc_fit_no_jump"]
        ratio = fit.get("t_loc_measured", math.nan) / params.t_loc
        checks.append(_check("t_loc_fit", 0.5 <= ratio <= 2.0, ratio=ratio, band=[0.5, 2.0]))
    summary["checks"] = checks
    return summary


# ------------------------------------------------------------ collapse

COLLAPSE = {
    **COMMON,
    "lambda_loc": 1.0, "separation": 1.0, "dt": None,
    "paths": [], "ensembles": [], "n_checkpoints": 10, "checkpoint_horizon": 10.0,
}
PATH = {"w1": 0.9, "stream": 0}
ENSEMBLE = {"w1": 0.5, "n_runs": 10000}
COLLAPSE_CHECKS = ("born", "mean_jumps", "martingale")


def cmd_collapse(cfg: dict, out: Path) -> dict:
    cfg = _section(cfg, COLLAPSE, "collapse config")
    _common(cfg, "collapse", COLLAPSE_CHECKS)
    summary = {"command": "collapse", "seed": cfg["seed"], "paths": [], "ensembles": []}
    checks = []
    for k, p in enumerate(cfg["paths"]):
        p = _section(p, PATH, f"paths[{k}]")
        s0 = collapse.WeightState.pair(p["w1"], cfg["separation"], cfg["lambda_loc"])
        res = collapse.simulate_collapse(s0, cfg["dt"], RngStream(cfg["seed"], p["stream"]))
        if "csv" in cfg["formats"]:
            res.path.to_csv(out / f"path_{k:02d}.csv")
        summary["paths"].append({"w1": p["w1"], "stream": p["stream"], "winner": res.winner + 1,
                                 "n_jumps": res.n_jumps, "t_final": res.t_final})
    for k, e in enumerate(cfg["ensembles"]):
        e = _section(e, ENSEMBLE, f"ensembles[{k}]")
        s0 = collapse.WeightState.pair(e["w1"], cfg["separation"], cfg["lambda_loc"])
        horizon = cfg["checkpoint_horizon"] / (2 * s0.rate_scale)
        cps = np.linspace(0.0, horizon, cfg["n_checkpoints"])
        ens = collapse.collapse_ensemble(s0, e["n_runs"], cfg["seed"] + 1000 * (k + 1), cfg["dt"],
                                         checkpoints=cps, workers=cfg["workers"])
        freq = ens.winner_frequencies()
        n = e["n_runs"]
        sigma = math.sqrt(e["w1"] * (1 - e["w1"]) / n)
        formula = collapse.mean_jump_formula(e["w1"])
        table = ens.martingale_table()
        worst = max(abs(r["mean_w1"] - e["w1"]) / max(r["sem"], 1e-300) for r in table[1:]) if len(table) > 1 else 0.0
        rep = {"w1": e["w1"], "n_runs": n, "winner_frequencies": freq, "born_sigma": sigma,
               "mean_jumps": ens.mean_jumps(), "mean_jumps_formula": formula,
               "jump_time_correlation": ens.jump_time_correlation(), "martingale": table,
               "martingale_worst_sigma": worst}
        summary["ensembles"].append(rep)
        if "csv" in cfg["formats"]:
            _write_rows(out / f"martingale_{k:02d}.csv", ("t", "mean_w1", "sem"),
                        [(r["t"], r["mean_w1"], r["sem"]) for r in table])
        if "born" in cfg["checks"]:
            checks.append(_check(f"born w1={e['w1']}", abs(freq[0] - e["w1"]) <= 3 * sigma,
                                 observed=freq[0], expected=e["w1"], tol=3 * sigma))
        if "mean_jumps" in cfg["checks"] and math.isfinite(formula):
            checks.append(_check(f"mean jumps w1={e['w1']}", abs(ens.mean_jumps() - formula) <= 0.02,
                                 observed=ens.mean_jumps(), expected=formula, tol=0.02))
        if "martingale" in cfg["checks"]:
            checks.append(_check(f"martingale w1={e['w1']}", worst <= 3.0, worst_sigma=worst))
    summary["checks"] = checks
    return summary


# ------------------------------------------------------------- unravel

UNRAVEL = {
    **COMMON,
    "model": None, "psi0": None, "t_final": 1.0, "dt": 0.01, "n_traj": 1000,
    "n_checkpoints": 5, "defect_dt": 0.02, "defect_halvings": 3,
}
RANDOM_MODEL = {"dim": 3, "seed": 0, "rate_scale": 2.0}
UNRAVEL_CHECKS = ("defect_order", "trace_distance")


def _load_model(spec, base: Path | None) -> unravel.LindbladModel:
    if spec is None:
        raise ConfigError("unravel config needs a model")
    if isinstance(spec, str):
        path = Path(spec)
        if not path.is_absolute() and base is not None:
            path = base / path
        return unravel.LindbladModel.from_json(path)
    if "random" in spec:
        if set(spec) != {"random"}:
            raise ConfigError("a random model spec takes no other keys")
        r = _section(spec["random"], RANDOM_MODEL, "model.random")
        return unravel.LindbladModel.random(r["dim"], np.random.default_rng(r["seed"]), r["rate_scale"])
    return unravel.LindbladModel.from_dict(spec)


def cmd_unravel(cfg: dict, out: Path, base: Path | None = None) -> dict:
    cfg = _section(cfg, UNRAVEL, "unravel config")
    _common(cfg, "unravel", UNRAVEL_CHECKS)
    try:
        model = _load_model(cfg["model"], base)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad model: {exc}") from None
    if cfg["psi0"] is None:
        psi0 = np.zeros(model.dim, dtype=complex)
        psi0[0] = 1.0
    else:
        entries = [complex(*v) if isinstance(v, list) else complex(v) for v in cfg["psi0"]]
        psi0 = np.asarray(entries, dtype=complex)
        if psi0.shape != (model.dim,) or not np.linalg.norm(psi0) > 0:
            raise ConfigError(f"psi0 must be a nonzero vector of length {model.dim}")
        psi0 = psi0 / np.linalg.norm(psi0)
    dts = [cfg["defect_dt"] / 2**k for k in range(cfg["defect_halvings"] + 1)]
    defects = [unravel.verify_unravelling(model, psi0, h) for h in dts]
    ratios = [a / b for a, b in zip(defects[:-1], defects[1:])]
    cps = list(np.linspace(cfg["t_final"] / cfg["n_checkpoints"], cfg["t_final"], cfg["n_checkpoints"]))
    ens = unravel.unravel_ensemble(model, psi0, cfg["t_final"], cfg["dt"], cfg["n_traj"], cfg["seed"],
                                   cfg["workers"], checkpoints=cps)
    rho0 = np.outer(psi0, psi0.conj())
    conv = []
    for t, dm in sorted(ens.snapshots.items()):
        exact = unravel.integrate_lindblad(model, rho0, t, dt=min(cfg["dt"], 1e-3))
        conv.append((t, trace_distance(dm, exact)))
    bound = 5.0 / math.sqrt(cfg["n_traj"])
    final = conv[-1][1]
    summary = {
        "command": "unravel", "seed": cfg["seed"], "dim": model.dim,
        "defects": [{"dt": h, "defect": d} for h, d in zip(dts, defects)],
        "defect_ratios": ratios,
        "trace_distance": final, "bound": bound,
        "mean_jumps": float(ens.jump_counts.mean()), "n_traj": cfg["n_traj"],
    }
    if "csv" in cfg["formats"]:
        _write_rows(out / "defect.csv", ("dt", "defect"), zip(dts, defects))
        _write_rows(out / "convergence.csv", ("t", "trace_distance"), conv)
    checks = []
    if "defect_order" in cfg["checks"]:
        checks.append(_check("defect_order", min(ratios) >= 3.5, ratios=ratios, threshold=3.5))
    if "trace_distance" in cfg["checks"]:
        checks.append(_check("trace_distance", final <= bound, observed=final, bound=bound))
    summary["checks"] = checks
    return summary


# -------------------------------------------------------------- frames

FRAMES = {**COMMON, "scenario": None, "phi": math.pi / 4, "theta": math.pi / 8, "phase": 0.0,
          "script": None, "frames": None, "consistency": []}
FRAMES_CHECKS = ("scenario",)


def cmd_frames(cfg: dict, out: Path, base: Path | None = None) -> dict:
    cfg = _section(cfg, FRAMES, "frames config")
    _common(cfg, "frames", FRAMES_CHECKS)
    if cfg["scenario"] is not None:
        if cfg["script"] is not None:
            raise ConfigError("give either a scenario or a script, not both")
        try:
            rep = scenarios.run_scenario(cfg["scenario"], phi=cfg["phi"], theta=cfg["theta"],
                                         phase=cfg["phase"])
        except scenarios.ScenarioError as exc:
            raise ConfigError(str(exc)) from None
        doc = rep.to_dict()
        if "json" in cfg["formats"]:
            _write_json(out / "report.json", doc)
        (out / "summary.txt").write_text(rep.summary() + "\n", encoding="utf-8")
        checks = []
        if "scenario" in cfg["checks"]:
            checks = [_check(c.name, c.passed, observed=c.observed, expected=c.expected) for c in rep.checks]
        doc.pop("trees", None)
        return {"command": "frames", **doc, "checks": checks}
    return _frames_script(cfg, out, base)


def _frames_script(cfg: dict, out: Path, base: Path | None) -> dict:
    spec = cfg["script"]
    if spec is None:
        raise ConfigError("frames config needs a scenario or a script")
    if isinstance(spec, str):
        path = Path(spec)
        if not path.is_absolute() and base is not None:
            path = base / path
        spec = json.loads(path.read_text(encoding="utf-8"))
    try:
        script = frames.EventScript.from_dict(spec)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad script: {exc}") from None
    named = dict(script.frames)
    named.update({k: tuple(v) for k, v in (cfg["frames"] or {}).items()})
    if not named:
        raise ConfigError("no frames to analyse")
    trees = {k: frames.build_branch_tree(None, script, fr) for k, fr in named.items()}
    report = {"command": "frames", "frames": {}, "consistency": []}
    for k, tree in trees.items():
        ok, worst = frames.decoherence_check(tree)
        report["frames"][k] = {
            "members": list(tree.frame), "decoherent": ok, "max_violation": worst,
            "leaf_probabilities": [{"label": list(l.label), "prob": l.prob, "outcome": l.outcome}
                                   for l in tree.leaves()],
        }
        if "json" in cfg["formats"]:
            _write_json(out / f"tree_{k}.json", tree.to_dict())
    for pair in cfg["consistency"]:
        a, b = pair
        joint = frames.build_branch_tree(None, script, tuple(trees[a].frame) + tuple(trees[b].frame))
        rep = frames.joint_consistency(trees[a], trees[b], joint)
        report["consistency"].append({"frames": [a, b], **rep.to_dict()})
    if "json" in cfg["formats"]:
        _write_json(out / "report.json", report)
    report["checks"] = []
    return report


# -------------------------------------------------------------- scales

SCALES = {**COMMON, "hbar": analysis.HBAR_SI, "table": None, "rows": []}
ROW = {"name": "", "inertia": None, "lambda_loc": None, "lyapunov": None, "reference": None}
SCALES_CHECKS = ("within_decade",)


def cmd_scales(cfg: dict, out: Path) -> dict:
    cfg = _section(cfg, SCALES, "scales config")
    _common(cfg, "scales", SCALES_CHECKS)
    rows = []
    if cfg["table"] == "paper":
        rows.extend(analysis.SCALE_TABLE)
    elif cfg["table"] is not None:
        raise ConfigError("table must be 'paper' or omitted")
    for k, r in enumerate(cfg["rows"]):
        r = _section(r, ROW, f"rows[{k}]")
        if r["inertia"] is None or r["lambda_loc"] is None:
            raise ConfigError(f"rows[{k}] needs inertia and lambda_loc")
        rows.append(analysis.ScaleRow(r["name"] or f"row{k}", r["inertia"], r["lambda_loc"],
                                      r["lyapunov"], r["reference"]))
    try:
        table = [r.evaluate(cfg["hbar"]) for r in rows]
    except analysis.AnalysisError as exc:
        raise ConfigError(str(exc)) from None
    header = ("name", "inertia", "lambda_loc", "dx", "dp", "t_loc", "lyapunov_t_loc")
    lines = [(r["name"], r["inertia"], r["lambda_loc"], r["dx"], r["dp"], r["t_loc"],
              r.get("lyapunov_t_loc", "")) for r in table]
    if "csv" in cfg["formats"]:
        _write_rows(out / "scales.csv", header, lines)
    if "json" in cfg["formats"]:
        _write_json(out / "scales.json", table)
    print(f"{'name':<10}{'dx':>12}{'dp':>12}{'t_loc':>12}{'lam*t_loc':>12}")
    for r in table:
        lt = r.get("lyapunov_t_loc")
        print(f"{r['name']:<10}{r['dx']:>12.3g}{r['dp']:>12.3g}{r['t_loc']:>12.3g}"
              f"{'' if lt is None else format(lt, '.3g'):>12}")
    checks = []
    if "within_decade" in cfg["checks"]:
        for r in table:
            if "within_decade" in r:
                checks.append(_check(f"{r['name']} within one decade", all(r["within_decade"].values()),
                                     detail=r["within_decade"]))
    return {"command": "scales", "rows": table, "checks": checks}


# ---------------------------------------------------------------- main

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="decolab", description="Conditioned-state simulations.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="config file path or bundled config name")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", default="decolab-out", help="output directory (default: decolab-out)")
    p.add_argument("--scenario", help="frames: run a named scenario (epr, wigner, chsh, fr)")
    return p


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    out = Path(args.out)
    try:
        if args.config is None and not (args.command == "frames" and args.scenario):
            raise ConfigError("--config is required")
        cfg = load_config(args.config) if args.config else {}
        base = Path(args.config).parent if args.config and Path(args.config).is_file() else None
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.scenario:
            if args.command != "frames":
                raise ConfigError("--scenario only applies to frames")
            cfg["scenario"] = args.scenario
            cfg.pop("script", None)
        out.mkdir(parents=True, exist_ok=True)
        handlers = {
            "localize": lambda: cmd_localize(cfg, out),
            "collapse": lambda: cmd_collapse(cfg, out),
            "unravel": lambda: cmd_unravel(cfg, out, base),
            "frames": lambda: cmd_frames(cfg, out, base),
            "scales": lambda: cmd_scales(cfg, out),
        }
        summary = handlers[args.command]()
    except (ConfigError, frames.FrameError, OSError) as exc:
        print(json.dumps({"status": "error", "command": args.command, "error": str(exc)}))
        return 2
    except (localization.LocalizationError, collapse.CollapseError, unravel.UnravellingError,
            analysis.AnalysisError, ValueError) as exc:
        failure = {"status": "failed", "command": args.command, "error": f"{type(exc).__name__}: {exc}"}
        _write_json(out / "failure.json", failure)
        print(json.dumps(failure))
        return 1
    failed = [c for c in summary.get("checks", []) if not c["passed"]]
    summary["status"] = "failed" if failed else "ok"
    _write_json(out / "summary.json", summary)
    if failed:
        failure = {"status": "failed", "command": args.command, "failed_checks": _plain(failed)}
        _write_json(out / "failure.json", failure)
        print(json.dumps(failure))
        return 1
    print(f"{args.command}: ok ({len(summary.get('checks', []))} checks) -> {out}")
    return 0


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
