"""Ready-made measurement scripts: EPR pair, Wigner's friend, the CHSH
variant and the doubled friend/Wigner set-up with its four predictions.

Devices are qutrits with ready index 0 and pointer indices 1 (reads +1)
and 2 (reads -1). Qubits use index 0 for spin up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .frames import (
    BranchTree,
    Event,
    EventScript,
    SubsystemLayout,
    TensorState,
    build_branch_tree,
    decoherence_check,
    joint_consistency,
    measurement_operation,
)

POINTER_NAMES = {0: "0", 1: "+", 2: "-"}
SIGN = {1: 1.0, 2: -1.0}
PROB_TOL = 1e-9
Z_BASIS = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]


class ScenarioError(ValueError):
    """Unknown scenario or bad scenario parameter."""


@dataclass
class Check:
    name: str
    expected: object
    observed: object
    tol: float
    passed: bool

    def to_dict(self) -> dict:
        return {"name": self.name, "expected": self.expected, "observed": self.observed,
                "tol": self.tol, "passed": self.passed}


@dataclass
class ScenarioSpec:
    name: str
    script: EventScript
    frames: dict
    expected: dict
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for key, table in self.expected.items():
            if isinstance(table, dict) and table.get("normalized", False):
                total = sum(v for k, v in table.items() if k != "normalized")
                if abs(total - 1.0) > PROB_TOL:
                    raise ScenarioError(f"expected table {key!r} sums to {total}")


@dataclass
class ScenarioReport:
    name: str
    params: dict
    checks: list
    values: dict
    trees: dict

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self, include_trees: bool = True) -> dict:
        doc = {
            "scenario": self.name,
            "params": self.params,
            "passed": self.passed,
            "checks": [c.to_dict() for c in self.checks],
            "values": self.values,
        }
        if include_trees:
            doc["trees"] = {
                k: t.to_dict(include_states=t.layout.total_dim <= 256) for k, t in self.trees.items()
            }
        return doc

    def summary(self) -> str:
        width = max(len(c.name) for c in self.checks)
        lines = [f"scenario {self.name} {self.params}"]
        for c in self.checks:
            lines.append(f"  {'PASS' if c.passed else 'FAIL'}  {c.name:<{width}}  observed={_fmt(c.observed)}"
                         f"  expected={_fmt(c.expected)}")
        return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.12g}"
    if isinstance(v, dict):
        return "{" + ", ".join(f"{k}: {_fmt(x)}" for k, x in v.items()) + "}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


def _close(name, expected, observed, tol=PROB_TOL) -> Check:
    if isinstance(expected, dict):
        keys = set(expected) | set(observed)
        err = max(abs(expected.get(k, 0.0) - observed.get(k, 0.0)) for k in keys)
    elif isinstance(expected, (list, tuple)):
        if len(expected) != len(observed):
            return Check(name, list(expected), list(observed), tol, False)
        err = max((abs(a - b) for a, b in zip(expected, observed)), default=0.0)
    else:
        err = abs(expected - observed)
    return Check(name, expected, observed, tol, bool(err <= tol))


def _close_table(name, expected, observed, tol=PROB_TOL) -> Check:
    ok = len(expected) == len(observed) and all(
        len(a) == len(b) and all(abs(x - y) <= tol for x, y in zip(a, b)) for a, b in zip(expected, observed)
    )
    return Check(name, expected, observed, tol, bool(ok))


def _flag(name, expected: bool, observed: bool) -> Check:
    return Check(name, bool(expected), bool(observed), 0.0, bool(expected) == bool(observed))


def outcome_key(names, values) -> str:
    return ",".join(f"{n}{POINTER_NAMES.get(v, v)}" for n, v in zip(names, values))


def step_distribution(tree: BranchTree, names, step: int | None = None) -> dict:
    """Probability of each pointer reading of ``names`` at ``step``
    (1-based, default last), pooled over branches."""
    step = tree.script.n_steps if step is None else step
    out = {}
    for node in tree.nodes_at(step):
        vals = tuple(node.outcome.get(n) for n in names)
        if any(v is None for v in vals):
            raise ScenarioError(f"branch {node.label} has no pointer reading for {names}")
        key = outcome_key(names, vals)
        out[key] = out.get(key, 0.0) + node.prob
    return dict(sorted(out.items()))


def history_distribution(tree: BranchTree, readings) -> dict:
    """Joint probabilities of pointer readings taken at different steps.

    ``readings`` lists ``(subsystem, step)`` pairs."""
    out = {}
    for leaf in tree.leaves():
        path = tree.path(leaf.label)
        vals = []
        for name, step in readings:
            v = path[step - 1].outcome.get(name)
            if v is None:
                raise ScenarioError(f"branch {leaf.label} has no pointer reading for {name}")
            vals.append(v)
        key = outcome_key([r[0] for r in readings], vals)
        out[key] = out.get(key, 0.0) + leaf.prob
    return dict(sorted(out.items()))


def environment_view(tree: BranchTree, own: str, other: str) -> dict:
    """Joint readings of ``own`` (in the frame) and ``other`` (in the
    complement) inferred from the frame's conditioned environment states."""
    layout = tree.layout
    env_names = layout.complement(tree.frame)
    if other not in env_names:
        raise ScenarioError(f"{other} is not in the complement of frame {tree.frame}")
    dims = [layout.dims[layout.index(n)] for n in env_names]
    k = env_names.index(other)
    out = {}
    for leaf in tree.leaves():
        t = np.abs(leaf.state_env.reshape(dims)) ** 2
        p_other = t.sum(axis=tuple(a for a in range(len(dims)) if a != k))
        for v, p in enumerate(p_other):
            if p * leaf.prob < 1e-15:
                continue
            key = outcome_key([own, other], [leaf.outcome[own], v])
            out[key] = out.get(key, 0.0) + leaf.prob * float(p)
    return dict(sorted(out.items()))


def _trees(spec: ScenarioSpec) -> dict:
    return {k: build_branch_tree(spec.script.initial, spec.script, fr) for k, fr in spec.frames.items()}


def _transitions(tree: BranchTree) -> list:
    return [sorted((round(p, 15) for node in level for p in node), reverse=True)
            for level in tree.transition_table()]


def _wing_basis() -> list:
    """Rotated basis (F+ +- F-)/sqrt2 on friend-device x qubit, with
    F+ = |f+ z+> at index 1*2+0 and F- = |f- z-> at index 2*2+1."""
    plus = np.zeros(6)
    minus = np.zeros(6)
    plus[2], plus[5] = 1, 1
    minus[2], minus[5] = 1, -1
    return [plus / math.sqrt(2), minus / math.sqrt(2)]


# ---------------------------------------------------------------- EPR

def epr_spec() -> ScenarioSpec:
    layout = SubsystemLayout.from_pairs([("M", 3), ("Q1", 2), ("Q2", 2), ("N", 3)])
    r = 1 / math.sqrt(2)
    initial = TensorState.from_terms(layout, [(r, {"Q1": 0, "Q2": 1}), (r, {"Q1": 1, "Q2": 0})])
    events = [
        Event((measurement_operation(layout, ["Q1"], Z_BASIS, "M"),), label="M measures Q1"),
        Event((measurement_operation(layout, ["Q2"], Z_BASIS, "N"),), label="N measures Q2"),
    ]
    script = EventScript(layout, events, initial)
    frames = {"M": ("M",), "N": ("N",), "M+N": ("M", "N")}
    expected = {
        "joint": {"M+,N-": 0.5, "M-,N+": 0.5, "normalized": True},
        "M_transitions": [[0.5, 0.5], [1.0, 1.0]],
        "N_transitions": [[1.0], [0.5, 0.5]],
        "M+N_transitions": [[0.5, 0.5], [1.0, 1.0]],
    }
    return ScenarioSpec("epr", script, frames, expected)


def run_epr() -> ScenarioReport:
    spec = epr_spec()
    trees = _trees(spec)
    checks, values = [], {}
    for k in ("M", "N", "M+N"):
        tr = _transitions(trees[k])
        values[f"{k}_transitions"] = tr
        checks.append(_close_table(f"{k} transition probabilities", spec.expected[f"{k}_transitions"], tr))
        ok, worst = decoherence_check(trees[k])
        values[f"{k}_max_violation"] = worst
        checks.append(_flag(f"{k} frame decoherent", True, ok))
    joint = step_distribution(trees["M+N"], ("M", "N"))
    values["joint_probabilities"] = joint
    exp = {k: v for k, v in spec.expected["joint"].items() if k != "normalized"}
    checks.append(_close("joint probabilities", exp, joint))
    cons = joint_consistency(trees["M"], trees["N"], trees["M+N"])
    values["consistency"] = cons.to_dict()
    checks.append(_flag("M and N lift to M+N", True, cons.consistent))
    return ScenarioReport("epr", {}, checks, values, trees)


# ------------------------------------------------------------- Wigner

def wigner_spec(phi: float) -> ScenarioSpec:
    phi = float(phi)
    if not 0.0 <= phi <= math.pi / 4 + 1e-12:
        raise ScenarioError(f"phi must lie in [0, pi/4], got {phi}")
    layout = SubsystemLayout.from_pairs([("F", 3), ("Q", 2), ("W", 3), ("E", 3)])
    c, s = math.cos(phi), math.sin(phi)
    initial = TensorState.from_terms(layout, [(c, {"Q": 0}), (s, {"Q": 1})])
    events = [
        Event((measurement_operation(layout, ["Q"], Z_BASIS, "F"),), label="F measures Q"),
        Event((measurement_operation(layout, ["F", "Q"], _wing_basis(), "W", "E"),), label="W measures F+Q"),
    ]
    script = EventScript(layout, events, initial)
    a, b = (c + s) / 2, (c - s) / 2
    expected = {
        "F_step1": {"F+": c * c, "F-": s * s, "normalized": True},
        "W_step2": {"W+": 2 * a * a, "W-": 2 * b * b, "normalized": True},
        "friend_view": {"F+,W+": 0.25, "F+,W-": 0.25, "F-,W+": 0.25, "F-,W-": 0.25, "normalized": True},
        "wigner_view": {"W+,F+": a * a, "W+,F-": a * a, "W-,F+": b * b, "W-,F-": b * b, "normalized": True},
    }
    frames = {"F": ("F",), "W": ("W",), "F+W": ("F", "W")}
    return ScenarioSpec("wigner", script, frames, expected, {"phi": phi, "a": a, "b": b})


def _drop_zero(d: dict) -> dict:
    return {k: v for k, v in d.items() if k != "normalized"}


def run_wigner(phi: float = math.pi / 4) -> ScenarioReport:
    spec = wigner_spec(phi)
    trees = _trees(spec)
    checks, values = [], {}
    f1 = step_distribution(trees["F"], ("F",), 1)
    w2 = step_distribution(trees["W"], ("W",), 2)
    values["F_step1"], values["W_step2"] = f1, w2
    checks.append(_close("F-frame probabilities", _drop_zero(spec.expected["F_step1"]), f1))
    checks.append(_close("W-frame probabilities", _drop_zero(spec.expected["W_step2"]), w2))
    f_children = [[round(c.coeff**2, 15) for c in n.children] for n in trees["F"].nodes_at(1)]
    values["F_step2_conditional"] = f_children
    checks.append(_close_table("F-frame second-step probabilities", [[0.5, 0.5]] * len(f_children), f_children))
    if abs(phi - math.pi / 4) < 1e-12:
        never = all(n.outcome["W"] != 2 for n in trees["W"].nodes_at(2))
        checks.append(_flag("W=-1 branch absent at phi=pi/4", True, never))
    fv = environment_view(trees["F"], "F", "W")
    wv = environment_view(trees["W"], "W", "F")
    values["friend_view"], values["wigner_view"] = fv, wv
    checks.append(_close("joint readings inferred in F's frame", _drop_zero(spec.expected["friend_view"]), fv))
    checks.append(_close("joint readings inferred in W's frame", _drop_zero(spec.expected["wigner_view"]), wv))
    for k in ("F", "W"):
        ok, worst = decoherence_check(trees[k])
        values[f"{k}_max_violation"] = worst
        checks.append(_flag(f"{k} frame decoherent", True, ok))
    ok, worst = decoherence_check(trees["F+W"])
    values["F+W_max_violation"] = worst
    complementary = phi > 1e-12
    checks.append(_flag("F+W frame recoheres", complementary, not ok))
    cons = joint_consistency(trees["F"], trees["W"], trees["F+W"])
    values["consistency"] = cons.to_dict()
    checks.append(_flag("observer complementarity", complementary, not cons.consistent))
    return ScenarioReport("wigner", spec.params, checks, values, trees)


# ------------------------------------------------- doubled set-ups

def _doubled_layout() -> SubsystemLayout:
    return SubsystemLayout.from_pairs(
        [("F1", 3), ("Q1", 2), ("W1", 3), ("E1", 3), ("F2", 3), ("Q2", 2), ("W2", 3), ("E2", 3)]
    )


def _doubled_events(layout: SubsystemLayout) -> list:
    friends = Event(tuple(measurement_operation(layout, [f"Q{i}"], Z_BASIS, f"F{i}") for i in (1, 2)),
                    label="friends measure their qubits")
    wigners = Event(tuple(measurement_operation(layout, [f"F{i}", f"Q{i}"], _wing_basis(), f"W{i}", f"E{i}")
                          for i in (1, 2)), label="Wigners measure friend+qubit")
    return [friends, wigners]


def _qubit_pair_state(layout: SubsystemLayout, amps: dict, phase: float = 0.0) -> TensorState:
    g = complex(math.cos(phase), math.sin(phase))
    return TensorState.from_terms(
        layout, [(g * a, {"Q1": i, "Q2": j}) for (i, j), a in amps.items() if a != 0]
    )


STEP_OF = {"F": 1, "W": 2}


def _correlator(tree: BranchTree, first: str, second: str) -> float:
    """Mean product of the two +-1 readings; a friend reads at step 1, a
    Wigner at step 2."""
    total = 0.0
    for leaf in tree.leaves():
        path = tree.path(leaf.label)
        u = path[STEP_OF[first[0]] - 1].outcome[first]
        v = path[STEP_OF[second[0]] - 1].outcome[second]
        if u not in SIGN or v not in SIGN:
            raise ScenarioError(f"branch {leaf.label} lacks a +-1 reading")
        total += leaf.prob * SIGN[u] * SIGN[v]
    return total


def _mean_reading(tree: BranchTree, name: str) -> float:
    step = STEP_OF[name[0]]
    return sum(n.prob * SIGN[n.outcome[name]] for n in tree.nodes_at(step))


def chsh_spec(theta: float, phase: float = 0.0) -> ScenarioSpec:
    layout = _doubled_layout()
    c, s = math.cos(theta) / math.sqrt(2), math.sin(theta) / math.sqrt(2)
    initial = _qubit_pair_state(layout, {(0, 0): c, (0, 1): s, (1, 0): s, (1, 1): -c}, phase)
    script = EventScript(layout, _doubled_events(layout), initial)
    frames = {
        "F1+F2": ("F1", "F2"), "F1+W2": ("F1", "W2"), "W1+F2": ("W1", "F2"), "W1+W2": ("W1", "W2"),
        "F1": ("F1",), "F2": ("F2",), "W1": ("W1",), "W2": ("W2",),
    }
    value = 2 * math.sqrt(2) * math.sin(2 * theta + math.pi / 4)
    return ScenarioSpec("chsh", script, frames, {"value": value}, {"theta": float(theta), "phase": float(phase)})


def chsh_direct(theta: float) -> float:
    """CHSH combination evaluated straight from the two-qubit state."""
    z = np.diag([1.0, -1.0])
    x = np.array([[0.0, 1.0], [1.0, 0.0]])
    c, s = math.cos(theta), math.sin(theta)
    psi = np.array([c, s, s, -c]) / math.sqrt(2)

    def e(a, b):
        return float(psi @ np.kron(a, b) @ psi)

    return e(z, z) + e(z, x) + e(x, z) - e(x, x)


def run_chsh(theta: float = math.pi / 8, phase: float = 0.0) -> tuple[float, bool, ScenarioReport]:
    spec = chsh_spec(theta, phase)
    trees = _trees(spec)
    corr = {
        "F1F2": _correlator(trees["F1+F2"], "F1", "F2"),
        "F1W2": _correlator(trees["F1+W2"], "F1", "W2"),
        "W1F2": _correlator(trees["W1+F2"], "W1", "F2"),
        "W1W2": _correlator(trees["W1+W2"], "W1", "W2"),
    }
    value = corr["F1F2"] + corr["F1W2"] + corr["W1F2"] - corr["W1W2"]
    means = {k: _mean_reading(trees[k], k) for k in ("F1", "F2", "W1", "W2")}
    surrogate = (means["F1"] * means["F2"] + means["F1"] * means["W2"]
                 + means["W1"] * means["F2"] - means["W1"] * means["W2"])
    violated = value > 2 + 1e-12
    checks = [
        _close("CHSH value", spec.expected["value"], value),
        _close("agrees with direct two-qubit evaluation", chsh_direct(theta), value, 1e-12),
        Check("product-of-marginals surrogate within [-2, 2]", 2.0, surrogate, 0.0, abs(surrogate) <= 2 + 1e-12),
    ]
    values = {"correlators": corr, "value": value, "violated": violated,
              "marginal_means": means, "surrogate": surrogate}
    keep = {k: trees[k] for k in ("F1+F2", "F1+W2", "W1+F2", "W1+W2")}
    return value, violated, ScenarioReport("chsh", spec.params, checks, values, keep)


def fr_spec() -> ScenarioSpec:
    layout = _doubled_layout()
    r = 1 / math.sqrt(3)
    initial = _qubit_pair_state(layout, {(0, 0): r, (0, 1): r, (1, 1): r})
    script = EventScript(layout, _doubled_events(layout), initial)
    frames = {
        "F1+F2": ("F1", "F2"), "F1+W2": ("F1", "W2"), "W1+F2": ("W1", "F2"), "W1+W2": ("W1", "W2"),
        "all": ("F1", "F2", "W1", "W2"),
    }
    expected = {
        "p(F1-,F2+)": 0.0,
        "p(F1-|W2-)": 1.0,
        "p(F2+|W1-)": 1.0,
        "p(W1-,W2-)": 1.0 / 12.0,
        "t1_branches": [1 / 3, 1 / 3, 1 / 3],
    }
    return ScenarioSpec("frauchiger-renner", script, frames, expected)


def _conditional(dist: dict, given: str, event: str) -> float:
    num = sum(p for k, p in dist.items() if given in k.split(",") and event in k.split(","))
    den = sum(p for k, p in dist.items() if given in k.split(","))
    if den <= 0:
        raise ScenarioError(f"conditioning reading {given} never occurs")
    return num / den


def run_frauchiger_renner() -> ScenarioReport:
    spec = fr_spec()
    trees = _trees(spec)
    ff = history_distribution(trees["F1+F2"], [("F1", 1), ("F2", 1)])
    fw = history_distribution(trees["F1+W2"], [("F1", 1), ("W2", 2)])
    wf = history_distribution(trees["W1+F2"], [("W1", 2), ("F2", 1)])
    ww = history_distribution(trees["W1+W2"], [("W1", 2), ("W2", 2)])
    obs = {
        "p(F1-,F2+)": ff.get("F1-,F2+", 0.0),
        "p(F1-|W2-)": _conditional(fw, "W2-", "F1-"),
        "p(F2+|W1-)": _conditional(wf, "W1-", "F2+"),
        "p(W1-,W2-)": ww.get("W1-,W2-", 0.0),
    }
    t1 = sorted((round(n.prob, 15) for n in trees["all"].nodes_at(1)), reverse=True)
    checks = [
        _close("p(F1=-1, F2=+1)", 0.0, obs["p(F1-,F2+)"], 1e-10),
        _close("p(F1=-1 | W2=-1)", 1.0, obs["p(F1-|W2-)"], 1e-10),
        _close("p(F2=+1 | W1=-1)", 1.0, obs["p(F2+|W1-)"], 1e-10),
        _close("p(W1=-1, W2=-1)", 1.0 / 12.0, obs["p(W1-,W2-)"], 1e-10),
        _close("joint-frame branches after the friends", spec.expected["t1_branches"], t1),
    ]
    first = EventScript(spec.script.layout, spec.script.events[:1], spec.script.initial)
    t1_tree = build_branch_tree(first.initial, first, spec.frames["all"])
    ok1, worst1 = decoherence_check(t1_tree)
    ok2, worst2 = decoherence_check(trees["all"])
    spawned = [len(n.children) for n in trees["all"].nodes_at(1)]
    checks += [
        _flag("joint frame decoherent after the friends", True, ok1),
        _flag("joint frame recoheres after the Wigners", True, not ok2),
        Check("each friend branch spawns 16 joint branches", [16, 16, 16], spawned, 0.0, spawned == [16, 16, 16]),
    ]
    cons = joint_consistency(trees["F1+F2"], trees["W1+W2"], trees["all"])
    checks.append(_flag("friend and Wigner pairs lift to one joint frame", False, cons.consistent))
    values = {
        **obs,
        "distributions": {"F1+F2": ff, "F1+W2": fw, "W1+F2": wf, "W1+W2": ww},
        "t1_branches": t1,
        "t1_max_violation": worst1,
        "t2_max_violation": worst2,
        "consistency": cons.to_dict(),
    }
    return ScenarioReport("frauchiger-renner", {}, checks, values, trees)


SCENARIOS = ("epr", "wigner", "chsh", "fr")


def run_scenario(name: str, **params) -> ScenarioReport:
    if name == "epr":
        return run_epr()
    if name == "wigner":
        return run_wigner(params.get("phi", math.pi / 4))
    if name == "chsh":
        return run_chsh(params.get("theta", math.pi / 8), params.get("phase", 0.0))[2]
    if name in ("fr", "frauchiger-renner"):
        return run_frauchiger_renner()
    raise ScenarioError(f"unknown scenario {name!r}; choose from {SCENARIOS}")
