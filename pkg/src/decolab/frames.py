"""Conditioned-state trees on small tensor-product Hilbert spaces.

A script is a list of discrete scattering events, each a unitary on some
subset of named factors. For a chosen frame (a proper subset of the
factors) every branch's total state is pushed through the next event and
Schmidt-split across frame and complement; the pieces become children.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import reduce

import numpy as np
import scipy.linalg

from .numerics import NumericsError, fix_phases

UNITARY_TOL = 1e-10
NORM_TOL = 1e-10
PRUNE_TOL = 1e-10
DEGENERACY_TOL = 1e-9
DECOHERENCE_TOL = 1e-8
POINTER_TOL = 1e-9
MAX_TOTAL_DIM = 4096


class FrameError(ValueError):
    """Invalid layout, script, frame or label."""


def _complex_list(values) -> list:
    return [[float(z.real), float(z.imag)] for z in np.asarray(values, dtype=complex).ravel()]


def _decode_vector(data) -> np.ndarray:
    a = np.asarray(data, dtype=float)
    if a.ndim == 2 and a.shape[1] == 2:
        return a[:, 0] + 1j * a[:, 1]
    return np.asarray(data, dtype=complex)


def _decode_matrix(data) -> np.ndarray:
    a = np.asarray(data, dtype=float)
    if a.ndim == 3 and a.shape[2] == 2:
        return a[..., 0] + 1j * a[..., 1]
    if a.ndim != 2:
        raise FrameError("matrix must be a 2-D array of numbers or [re, im] pairs")
    return a.astype(complex)


@dataclass(frozen=True)
class SubsystemLayout:
    names: tuple
    dims: tuple

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        dims = tuple(int(d) for d in self.dims)
        if len(names) != len(dims) or not names:
            raise FrameError("layout needs matching, nonempty names and dims")
        if len(set(names)) != len(names):
            raise FrameError(f"duplicate subsystem names in {names}")
        if any(d < 2 for d in dims):
            raise FrameError(f"every subsystem needs dimension >= 2, got {dims}")
        if math.prod(dims) > MAX_TOTAL_DIM:
            raise FrameError(f"total dimension {math.prod(dims)} exceeds {MAX_TOTAL_DIM}")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "dims", dims)

    @classmethod
    def from_pairs(cls, pairs) -> "SubsystemLayout":
        pairs = list(pairs)
        return cls(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))

    @property
    def total_dim(self) -> int:
        return math.prod(self.dims)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise FrameError(f"unknown subsystem {name!r}") from None

    def axes(self, names) -> list[int]:
        idx = [self.index(n) for n in names]
        if len(set(idx)) != len(idx):
            raise FrameError(f"repeated subsystem in {list(names)}")
        return idx

    def dim_of(self, names) -> int:
        return math.prod(self.dims[i] for i in self.axes(names))

    def ordered(self, names) -> tuple:
        """``names`` sorted into layout order."""
        return tuple(self.names[i] for i in sorted(self.axes(names)))

    def complement(self, names) -> tuple:
        chosen = set(self.axes(names))
        return tuple(n for i, n in enumerate(self.names) if i not in chosen)

    def to_list(self) -> list:
        return [[n, d] for n, d in zip(self.names, self.dims)]


@dataclass
class TensorState:
    layout: SubsystemLayout
    amplitudes: np.ndarray

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=complex).ravel()
        if self.amplitudes.size != self.layout.total_dim:
            raise FrameError(
                f"state has {self.amplitudes.size} amplitudes, layout needs {self.layout.total_dim}"
            )
        norm = float(np.linalg.norm(self.amplitudes))
        if abs(norm - 1.0) > NORM_TOL:
            raise FrameError(f"state norm {norm!r} differs from 1")

    @classmethod
    def basis(cls, layout: SubsystemLayout, indices: dict) -> "TensorState":
        return cls.from_terms(layout, [(1.0, indices)])

    @classmethod
    def from_terms(cls, layout: SubsystemLayout, terms, normalize: bool = False) -> "TensorState":
        """Superpose computational basis kets; unnamed factors sit in index 0."""
        psi = np.zeros(layout.dims, dtype=complex)
        for amp, idx in terms:
            unknown = set(idx) - set(layout.names)
            if unknown:
                raise FrameError(f"unknown subsystems {sorted(unknown)}")
            pos = tuple(int(idx.get(n, 0)) for n in layout.names)
            if any(not 0 <= p < d for p, d in zip(pos, layout.dims)):
                raise FrameError(f"basis index out of range in {idx}")
            psi[pos] += complex(amp)
        v = psi.ravel()
        if normalize:
            v = v / np.linalg.norm(v)
        return cls(layout, v)

    def tensor(self) -> np.ndarray:
        return self.amplitudes.reshape(self.layout.dims)

    def with_global_phase(self, phase: float) -> "TensorState":
        return TensorState(self.layout, self.amplitudes * np.exp(1j * phase))


@dataclass(frozen=True)
class Operation:
    """Unitary ``matrix`` acting on ``targets`` (in the listed order)."""

    targets: tuple
    matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        m = np.asarray(self.matrix, dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise FrameError(f"event matrix must be square, got {m.shape}")
        defect = float(np.max(np.abs(m.conj().T @ m - np.eye(m.shape[0]))))
        if defect > UNITARY_TOL:
            raise FrameError(f"event matrix is not unitary (defect {defect:.3e})")
        object.__setattr__(self, "matrix", m)


@dataclass(frozen=True)
class Event:
    """One scattering event: operations applied in order, optionally with
    the frame used for the split that follows it."""

    ops: tuple
    frame: tuple | None = None
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        if self.frame is not None:
            object.__setattr__(self, "frame", tuple(self.frame))


@dataclass
class EventScript:
    layout: SubsystemLayout
    events: list
    initial: TensorState | None = None
    frames: dict = field(default_factory=dict)
    analyses: list = field(default_factory=list)

    def __post_init__(self):
        for ev in self.events:
            for op in ev.ops:
                self.layout.axes(op.targets)
                if op.matrix.shape[0] != self.layout.dim_of(op.targets):
                    raise FrameError(f"matrix size does not match targets {op.targets}")
            if ev.frame is not None:
                _check_frame(self.layout, ev.frame)
        for name, members in self.frames.items():
            _check_frame(self.layout, members)

    @property
    def n_steps(self) -> int:
        return len(self.events)

    @classmethod
    def from_dict(cls, doc: dict) -> "EventScript":
        allowed = {"layout", "initial", "events", "frames", "analyses"}
        extra = set(doc) - allowed
        if extra:
            raise FrameError(f"unknown script keys {sorted(extra)}")
        layout = SubsystemLayout.from_pairs(doc["layout"])
        initial = None
        if "initial" in doc:
            init = doc["initial"]
            if "amplitudes" in init:
                initial = TensorState(layout, _decode_vector(init["amplitudes"]))
            else:
                terms = [(complex(*t["amp"]) if isinstance(t["amp"], list) else t["amp"], t["basis"])
                         for t in init["terms"]]
                initial = TensorState.from_terms(layout, terms, normalize=bool(init.get("normalize", False)))
        events = []
        for ev in doc["events"]:
            extra = set(ev) - {"ops", "frame", "label"}
            if extra:
                raise FrameError(f"unknown event keys {sorted(extra)}")
            ops = []
            for op in ev["ops"]:
                if "measure" in op:
                    m = op["measure"]
                    extra = set(m) - {"system", "basis", "device", "env"}
                    if extra:
                        raise FrameError(f"unknown measurement keys {sorted(extra)}")
                    ops.append(measurement_operation(
                        layout, m["system"], [_decode_vector(b) for b in m["basis"]], m["device"], m.get("env")
                    ))
                else:
                    ops.append(Operation(tuple(op["targets"]), _decode_matrix(op["matrix"])))
            events.append(Event(tuple(ops), ev.get("frame"), ev.get("label", "")))
        frames = {k: tuple(v) for k, v in doc.get("frames", {}).items()}
        return cls(layout, events, initial, frames, list(doc.get("analyses", [])))

    @classmethod
    def from_json(cls, text: str) -> "EventScript":
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        doc = {
            "layout": self.layout.to_list(),
            "events": [
                {
                    "label": ev.label,
                    "ops": [{"targets": list(op.targets),
                             "matrix": [_complex_list(row) for row in op.matrix]} for op in ev.ops],
                    **({"frame": list(ev.frame)} if ev.frame is not None else {}),
                }
                for ev in self.events
            ],
            "frames": {k: list(v) for k, v in self.frames.items()},
            "analyses": self.analyses,
        }
        if self.initial is not None:
            doc["initial"] = {"amplitudes": _complex_list(self.initial.amplitudes)}
        return doc


def _check_frame(layout: SubsystemLayout, frame) -> tuple:
    frame = tuple(frame)
    if not frame:
        raise FrameError("frame must name at least one subsystem")
    layout.axes(frame)
    if len(frame) >= len(layout.names):
        raise FrameError("frame must be a proper subset of the layout")
    return layout.ordered(frame)


def _apply_operation(psi: np.ndarray, layout: SubsystemLayout, op: Operation) -> np.ndarray:
    axes = layout.axes(op.targets)
    local = [layout.dims[i] for i in axes]
    t = psi.reshape(layout.dims)
    t = np.moveaxis(t, axes, range(len(axes)))
    rest = t.shape[len(axes):]
    t = (op.matrix @ t.reshape(math.prod(local), -1)).reshape(tuple(local) + rest)
    return np.moveaxis(t, range(len(axes)), axes).ravel()


def apply_event(state, event: Event, layout: SubsystemLayout | None = None):
    """Apply every operation of ``event``; identity on the other factors.

    Accepts a ``TensorState`` (returns one) or a raw vector with ``layout``.
    """
    if isinstance(state, TensorState):
        v = state.amplitudes
        for op in event.ops:
            v = _apply_operation(v, state.layout, op)
        return TensorState(state.layout, v)
    v = np.asarray(state, dtype=complex)
    for op in event.ops:
        v = _apply_operation(v, layout, op)
    return v


def measurement_unitary(system_dim: int, basis, device_dim: int = 3,
                        env_dim: int | None = None) -> np.ndarray:
    """Controlled pointer shift for a (possibly partial) orthonormal basis.

    Ordering of factors: system, device, optional environment. Basis vector
    ``k`` (0-based) swaps the device, and the environment with it, between
    ready index 0 and pointer index ``k+1``. States outside the span of the
    basis leave the device untouched.
    """
    b = np.array([np.asarray(v, dtype=complex).ravel() for v in basis])
    if b.shape[1] != system_dim:
        raise FrameError(f"basis vectors must have length {system_dim}")
    if b.shape[0] + 1 > device_dim:
        raise FrameError(f"device of dimension {device_dim} cannot record {b.shape[0]} outcomes")
    gram = b.conj() @ b.T
    if np.max(np.abs(gram - np.eye(len(b)))) > 1e-10:
        raise FrameError("measurement basis is not orthonormal")
    pointer_dim = device_dim * (env_dim or 1)
    u = np.zeros((system_dim * pointer_dim,) * 2, dtype=complex)
    rest = np.eye(system_dim, dtype=complex)
    for k, vec in enumerate(b):
        proj = np.outer(vec, vec.conj())
        rest -= proj
        u += np.kron(proj, _pointer_swap(device_dim, env_dim, k + 1))
    u += np.kron(rest, np.eye(pointer_dim))
    return u


def _pointer_swap(device_dim: int, env_dim: int | None, k: int) -> np.ndarray:
    perm = np.arange(device_dim)
    perm[[0, k]] = perm[[k, 0]]
    x = np.eye(device_dim)[perm]
    if env_dim is None:
        return x
    if k >= env_dim:
        raise FrameError("environment too small to record the outcome")
    perm_e = np.arange(env_dim)
    perm_e[[0, k]] = perm_e[[k, 0]]
    return np.kron(x, np.eye(env_dim)[perm_e])


def measurement_operation(layout: SubsystemLayout, system, basis, device: str,
                          env: str | None = None) -> Operation:
    system = tuple([system] if isinstance(system, str) else system)
    targets = system + (device,) + ((env,) if env else ())
    m = measurement_unitary(
        layout.dim_of(system), basis, layout.dims[layout.index(device)],
        layout.dims[layout.index(env)] if env else None,
    )
    return Operation(targets, m)


@dataclass
class SchmidtBranch:
    coeff: float
    state_S: np.ndarray
    state_env: np.ndarray


def _bipartition(layout: SubsystemLayout, frame) -> tuple[list, list, int, int]:
    fa = sorted(layout.axes(frame))
    ea = [i for i in range(len(layout.names)) if i not in fa]
    return fa, ea, math.prod(layout.dims[i] for i in fa), math.prod(layout.dims[i] for i in ea)


def _as_matrix(v: np.ndarray, layout: SubsystemLayout, fa: list, ea: list) -> np.ndarray:
    dS = math.prod(layout.dims[i] for i in fa)
    return v.reshape(layout.dims).transpose(fa + ea).reshape(dS, -1)


def _join(s: np.ndarray, e: np.ndarray, layout: SubsystemLayout, fa: list, ea: list) -> np.ndarray:
    perm = fa + ea
    t = np.outer(s, e).reshape([layout.dims[i] for i in perm])
    return t.transpose(np.argsort(perm)).ravel()


def _canonical_subspace(u: np.ndarray) -> np.ndarray:
    """Orthonormal basis of span(u) built by Gram-Schmidt on the projected
    computational basis vectors, taken in index order."""
    k = u.shape[1]
    proj = u @ u.conj().T
    out = []
    for i in range(u.shape[0]):
        w = proj[:, i].copy()
        for q in out:
            w -= q * np.vdot(q, w)
        n = np.linalg.norm(w)
        if n > 1e-6:
            out.append(w / n)
            if len(out) == k:
                break
    return np.array(out).T


def _split_matrix(m: np.ndarray) -> list[SchmidtBranch]:
    u, s, vh = np.linalg.svd(m, full_matrices=False)
    keep = s >= PRUNE_TOL
    u, s = u[:, keep], s[keep]
    branches = []
    i = 0
    while i < len(s):
        j = i + 1
        while j < len(s) and s[i] - s[j] <= DEGENERACY_TOL:
            j += 1
        group = u[:, i:j] if j - i == 1 else _canonical_subspace(u[:, i:j])
        sigma = float(np.mean(s[i:j]))
        for col in group.T:
            env = (col.conj() @ m) / sigma
            env = env / np.linalg.norm(env)
            fixed = fix_phases(env[:, None])[:, 0]
            pivot = int(np.argmax(np.abs(fixed)))
            phase = env[pivot] / fixed[pivot]
            branches.append(SchmidtBranch(sigma, col * phase, fixed))
        i = j
    return branches


def schmidt_split(state, frame, layout: SubsystemLayout | None = None) -> list[SchmidtBranch]:
    """Schmidt decomposition across ``frame`` and its complement.

    Coefficients are real and non-negative; the environment vector's
    largest component is real positive and any remaining phase sits on the
    frame vector. Within a degenerate group the frame vectors are fixed by
    projecting computational basis kets in order.
    """
    if isinstance(state, TensorState):
        layout, v = state.layout, state.amplitudes
    else:
        v = np.asarray(state, dtype=complex)
    _check_frame(layout, frame)
    fa, ea, _, _ = _bipartition(layout, frame)
    return _split_matrix(_as_matrix(v, layout, fa, ea))


@dataclass
class BranchNode:
    label: tuple
    coeff: float
    amplitude: float
    state_S: np.ndarray | None
    state_env: np.ndarray | None
    total: np.ndarray
    outcome: dict
    children: list = field(default_factory=list)

    @property
    def prob(self) -> float:
        return self.amplitude**2

    @property
    def depth(self) -> int:
        return len(self.label)


def _pointer_outcomes(state_S: np.ndarray, layout: SubsystemLayout, frame: tuple) -> dict:
    """Computational index of each frame factor when the frame state is an
    eigenstate of it, else ``None``."""
    dims = [layout.dims[layout.index(n)] for n in frame]
    t = np.abs(state_S.reshape(dims)) ** 2
    out = {}
    for k, name in enumerate(frame):
        p = t.sum(axis=tuple(a for a in range(len(dims)) if a != k))
        top = int(np.argmax(p))
        out[name] = top if p[top] >= 1 - POINTER_TOL else None
    return out


@dataclass
class BranchTree:
    layout: SubsystemLayout
    frame: tuple
    script: EventScript
    initial: TensorState
    root: BranchNode
    frames_per_step: list

    def nodes_at(self, step: int) -> list[BranchNode]:
        level = [self.root]
        for _ in range(step):
            level = [c for n in level for c in n.children]
        return level

    def leaves(self) -> list[BranchNode]:
        return self.nodes_at(self.script.n_steps)

    def find(self, label) -> BranchNode:
        node = self.root
        for a in tuple(label):
            if not 0 <= a < len(node.children):
                raise FrameError(f"label {tuple(label)} is not in the tree")
            node = node.children[a]
        return node

    def path(self, label) -> list[BranchNode]:
        node, out = self.root, []
        for a in tuple(label):
            if not 0 <= a < len(node.children):
                raise FrameError(f"label {tuple(label)} is not in the tree")
            node = node.children[a]
            out.append(node)
        return out

    def leaf_probabilities(self) -> dict:
        return {n.label: n.prob for n in self.leaves()}

    def history(self, label, names=None) -> tuple | None:
        """Pointer outcomes along a path restricted to ``names``; ``None``
        if any of them is not a pointer eigenstate."""
        names = tuple(names or self.frame)
        out = []
        for node in self.path(label):
            rec = []
            for n in names:
                v = node.outcome.get(n)
                if v is None:
                    return None
                rec.append(v)
            out.append(tuple(rec))
        return tuple(out)

    def transition_table(self) -> list[list]:
        """Per step, the children's conditional probabilities for each node."""
        return [[[c.coeff**2 for c in n.children] for n in self.nodes_at(s)]
                for s in range(self.script.n_steps)]

    def frame_density(self) -> np.ndarray:
        return sum(n.prob * np.outer(n.state_S, n.state_S.conj()) for n in self.leaves())

    def to_dict(self, include_states: bool = True) -> dict:
        def enc(node: BranchNode) -> dict:
            d = {
                "label": list(node.label),
                "coeff": node.coeff,
                "prob": node.prob,
                "outcome": node.outcome,
            }
            if include_states:
                d["state_S"] = None if node.state_S is None else _complex_list(node.state_S)
                d["state_env"] = None if node.state_env is None else _complex_list(node.state_env)
            d["children"] = [enc(c) for c in node.children]
            return d

        return {"frame": list(self.frame), "layout": self.layout.to_list(), "root": enc(self.root)}

    def to_json(self, include_states: bool = True) -> str:
        return json.dumps(self.to_dict(include_states), indent=1)


def _step_frame(script: EventScript, step: int, frame) -> tuple:
    chosen = frame if frame is not None else script.events[step].frame
    if chosen is None:
        raise FrameError(f"no frame given and event {step} declares none")
    return _check_frame(script.layout, chosen)


def build_branch_tree(initial: TensorState | None, script: EventScript, frame=None) -> BranchTree:
    """Conditioned-state tree of ``script`` seen from ``frame``.

    With ``frame=None`` each event's declared frame is used for the split
    after it.
    """
    initial = initial if initial is not None else script.initial
    if initial is None:
        raise FrameError("no initial state")
    layout = script.layout
    if initial.layout != layout:
        raise FrameError("initial state layout differs from the script layout")
    steps = [_step_frame(script, s, frame) for s in range(script.n_steps)]
    first = steps[0] if steps else _check_frame(layout, frame)
    root_split = schmidt_split(initial.amplitudes, first, layout)
    if len(root_split) == 1:
        rs, re_ = root_split[0].state_S, root_split[0].state_env
        root = BranchNode((), 1.0, 1.0, rs, re_, initial.amplitudes.copy(),
                          _pointer_outcomes(rs, layout, first))
    else:
        root = BranchNode((), 1.0, 1.0, None, None, initial.amplitudes.copy(), {n: None for n in first})
    level = [root]
    for s, ev in enumerate(script.events):
        fr = steps[s]
        fa, ea, _, _ = _bipartition(layout, fr)
        nxt = []
        for node in level:
            v = apply_event(node.total, ev, layout)
            for k, br in enumerate(_split_matrix(_as_matrix(v, layout, fa, ea))):
                child = BranchNode(
                    node.label + (k,), br.coeff, node.amplitude * br.coeff,
                    br.state_S, br.state_env, _join(br.state_S, br.state_env, layout, fa, ea),
                    _pointer_outcomes(br.state_S, layout, fr),
                )
                node.children.append(child)
                nxt.append(child)
        level = nxt
    total = sum(n.prob for n in level)
    if abs(total - 1.0) > 1e-9:
        raise FrameError(f"leaf probabilities sum to {total!r}")
    return BranchTree(layout, steps[-1] if steps else first, script, initial, root, steps)


def decoherence_check(tree: BranchTree) -> tuple[bool, float]:
    """Largest overlap between environment states of distinct leaves."""
    leaves = tree.leaves()
    if len(leaves) < 2:
        return True, 0.0
    env = np.array([n.state_env for n in leaves])
    g = np.abs(env.conj() @ env.T)
    np.fill_diagonal(g, 0.0)
    worst = float(g.max())
    return worst < DECOHERENCE_TOL, worst


@dataclass
class ConsistencyReport:
    consistent: bool
    marginal_defect: float
    joint_decoherent: bool
    joint_violation: float
    diagnostic: str = ""

    def to_dict(self) -> dict:
        return {
            "consistent": self.consistent,
            "marginal_defect": self.marginal_defect,
            "joint_decoherent": self.joint_decoherent,
            "joint_violation": self.joint_violation,
            "diagnostic": self.diagnostic,
        }


def _marginal_defect(part: BranchTree, joint: BranchTree) -> tuple[float, str]:
    names = part.frame
    own = {}
    for leaf in part.leaves():
        h = part.history(leaf.label)
        if h is None or h in own:
            return math.inf, f"frame {list(names)} has branches without distinct pointer labels"
        own[h] = leaf.prob
    pooled = {}
    for leaf in joint.leaves():
        h = joint.history(leaf.label, names)
        if h is None:
            return math.inf, f"joint branches do not carry pointer labels for {list(names)}"
        pooled[h] = pooled.get(h, 0.0) + leaf.prob
    keys = set(own) | set(pooled)
    return max(abs(own.get(k, 0.0) - pooled.get(k, 0.0)) for k in keys), ""


def joint_consistency(tree_a: BranchTree, tree_b: BranchTree, tree_joint: BranchTree) -> ConsistencyReport:
    """Do frames A and B lift to the joint frame: is the joint tree
    decoherent and do its probabilities marginalize onto both?"""
    layout = tree_joint.layout
    if set(tree_joint.frame) != set(tree_a.frame) | set(tree_b.frame):
        raise FrameError("joint frame must be the union of the two frames")
    _check_frame(layout, tree_joint.frame)
    ok, worst = decoherence_check(tree_joint)
    da, msg_a = _marginal_defect(tree_a, tree_joint)
    db, msg_b = _marginal_defect(tree_b, tree_joint)
    defect = max(da, db)
    notes = [m for m in (msg_a, msg_b) if m]
    if not ok:
        notes.append(f"joint frame recoheres (max environment overlap {worst:.3g})")
    consistent = ok and defect <= 1e-9
    return ConsistencyReport(consistent, defect, ok, worst, "; ".join(notes))


def _chain_vector(tree: BranchTree, label, vec: np.ndarray) -> np.ndarray:
    v = np.asarray(vec, dtype=complex)
    for ev, node in zip(tree.script.events, tree.path(label)):
        v = apply_event(v, ev, tree.layout)
        v = node.total * np.vdot(node.total, v)
    return v


def chain_operator(tree: BranchTree, label) -> np.ndarray:
    """Dense branch-dependent projector/unitary chain for a full label."""
    label = tuple(label)
    if len(label) != tree.script.n_steps:
        raise FrameError(f"label {label} does not have one entry per event")
    d = tree.layout.total_dim
    eye = np.eye(d, dtype=complex)
    return np.array([_chain_vector(tree, label, eye[:, j]) for j in range(d)]).T


def decoherence_functional(tree: BranchTree, a, b, observable: np.ndarray | None = None) -> complex:
    """``<Psi0| C_a^dagger O C_b |Psi0>`` with ``O`` acting on the frame
    factor (identity when omitted)."""
    psi0 = tree.initial.amplitudes
    va = _chain_vector(tree, a, psi0)
    vb = _chain_vector(tree, b, psi0)
    if observable is not None:
        fa, ea, dS, dE = _bipartition(tree.layout, tree.frame)
        m = _as_matrix(vb, tree.layout, fa, ea)
        vb = _join_matrix(np.asarray(observable, dtype=complex) @ m, tree.layout, fa, ea)
    return complex(np.vdot(va, vb))


def _join_matrix(m: np.ndarray, layout: SubsystemLayout, fa: list, ea: list) -> np.ndarray:
    perm = fa + ea
    return m.reshape([layout.dims[i] for i in perm]).transpose(np.argsort(perm)).ravel()


@dataclass
class KrausSet:
    operators: list
    labels: list
    parent: tuple

    def completeness_defect(self) -> float:
        s = sum(k.conj().T @ k for k in self.operators)
        return float(np.max(np.abs(s - np.eye(s.shape[0]))))


def krauss_operators(tree: BranchTree, step: int, parent_label) -> KrausSet:
    """Operators ``<e|U|parent env>`` on the frame factor for event ``step``
    (1-based). The first entries belong to the children of the parent; the
    rest complete the environment basis and are kept only when nonzero."""
    if not 1 <= step <= tree.script.n_steps:
        raise FrameError(f"step must lie in 1..{tree.script.n_steps}")
    parent_label = tuple(parent_label)
    if len(parent_label) != step - 1:
        raise FrameError("parent label must have step-1 entries")
    parent = tree.find(parent_label)
    if parent.state_env is None:
        raise FrameError("parent is not a product of frame and environment states")
    layout = tree.layout
    prev = tree.frames_per_step[step - 2] if step >= 2 else tree.frames_per_step[0]
    if tuple(prev) != tuple(tree.frames_per_step[step - 1]):
        raise FrameError("Kraus operators need the same frame before and after the event")
    fa, ea, dS, dE = _bipartition(layout, tree.frames_per_step[step - 1])
    ev = tree.script.events[step - 1]
    cols = np.empty((dS, dS, dE), dtype=complex)
    for j in range(dS):
        e = np.zeros(dS, dtype=complex)
        e[j] = 1.0
        out = apply_event(_join(e, parent.state_env, layout, fa, ea), ev, layout)
        cols[:, j, :] = _as_matrix(out, layout, fa, ea)
    envs = np.array([c.state_env for c in parent.children]).T
    ops = [np.einsum("e,ije->ij", envs[:, k].conj(), cols) for k in range(envs.shape[1])]
    labels = [c.label for c in parent.children]
    rest = scipy.linalg.null_space(envs.conj().T)
    for k in range(rest.shape[1]):
        op = np.einsum("e,ije->ij", rest[:, k].conj(), cols)
        if np.linalg.norm(op) > 1e-12:
            ops.append(op)
            labels.append(None)
    return KrausSet(ops, labels, parent_label)


def reduced_density(state, frame, layout: SubsystemLayout | None = None) -> np.ndarray:
    if isinstance(state, TensorState):
        layout, v = state.layout, state.amplitudes
    else:
        v = np.asarray(state, dtype=complex)
    fa, ea, _, _ = _bipartition(layout, frame)
    m = _as_matrix(v, layout, fa, ea)
    return m @ m.conj().T


def final_state(script: EventScript, initial: TensorState | None = None) -> TensorState:
    s = initial if initial is not None else script.initial
    for ev in script.events:
        s = apply_event(s, ev)
    return s


def history_probabilities(tree: BranchTree, names=None) -> dict:
    """Leaf probabilities pooled by pointer history over ``names``."""
    out = {}
    for leaf in tree.leaves():
        h = tree.history(leaf.label, names)
        if h is None:
            raise FrameError(f"branch {leaf.label} carries no pointer label")
        out[h] = out.get(h, 0.0) + leaf.prob
    return out


def kron_all(mats) -> np.ndarray:
    return reduce(np.kron, mats)
