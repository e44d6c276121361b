"""Reduced dynamics of a superposition of well-separated pointer packets.

For two packets a distance ``L`` apart, the weight ``w1`` drifts as

    dw1/dt = 2 Lambda L^2 w1 (1 - w1) (2 w1 - 1)

which pushes the larger weight toward one, while jumps at rate
``2 Lambda L^2 w1 w2`` swap the weights. The two effects cancel on average,
so each packet wins with its initial weight.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import RngStream, UniformBlocks
from .parallel import DEFAULT_CHUNK, chunk_ranges, run_chunks

WIN_THRESHOLD = 1e-6
TIE_EPS = 1e-6
MAX_STEP_PROB = 0.05
GUARD_FACTOR = 50.0


class CollapseError(RuntimeError):
    pass


@dataclass
class WeightState:
    """Packet weights (summing to one), packet positions and ``Lambda``."""

    weights: np.ndarray
    positions: np.ndarray
    lambda_loc: float = 1.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).copy()
        self.positions = np.asarray(self.positions, dtype=float).copy()
        if self.weights.shape != self.positions.shape or self.weights.ndim != 1:
            raise ValueError("weights and positions must be 1D arrays of equal length")
        if self.weights.size < 2:
            raise ValueError("need at least two packets")
        if np.any(self.weights < 0):
            raise ValueError("weights must be non-negative")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1, got {self.weights.sum()!r}")
        if self.lambda_loc < 0:
            raise ValueError("lambda_loc must be non-negative")

    @classmethod
    def pair(cls, w1: float, separation: float = 1.0, lambda_loc: float = 1.0) -> "WeightState":
        return cls(np.array([w1, 1.0 - w1]), np.array([0.0, separation]), lambda_loc)

    @property
    def separation(self) -> float:
        if self.weights.size != 2:
            raise ValueError("separation is defined for two packets")
        return abs(float(self.positions[1] - self.positions[0]))

    @property
    def rate_scale(self) -> float:
        """``Lambda L^2`` for a two-packet state."""
        return self.lambda_loc * self.separation**2

    def jump_rate(self) -> float:
        w = self.weights
        return 2.0 * self.rate_scale * w[0] * w[1]

    def with_w1(self, w1: float) -> "WeightState":
        return WeightState(np.array([w1, 1.0 - w1]), self.positions, self.lambda_loc)


def _drift(w1, lam_l2):
    return 2.0 * lam_l2 * w1 * (1.0 - w1) * (2.0 * w1 - 1.0)


def _rk4_w1(w1, lam_l2, dt):
    k1 = _drift(w1, lam_l2)
    k2 = _drift(w1 + 0.5 * dt * k1, lam_l2)
    k3 = _drift(w1 + 0.5 * dt * k2, lam_l2)
    k4 = _drift(w1 + dt * k3, lam_l2)
    return w1 + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def weight_drift_step(s: WeightState, dt: float) -> WeightState:
    """One RK4 step of the two-packet weight equation."""
    if s.weights.size != 2:
        raise ValueError("the drift equation is only defined for two packets")
    w1 = float(np.clip(_rk4_w1(s.weights[0], s.rate_scale, dt), 0.0, 1.0))
    return s.with_w1(w1)


def analytic_weights(w0: float, delta_t: float, lam_l2: float) -> float:
    """Closed-form jump-free weight after ``delta_t``."""
    if w0 <= 0.0 or w0 >= 1.0:
        return float(w0)
    u0 = 2.0 * w0 - 1.0
    if u0 == 0.0:
        return 0.5
    log_y = math.log(u0 * u0 / (w0 * (1.0 - w0))) + 2.0 * lam_l2 * delta_t
    # sqrt(y / (4 + y)) written to stay finite for large y
    frac = 1.0 / math.sqrt(1.0 + 4.0 * math.exp(-log_y)) if log_y > -700 else 0.0
    return 0.5 * (1.0 + math.copysign(frac, u0))


def collapse_jump(s: WeightState) -> WeightState:
    """Reweight ``w_i -> w_i (x_i - <x>)^2 / sum_j w_j (x_j - <x>)^2``."""
    w, x = s.weights, s.positions
    mean = float(np.dot(w, x))
    d2 = (x - mean) ** 2
    denom = float(np.dot(w, d2))
    if denom <= 0.0:
        raise CollapseError("all packets coincide with the mean position")
    if w.size == 2:
        return WeightState(w[::-1].copy(), x, s.lambda_loc)
    new = w * d2 / denom
    return WeightState(new / new.sum(), x, s.lambda_loc)


@dataclass
class CollapsePath:
    times: list = field(default_factory=list)
    w1: list = field(default_factory=list)
    jumped: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("t", "w1", "jumped"))
            for t, v, j in zip(self.times, self.w1, self.jumped):
                w.writerow((repr(float(t)), repr(float(v)), int(j)))


@dataclass
class CollapseResult:
    winner: int
    n_jumps: int
    t_final: float
    path: CollapsePath


def _step_size(lam_l2: float, dt: float | None) -> float:
    # r <= lam_l2 / 2, so the adaptive rule 0.05 / max(r, 2 lam_l2) is constant
    adaptive = MAX_STEP_PROB / (2.0 * lam_l2)
    return adaptive if dt is None else min(float(dt), adaptive)


def _break_tie(w1: np.ndarray, draws: np.ndarray) -> np.ndarray:
    """Nudge exactly balanced weights off the unstable fixed point."""
    tied = np.abs(w1 - 0.5) < TIE_EPS
    if not tied.any():
        return w1
    sign = np.where(draws < 0.5, 1.0, -1.0)
    return np.where(tied, 0.5 + sign * TIE_EPS, w1)


def _run_pairs(w0: np.ndarray, lam_l2: float, dt: float, uniforms: UniformBlocks,
               record_every: int | None = None, checkpoints: np.ndarray | None = None):
    """Vectorised two-packet runs. Each row draws from its own stream."""
    n = w0.size
    w1 = w0.astype(float).copy()
    rows = np.arange(n)
    interior = (w1 > 0) & (w1 < 1)
    draws = np.full(n, 1.0)
    if interior.any():
        draws[interior] = uniforms.next(rows[interior])
    w1 = np.where(interior, _break_tie(w1, draws), w1)
    jumps = np.zeros(n, dtype=np.int64)
    t_final = np.zeros(n)
    done = np.maximum(w1, 1.0 - w1) > 1.0 - WIN_THRESHOLD
    guard = GUARD_FACTOR / (2.0 * lam_l2)
    max_steps = int(math.ceil(guard / dt))
    path = [] if record_every else None
    marks = np.zeros((0, n)) if checkpoints is None else np.empty((len(checkpoints), n))
    mark_steps = [] if checkpoints is None else [int(round(t / dt)) for t in checkpoints]
    if path is not None:
        path.append((0.0, w1.copy(), np.zeros(n, dtype=bool)))
    step = 0
    for i, ms in enumerate(mark_steps):
        if ms == 0:
            marks[i] = w1
    while not done.all():
        if step >= max_steps:
            raise CollapseError(f"no winner after t = {guard:.6g} (guard {GUARD_FACTOR}/(2 Lambda L^2))")
        act = rows[~done]
        old = w1[act]
        new = _rk4_w1(old, lam_l2, dt)
        # trapezoidal rate over the drift step keeps the Bernoulli bias O(dt^2)
        prob = lam_l2 * (old * (1 - old) + new * (1 - new)) * dt
        hit = uniforms.next(act) < prob
        new = np.where(hit, 1.0 - new, new)
        w1[act] = np.clip(new, 0.0, 1.0)
        jumps[act] += hit
        step += 1
        t = step * dt
        fin = act[np.maximum(w1[act], 1.0 - w1[act]) > 1.0 - WIN_THRESHOLD]
        done[fin] = True
        t_final[fin] = t
        if path is not None and (step % record_every == 0 or done.all()):
            flags = np.zeros(n, dtype=bool)
            flags[act] = hit
            path.append((t, w1.copy(), flags))
        for i, ms in enumerate(mark_steps):
            if ms == step:
                marks[i] = w1
    for i, ms in enumerate(mark_steps):
        if ms > step:
            marks[i] = w1
    return w1, jumps, t_final, path, marks


def simulate_collapse(s0: WeightState, dt: float | None, rng: RngStream) -> CollapseResult:
    """Run one two-packet collapse until a weight exceeds ``1 - 1e-6``.

    Returns the winning packet index (0-based), the number of swaps and the
    full weight path. An exactly balanced start is nudged by ``1e-6`` in a
    direction drawn from ``rng``.
    """
    if s0.weights.size != 2:
        raise ValueError("simulate_collapse handles two packets")
    lam_l2 = s0.rate_scale
    if lam_l2 <= 0:
        raise ValueError("collapse needs Lambda L^2 > 0")
    h = _step_size(lam_l2, dt)
    uniforms = UniformBlocks([rng])
    w1, jumps, t_final, path, _ = _run_pairs(np.array([s0.weights[0]]), lam_l2, h, uniforms,
                                             record_every=1)
    rec = CollapsePath([p[0] for p in path], [float(p[1][0]) for p in path],
                       [bool(p[2][0]) for p in path])
    winner = 0 if w1[0] > 0.5 else 1
    return CollapseResult(winner, int(jumps[0]), float(t_final[0]), rec)


@dataclass
class CollapseEnsemble:
    winners: np.ndarray
    n_jumps: np.ndarray
    t_final: np.ndarray
    checkpoint_times: np.ndarray
    checkpoint_w1: np.ndarray

    def winner_frequencies(self, n_packets: int = 2) -> np.ndarray:
        return np.bincount(self.winners, minlength=n_packets) / self.winners.size

    def mean_jumps(self) -> float:
        return float(self.n_jumps.mean())

    def jump_time_correlation(self) -> float:
        """Pearson correlation of jump count and finishing time.

        Zero when either quantity does not vary across the ensemble.
        """
        a, b = self.n_jumps.astype(float), self.t_final
        if a.std() == 0 or b.std() == 0:
            return 0.0
        return float(np.corrcoef(a, b)[0, 1])

    def martingale_table(self) -> list[dict]:
        n = self.checkpoint_w1.shape[1]
        out = []
        for t, row in zip(self.checkpoint_times, self.checkpoint_w1):
            out.append({"t": float(t), "mean_w1": float(row.mean()),
                        "sem": float(row.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0})
        return out


def _collapse_chunk(task):
    w0, lam_l2, h, seed, ids, checkpoints = task
    uniforms = UniformBlocks([RngStream(seed, i) for i in ids])
    w1, jumps, t_final, _, marks = _run_pairs(np.full(len(ids), w0), lam_l2, h, uniforms,
                                              checkpoints=checkpoints)
    return np.where(w1 > 0.5, 0, 1), jumps, t_final, marks


def collapse_ensemble(s0: WeightState, n_runs: int, seed: int, dt: float | None = None,
                      checkpoints=None, workers: int | None = None,
                      chunk: int = 4 * DEFAULT_CHUNK) -> CollapseEnsemble:
    """Independent two-packet runs; run ``i`` uses stream ``(seed, i)``."""
    lam_l2 = s0.rate_scale
    h = _step_size(lam_l2, dt)
    cps = None if checkpoints is None else np.asarray(checkpoints, dtype=float)
    tasks = [(float(s0.weights[0]), lam_l2, h, seed, list(r), cps) for r in chunk_ranges(n_runs, chunk)]
    parts = run_chunks(_collapse_chunk, tasks, workers)
    winners = np.concatenate([p[0] for p in parts])
    jumps = np.concatenate([p[1] for p in parts])
    t_final = np.concatenate([p[2] for p in parts])
    marks = np.concatenate([p[3] for p in parts], axis=1) if cps is not None else np.zeros((0, n_runs))
    return CollapseEnsemble(winners, jumps, t_final,
                            np.zeros(0) if cps is None else cps, marks)


def mean_jump_formula(w0: float) -> float:
    """Expected number of swaps, ``(1/2) ln(1 / |w1 - w2|)``."""
    gap = abs(2.0 * w0 - 1.0)
    if gap == 0.0:
        return math.inf
    return 0.5 * math.log(1.0 / gap)
