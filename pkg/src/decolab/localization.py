"""Conditioned-state dynamics of a particle continuously localized by its
environment.

Between jumps the state follows a nonlinear, non-Hermitian Schrödinger
equation whose imaginary potential ``-i*hbar*Lambda*((x - <x>)^2 - dx^2)``
squeezes the packet. Jumps ``psi -> (x - <x>) psi / Delta x`` occur at rate
``2*Lambda*Delta x^2``.

All steppers work on a batch of states (shape ``(B, n)``) so that
ensembles are vectorised; a single trajectory is a batch of one and runs
through exactly the same arithmetic.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Grid1D, NumericsError, RngStream, UniformBlocks
from .parallel import DEFAULT_CHUNK, chunk_ranges, run_chunks

MAX_RATE_DT = 0.1
NORM_TOL = 1e-10


class LocalizationError(RuntimeError):
    """Numerical failure during conditioned-state evolution."""


class StabilityError(LocalizationError):
    """The jump probability per step exceeded the allowed bound."""


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class PotentialSpec:
    """External potential ``V(x)``.

    ``variant`` is one of ``free``, ``harmonic`` (frequency ``omega``),
    ``inverted`` (Lyapunov rate ``lyapunov``) or ``sampled`` (values on a
    reference grid, extended periodically).
    """

    variant: str = "free"
    omega: float = 0.0
    lyapunov: float = 0.0
    center: float = 0.0
    values: tuple | None = None
    ref_x0: float = 0.0
    ref_dx: float = 1.0

    def __post_init__(self):
        if self.variant not in ("free", "harmonic", "inverted", "sampled"):
            raise ValueError(f"unknown potential variant {self.variant!r}")
        if self.variant == "sampled":
            if self.values is None:
                raise ValueError("sampled potential needs values")
            vals = np.asarray(self.values, dtype=float)
            if vals.ndim != 1 or not np.all(np.isfinite(vals)):
                raise ValueError("sampled potential values must be a finite real 1D array")
            object.__setattr__(self, "values", tuple(vals.tolist()))

    @classmethod
    def free(cls):
        return cls("free")

    @classmethod
    def harmonic(cls, omega: float, center: float = 0.0):
        return cls("harmonic", omega=float(omega), center=float(center))

    @classmethod
    def inverted(cls, lyapunov: float, center: float = 0.0):
        return cls("inverted", lyapunov=float(lyapunov), center=float(center))

    @classmethod
    def sampled(cls, values, grid: Grid1D):
        return cls("sampled", values=tuple(np.asarray(values, dtype=float)), ref_x0=grid.x0, ref_dx=grid.dx)

    @property
    def is_zero(self) -> bool:
        return self.variant == "free" or (
            self.variant == "harmonic" and self.omega == 0
        ) or (self.variant == "inverted" and self.lyapunov == 0)

    def curvature(self, mass: float) -> float:
        """Second derivative of a quadratic potential."""
        if self.variant == "harmonic":
            return mass * self.omega**2
        if self.variant == "inverted":
            return -mass * self.lyapunov**2
        if self.variant == "free":
            return 0.0
        raise ValueError("sampled potentials have no single curvature")

    def evaluate(self, x, mass: float) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.variant == "free":
            return np.zeros_like(x)
        if self.variant in ("harmonic", "inverted"):
            return 0.5 * self.curvature(mass) * (x - self.center) ** 2
        vals = np.asarray(self.values)
        idx = np.rint((x - self.ref_x0) / self.ref_dx).astype(np.int64) % vals.size
        return vals[idx]

    def to_dict(self) -> dict:
        d = {"variant": self.variant}
        if self.variant == "harmonic":
            d.update(omega=self.omega, center=self.center)
        elif self.variant == "inverted":
            d.update(lyapunov=self.lyapunov, center=self.center)
        elif self.variant == "sampled":
            d.update(values=list(self.values), ref_x0=self.ref_x0, ref_dx=self.ref_dx)
        return d


@dataclass(frozen=True)
class LocalizationParams:
    mass: float = 1.0
    lambda_loc: float = 1.0
    dt: float | None = None
    potential: PotentialSpec = field(default_factory=PotentialSpec.free)
    hbar: float = 1.0
    recenter: bool = True

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError("mass must be positive")
        if self.lambda_loc < 0:
            raise ValueError("lambda_loc must be non-negative")
        if not self.hbar > 0:
            raise ValueError("hbar must be positive")
        if self.dt is None:
            if self.lambda_loc == 0:
                raise ValueError("dt must be given when lambda_loc = 0")
            object.__setattr__(self, "dt", self.t_loc / 200.0)
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def t_loc(self) -> float:
        """Localization time ``sqrt(M / (hbar * Lambda))``."""
        if self.lambda_loc == 0:
            return math.inf
        return math.sqrt(self.mass / (self.hbar * self.lambda_loc))

    @property
    def pointer_omega(self) -> complex:
        """Complex frequency ``sqrt(2 hbar Lambda / (i M))`` with Re > 0."""
        mag = math.sqrt(2.0 * self.hbar * self.lambda_loc / self.mass)
        return mag * complex(math.cos(-math.pi / 4), math.sin(-math.pi / 4))

    @property
    def pointer_var_x(self) -> float:
        return self.hbar / (2.0 * self.mass * self.pointer_omega.real)

    @property
    def pointer_var_p(self) -> float:
        a = self.mass * self.pointer_omega / (2.0 * self.hbar)
        return self.hbar**2 * abs(a) ** 2 / a.real

    def replace(self, **changes) -> "LocalizationParams":
        d = dict(mass=self.mass, lambda_loc=self.lambda_loc, dt=self.dt,
                 potential=self.potential, hbar=self.hbar, recenter=self.recenter)
        d.update(changes)
        return LocalizationParams(**d)


# ---------------------------------------------------------------------------
# states


@dataclass
class WaveFunction:
    """Unit-norm amplitudes on a periodic grid.

    The vector norm ``sum |psi_j|^2`` is one. ``momentum_offset`` is a
    Galilean frame offset: the physical state is
    ``exp(i*q*x/hbar) * amplitudes`` with ``q = momentum_offset``.
    """

    amplitudes: np.ndarray
    grid: Grid1D
    momentum_offset: float = 0.0

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=complex)
        if self.amplitudes.shape != (self.grid.n_points,):
            raise NumericsError(
                f"amplitudes shape {self.amplitudes.shape} does not match grid size {self.grid.n_points}"
            )

    @classmethod
    def from_function(cls, fn, grid: Grid1D) -> "WaveFunction":
        amps = np.asarray(fn(grid.x), dtype=complex)
        return cls(amps / np.linalg.norm(amps), grid)

    @classmethod
    def gaussian(cls, grid: Grid1D, center: float = 0.0, sigma: float = 1.0,
                 momentum: float = 0.0, hbar: float = 1.0) -> "WaveFunction":
        """Gaussian packet with position standard deviation ``sigma``."""
        x = grid.x
        amps = np.exp(-((x - center) ** 2) / (4 * sigma**2) + 1j * momentum * x / hbar)
        return cls(amps / np.linalg.norm(amps), grid)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def normalized(self) -> "WaveFunction":
        return WaveFunction(self.amplitudes / self.norm, self.grid, self.momentum_offset)

    def physical_amplitudes(self, hbar: float = 1.0) -> np.ndarray:
        if self.momentum_offset == 0:
            return self.amplitudes.copy()
        return self.amplitudes * np.exp(1j * self.momentum_offset * self.grid.x / hbar)

    def moments(self, hbar: float = 1.0) -> dict:
        mx, vx, mp, vp = _moments(self.amplitudes[None, :], np.array([self.grid.x0]),
                                  np.array([self.momentum_offset]), self.grid.dx, hbar)
        return {"mean_x": float(mx[0]), "var_x": float(vx[0]),
                "mean_p": float(mp[0]), "var_p": float(vp[0])}

    def mean_x(self) -> float:
        return self.moments()["mean_x"]

    def var_x(self) -> float:
        return self.moments()["var_x"]

    def mean_p(self, hbar: float = 1.0) -> float:
        return self.moments(hbar)["mean_p"]

    def var_p(self, hbar: float = 1.0) -> float:
        return self.moments(hbar)["var_p"]

    def on_grid(self, grid: Grid1D, hbar: float = 1.0) -> np.ndarray:
        """Physical amplitudes mapped onto ``grid`` (same spacing, integer shift)."""
        if grid.n_points != self.grid.n_points or not math.isclose(grid.dx, self.grid.dx):
            raise NumericsError("target grid must share size and spacing")
        shift = (self.grid.x0 - grid.x0) / grid.dx
        cells = int(round(shift))
        if abs(shift - cells) > 1e-6:
            raise NumericsError("grids are not aligned on whole cells")
        return np.roll(self.physical_amplitudes(hbar), cells)


# ---------------------------------------------------------------------------
# batched kernels


def _rel_positions(n: int, dx: float) -> np.ndarray:
    """Coordinates measured from the grid centre."""
    return dx * (np.arange(n) - n // 2)


def _position_moments(psi: np.ndarray, x0: np.ndarray, dx: float):
    n = psi.shape[1]
    rel = _rel_positions(n, dx)
    prob = psi.real**2 + psi.imag**2
    total = prob.sum(axis=1)
    m_rel = (prob * rel).sum(axis=1) / total
    var = (prob * (rel[None, :] - m_rel[:, None]) ** 2).sum(axis=1) / total
    centre = x0 + dx * (n // 2)
    return centre + m_rel, var, m_rel


def _momentum_moments(psi: np.ndarray, q: np.ndarray, dx: float, hbar: float):
    n = psi.shape[1]
    k = 2.0 * np.pi * np.fft.fftfreq(n, d=dx)
    phi = np.fft.fft(psi, axis=1)
    prob = phi.real**2 + phi.imag**2
    total = prob.sum(axis=1)
    mk = (prob * k).sum(axis=1) / total
    vk = (prob * (k[None, :] - mk[:, None]) ** 2).sum(axis=1) / total
    return hbar * (mk + q), hbar**2 * vk, mk


def _moments(psi, x0, q, dx, hbar):
    mx, vx, _ = _position_moments(psi, x0, dx)
    mp, vp, _ = _momentum_moments(psi, q, dx, hbar)
    return mx, vx, mp, vp


class _Batch:
    """Mutable batch of states sharing grid size and spacing."""

    def __init__(self, psi, x0, q, dx, params: LocalizationParams, comoving_potential=False):
        self.psi = np.array(psi, dtype=complex)
        self.x0 = np.array(x0, dtype=float)
        self.q = np.array(q, dtype=float)
        self.dx = float(dx)
        self.n = self.psi.shape[1]
        self.params = params
        self.comoving_potential = comoving_potential
        self.k = 2.0 * np.pi * np.fft.fftfreq(self.n, d=self.dx)
        self.rel = _rel_positions(self.n, self.dx)
        self._kin = self._kinetic_factor(self.q)

    def _kinetic_factor(self, q):
        p = self.params
        kq = self.k[None, :] + q[:, None]
        return np.exp(-0.5j * p.dt * p.hbar * kq**2 / (2.0 * p.mass))

    def heff(self, rows, var, dt=None):
        """One Strang step on the selected rows with frozen moments.

        The damping is centred on ``<x>`` after the first kinetic half-step,
        where it acts, so a moving packet is not dragged back by a lagging
        centre."""
        p = self.params
        psi = self.psi[rows]
        if dt is None:
            dt = p.dt
            kin = self._kin[rows]
        else:
            kq = self.k[None, :] + self.q[rows][:, None]
            kin = np.exp(-0.5j * dt * p.hbar * kq**2 / (2.0 * p.mass))
        psi = np.fft.ifft(np.fft.fft(psi, axis=1) * kin, axis=1)
        prob = psi.real**2 + psi.imag**2
        m_mid = (prob * self.rel).sum(axis=1) / prob.sum(axis=1)
        d = self.rel[None, :] - m_mid[:, None]
        expo = -dt * p.lambda_loc * (d**2 - var[:, None])
        if not p.potential.is_zero:
            if self.comoving_potential:
                v = 0.5 * p.potential.curvature(p.mass) * d**2
            else:
                centre = self.x0[rows] + self.dx * (self.n // 2)
                v = p.potential.evaluate(centre[:, None] + self.rel[None, :], p.mass)
            expo = expo - 1j * dt * v / p.hbar
        psi = psi * np.exp(expo)
        psi = np.fft.ifft(np.fft.fft(psi, axis=1) * kin, axis=1)
        norm = np.sqrt((psi.real**2 + psi.imag**2).sum(axis=1))
        self.psi[rows] = psi / norm[:, None]

    def jump(self, rows, m_rel, var):
        d = self.rel[None, :] - m_rel[:, None]
        psi = d * self.psi[rows] / np.sqrt(var)[:, None]
        norm = np.sqrt((psi.real**2 + psi.imag**2).sum(axis=1))
        self.psi[rows] = psi / norm[:, None]

    def recenter(self):
        """Shift rows whose packet drifted more than n/4 cells (or k-bins)."""
        _, _, m_rel = _position_moments(self.psi, self.x0, self.dx)
        cells = np.rint(m_rel / self.dx).astype(np.int64)
        moved = np.abs(cells) > self.n // 4
        for i in np.flatnonzero(moved):
            self.psi[i] = np.roll(self.psi[i], -cells[i])
            self.x0[i] += cells[i] * self.dx
        _, _, mk = _momentum_moments(self.psi, np.zeros_like(self.q), self.dx, 1.0)
        dk = 2.0 * np.pi / (self.n * self.dx)
        bins = np.rint(mk / dk).astype(np.int64)
        boosted = np.abs(bins) > self.n // 8
        for i in np.flatnonzero(boosted):
            j = np.arange(self.n)
            self.psi[i] = self.psi[i] * np.exp(-2j * np.pi * bins[i] * j / self.n)
            self.q[i] += bins[i] * dk
        if boosted.any():
            self._kin[boosted] = self._kinetic_factor(self.q[boosted])


def _check_finite(psi, step, t):
    if not np.all(np.isfinite(psi)):
        raise LocalizationError(f"non-finite amplitudes at step {step} (t = {t:.6g})")


# ---------------------------------------------------------------------------
# single-state operations


def _single_batch(psi: WaveFunction, params, comoving=False) -> _Batch:
    return _Batch(psi.amplitudes[None, :], [psi.grid.x0], [psi.momentum_offset],
                  psi.grid.dx, params, comoving)


def _from_batch(b: _Batch, i: int, n_points: int) -> WaveFunction:
    return WaveFunction(b.psi[i].copy(), Grid1D(n_points, b.dx, float(b.x0[i])), float(b.q[i]))


def jump_rate(psi: WaveFunction, params: LocalizationParams) -> float:
    """Jump rate ``2 * Lambda * Delta x^2`` of the current state."""
    return 2.0 * params.lambda_loc * psi.var_x()


def heff_step(psi: WaveFunction, params: LocalizationParams, step: int = 0) -> WaveFunction:
    b = _single_batch(psi, params)
    _, var, m_rel = _position_moments(b.psi, b.x0, b.dx)
    b.heff(np.array([0]), var)
    _check_finite(b.psi, step, step * params.dt)
    return _from_batch(b, 0, psi.grid.n_points)


def apply_jump(psi: WaveFunction) -> WaveFunction:
    """Localizing jump ``(x - <x>) psi / Delta x``."""
    amps = psi.amplitudes[None, :]
    _, var, m_rel = _position_moments(amps, np.array([psi.grid.x0]), psi.grid.dx)
    if math.sqrt(var[0]) < 1e-14:
        raise LocalizationError("state already point-localized")
    d = _rel_positions(psi.grid.n_points, psi.grid.dx) - m_rel[0]
    out = d * psi.amplitudes
    return WaveFunction(out / np.linalg.norm(out), psi.grid, psi.momentum_offset)


def default_grid(params: LocalizationParams, n_points: int = 256, cells_per_width: float = 8.0) -> Grid1D:
    """Centred grid resolving the pointer width with ``cells_per_width`` cells."""
    width = math.sqrt(params.pointer_var_x)
    return Grid1D.centered(n_points, width / cells_per_width)


def pointer_state(params: LocalizationParams, grid: Grid1D | None = None,
                  center: float | None = None) -> WaveFunction:
    """Attractor Gaussian ``exp(-M*omega*x^2 / (2*hbar))`` with complex omega."""
    if params.lambda_loc <= 0:
        raise ValueError("pointer state requires lambda_loc > 0")
    grid = grid or default_grid(params)
    c = grid.center if center is None else center
    a = params.mass * params.pointer_omega / (2.0 * params.hbar)
    amps = np.exp(-a * (grid.x - c) ** 2)
    return WaveFunction(amps / np.linalg.norm(amps), grid)


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class TrajectoryRecord:
    times: np.ndarray
    mean_x: np.ndarray
    mean_p: np.ndarray
    var_x: np.ndarray
    var_p: np.ndarray
    jumped: np.ndarray
    seed: int = 0
    stream_id: int = 0
    snapshots: list = field(default_factory=list, repr=False)

    COLUMNS = ("t", "mean_x", "mean_p", "var_x", "var_p", "jumped")

    def __post_init__(self):
        arrays = [np.asarray(getattr(self, f)) for f in ("times", "mean_x", "mean_p", "var_x", "var_p")]
        if len({a.shape for a in arrays} | {np.asarray(self.jumped).shape}) != 1:
            raise ValueError("record arrays must share length")
        self.jumped = np.asarray(self.jumped, dtype=bool)

    @property
    def jump_times(self) -> np.ndarray:
        return self.times[self.jumped]

    @property
    def n_jumps(self) -> int:
        return int(self.jumped.sum())

    def rows(self):
        for i in range(len(self.times)):
            yield (self.times[i], self.mean_x[i], self.mean_p[i], self.var_x[i],
                   self.var_p[i], int(self.jumped[i]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in self.rows():
                w.writerow([repr(float(v)) for v in row[:-1]] + [row[-1]])

    @classmethod
    def from_csv(cls, path, seed: int = 0, stream_id: int = 0) -> "TrajectoryRecord":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != cls.COLUMNS:
                raise ValueError(f"unexpected CSV header {header}")
            data = np.array([[float(v) for v in row] for row in reader]).reshape(-1, 6)
        return cls(data[:, 0], data[:, 1], data[:, 2], data[:, 3], data[:, 4],
                   data[:, 5] > 0.5, seed, stream_id)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "stream_id": self.stream_id,
            "times": self.times.tolist(),
            "mean_x": self.mean_x.tolist(),
            "mean_p": self.mean_p.tolist(),
            "var_x": self.var_x.tolist(),
            "var_p": self.var_p.tolist(),
            "jump_times": self.jump_times.tolist(),
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryRecord":
        times = np.asarray(d["times"], dtype=float)
        jumped = np.isin(times, np.asarray(d.get("jump_times", []), dtype=float))
        return cls(times, np.asarray(d["mean_x"]), np.asarray(d["mean_p"]),
                   np.asarray(d["var_x"]), np.asarray(d["var_p"]), jumped,
                   int(d.get("seed", 0)), int(d.get("stream_id", 0)))

    @classmethod
    def from_json(cls, path) -> "TrajectoryRecord":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _substeps(b: _Batch, i: int, uniforms: UniformBlocks) -> bool:
    """Advance row ``i`` by one full step in adaptive pieces that keep
    ``r * dt`` within the bound. Returns whether any jump occurred."""
    params = b.params
    rows = np.array([i])
    remaining = params.dt
    jumped = False
    while remaining > 1e-12 * params.dt:
        _, var, m_rel = _position_moments(b.psi[rows], b.x0[rows], b.dx)
        rate = 2.0 * params.lambda_loc * var[0]
        parts = max(1, int(math.ceil(rate * remaining / MAX_RATE_DT)))
        h = remaining / parts
        if uniforms.next(rows)[0] < rate * h:
            b.jump(rows, m_rel, var)
            jumped = True
        else:
            b.heff(rows, var, dt=h)
        remaining -= h
    return jumped


def _run_batch(psi0: WaveFunction, params: LocalizationParams, t_final: float,
               streams: list[RngStream], jumps: bool = True, comoving_potential: bool = False,
               record: bool = True, snapshot_times=()):
    """Evolve ``len(streams)`` copies of ``psi0``; return batch and stacked records.

    ``out["snapshots"]`` holds ``(t, [WaveFunction per row])`` at the steps
    nearest to ``snapshot_times``."""
    if not t_final > 0:
        raise ValueError("t_final must be positive")
    n_steps = int(math.ceil(t_final / params.dt - 1e-9))
    B = len(streams)
    b = _Batch(np.repeat(psi0.amplitudes[None, :], B, axis=0), [psi0.grid.x0] * B,
               [psi0.momentum_offset] * B, psi0.grid.dx, params, comoving_potential)
    rows_all = np.arange(B)
    n_rec = n_steps + 1 if record else 1
    out = {name: np.empty((n_rec, B)) for name in ("mean_x", "mean_p", "var_x", "var_p")}
    out["jumped"] = np.zeros((n_rec, B), dtype=bool)
    mx, vx, mp, vp = _moments(b.psi, b.x0, b.q, b.dx, params.hbar)
    for name, val in zip(("mean_x", "var_x", "mean_p", "var_p"), (mx, vx, mp, vp)):
        out[name][0] = val
    uniforms = UniformBlocks(streams) if jumps and params.lambda_loc > 0 else None
    snap_at = sorted({min(n_steps, max(0, int(round(ts / params.dt)))) for ts in snapshot_times})
    out["snapshots"] = []

    def grab(step):
        out["snapshots"].append((step * params.dt, [_from_batch(b, j, psi0.grid.n_points) for j in range(B)]))

    if snap_at and snap_at[0] == 0:
        grab(0)
    for step in range(n_steps):
        t = step * params.dt
        _, var, m_rel = _position_moments(b.psi, b.x0, b.dx)
        jmask = np.zeros(B, dtype=bool)
        if uniforms is not None:
            prob = 2.0 * params.lambda_loc * var * params.dt
            split = prob > MAX_RATE_DT
            plain = rows_all[~split]
            if plain.size:
                jmask[plain] = uniforms.next(plain) < prob[plain]
            for i in rows_all[split]:
                jmask[i] = _substeps(b, i, uniforms)
            stepped = ~split
        else:
            stepped = np.ones(B, dtype=bool)
        jr = rows_all[jmask & stepped]
        if jr.size:
            b.jump(jr, m_rel[jr], var[jr])
        hr = rows_all[stepped & ~jmask]
        if hr.size == B:
            b.heff(rows_all, var)
        elif hr.size:
            b.heff(hr, var[hr])
        try:
            _check_finite(b.psi, step, t)
        except LocalizationError as exc:
            raise LocalizationError(f"{exc}; trajectory time {t + params.dt:.6g}") from None
        if params.recenter:
            b.recenter()
        if record:
            mx, vx, mp, vp = _moments(b.psi, b.x0, b.q, b.dx, params.hbar)
            i = step + 1
            out["mean_x"][i], out["var_x"][i], out["mean_p"][i], out["var_p"][i] = mx, vx, mp, vp
            out["jumped"][i] = jmask
        elif jmask.any():
            out["jumped"][0] |= jmask
        if step + 1 in snap_at:
            grab(step + 1)
    times = params.dt * np.arange(n_rec)
    return b, times, out


def evolve_trajectory(psi0: WaveFunction, params: LocalizationParams, t_final: float,
                      rng: RngStream, snapshot_times=()) -> tuple[WaveFunction, TrajectoryRecord]:
    """Stochastic conditioned-state trajectory from ``psi0`` up to ``t_final``.

    States at ``snapshot_times`` land in ``record.snapshots``."""
    b, times, out = _run_batch(psi0, params, t_final, [rng], snapshot_times=snapshot_times)
    rec = TrajectoryRecord(times, out["mean_x"][:, 0], out["mean_p"][:, 0], out["var_x"][:, 0],
                           out["var_p"][:, 0], out["jumped"][:, 0], rng.seed, rng.stream_id,
                           [(t, w[0]) for t, w in out["snapshots"]])
    return _from_batch(b, 0, psi0.grid.n_points), rec


def evolve_no_jump(psi0: WaveFunction, params: LocalizationParams,
                   t_final: float, snapshot_times=()) -> tuple[WaveFunction, TrajectoryRecord]:
    """Deterministic evolution under the non-Hermitian step alone, with
    renormalization: the conditioned state between jumps."""
    b, times, out = _run_batch(psi0, params, t_final, [RngStream(0)], jumps=False,
                               snapshot_times=snapshot_times)
    rec = TrajectoryRecord(times, out["mean_x"][:, 0], out["mean_p"][:, 0], out["var_x"][:, 0],
                           out["var_p"][:, 0], out["jumped"][:, 0],
                           snapshots=[(t, w[0]) for t, w in out["snapshots"]])
    return _from_batch(b, 0, psi0.grid.n_points), rec


@dataclass
class EnsembleResult:
    records: list[TrajectoryRecord]
    finals: list[WaveFunction]

    def density_matrix(self, grid: Grid1D, hbar: float = 1.0) -> np.ndarray:
        """Ensemble average of the final projectors on a common grid."""
        rho = np.zeros((grid.n_points, grid.n_points), dtype=complex)
        for wf in self.finals:
            v = wf.on_grid(grid, hbar)
            rho += np.outer(v, v.conj())
        return rho / len(self.finals)

    def stacked(self, name: str) -> np.ndarray:
        return np.stack([getattr(r, name) for r in self.records], axis=1)


def _ensemble_chunk(task):
    psi0, params, t_final, seed, ids, snapshot_times = task
    streams = [RngStream(seed, i) for i in ids]
    b, times, out = _run_batch(psi0, params, t_final, streams, snapshot_times=snapshot_times)
    recs, finals = [], []
    for j, sid in enumerate(ids):
        recs.append(TrajectoryRecord(times, out["mean_x"][:, j].copy(), out["mean_p"][:, j].copy(),
                                     out["var_x"][:, j].copy(), out["var_p"][:, j].copy(),
                                     out["jumped"][:, j].copy(), seed, sid,
                                     [(t, w[j]) for t, w in out["snapshots"]]))
        finals.append(_from_batch(b, j, psi0.grid.n_points))
    return recs, finals


def evolve_ensemble(psi0: WaveFunction, params: LocalizationParams, t_final: float,
                    n_traj: int, seed: int, workers: int | None = None,
                    chunk: int = DEFAULT_CHUNK, first_stream: int = 0,
                    snapshot_times=()) -> EnsembleResult:
    """Independent trajectories with stream ids ``first_stream .. first_stream+n_traj-1``."""
    tasks = [(psi0, params, t_final, seed, list(range(first_stream + r.start, first_stream + r.stop)),
              tuple(snapshot_times))
             for r in chunk_ranges(n_traj, chunk)]
    recs, finals = [], []
    for r, f in run_chunks(_ensemble_chunk, tasks, workers):
        recs.extend(r)
        finals.extend(f)
    return EnsembleResult(recs, finals)


# ---------------------------------------------------------------------------
# chaos probe


@dataclass
class ChaosProbeResult:
    attractor_spread: float
    localized: bool
    reference_spread: float
    spread_ratio: float
    criterion_margin: float
    analytic_spread: float
    diagnostic: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def inverted_attractor_var_x(params: LocalizationParams) -> float:
    """Stationary width of the no-jump dynamics in an inverted quadratic potential.

    For ``psi ~ exp(-a x^2)`` the coefficient obeys
    ``da/dt = Lambda - 2i(hbar/M) a^2 - i M lambda^2 / (2 hbar)``; the stable
    fixed point gives ``Delta x^2 = 1 / (4 Re a)``.
    """
    lam2 = params.potential.lyapunov**2 if params.potential.variant == "inverted" else 0.0
    c = params.lambda_loc - 0.5j * params.mass * lam2 / params.hbar
    a2 = c / (2j * params.hbar / params.mass)
    roots = [np.sqrt(a2), -np.sqrt(a2)]
    a = max(roots, key=lambda z: z.real)
    return float(1.0 / (4.0 * a.real))


def chaos_probe(params: LocalizationParams, grid: Grid1D | None = None,
                threshold: float = 10.0, duration_tloc: float = 10.0) -> ChaosProbeResult:
    """Does jump-free evolution in an inverted potential keep the packet narrow?

    The packet starts as the potential-free pointer state and is evolved
    for ``duration_tloc`` localization times in a frame that co-moves with
    the packet centre (exact for quadratic potentials, where the centre
    decouples from the width). It counts as localized if its final
    ``Delta x`` stays below ``threshold`` times the potential-free pointer
    spread.
    """
    if params.potential.variant != "inverted":
        raise ValueError("chaos_probe needs an inverted potential")
    if params.lambda_loc <= 0:
        raise ValueError("chaos_probe needs lambda_loc > 0")
    lam2 = params.potential.lyapunov**2
    margin = 2.0 * params.hbar * params.lambda_loc / params.mass - lam2
    reference = math.sqrt(params.pointer_var_x)
    analytic = math.sqrt(inverted_attractor_var_x(params))
    if grid is None:
        grid = Grid1D.centered(512, reference / 8.0)
    seed = pointer_state(params, grid)
    diagnostic = ""
    try:
        b, _, out = _run_batch(seed, params.replace(recenter=True), duration_tloc * params.t_loc,
                               [RngStream(0)], jumps=False, comoving_potential=True, record=True)
        spread = float(math.sqrt(out["var_x"][-1, 0]))
        edge = np.abs(b.psi[0, : grid.n_points // 16]) ** 2
        edge_mass = float(edge.sum() + (np.abs(b.psi[0, -grid.n_points // 16:]) ** 2).sum())
        if not math.isfinite(spread):
            raise LocalizationError("non-finite spread")
        if edge_mass > 1e-6:
            diagnostic = f"packet reached the grid edge (edge weight {edge_mass:.2e})"
            localized = False
        else:
            localized = spread < threshold * reference
    except LocalizationError as exc:
        spread = math.inf
        localized = False
        diagnostic = f"divergence: {exc}"
    return ChaosProbeResult(spread, bool(localized), reference, spread / reference, margin,
                            analytic, diagnostic)
