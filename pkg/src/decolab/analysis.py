"""Reductions over trajectory records and order-of-magnitude scale
estimates in SI units."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .localization import LocalizationParams, TrajectoryRecord

HBAR_SI = 1.0546e-34
MIN_LANGEVIN_TRAJ = 500
ENVELOPE_FLOOR = 1e-4


class AnalysisError(ValueError):
    """Input cannot support the requested fit."""


@dataclass(frozen=True)
class ScaleInput:
    inertia: float
    lambda_loc: float
    hbar: float = HBAR_SI

    def __post_init__(self):
        for name in ("inertia", "lambda_loc", "hbar"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise AnalysisError(f"{name} must be positive, got {v}")


@dataclass(frozen=True)
class PointerScales:
    dx: float
    dp: float
    t_loc: float


def pointer_scales(s: ScaleInput) -> PointerScales:
    """Width, momentum spread and approach time of the pointer state."""
    m, lam, hbar = s.inertia, s.lambda_loc, s.hbar
    return PointerScales(
        (hbar / (m * lam)) ** 0.25,
        (hbar**3 * m * lam) ** 0.25,
        math.sqrt(m / (hbar * lam)),
    )


def chaos_margin(s: ScaleInput, lyapunov: float) -> tuple[float, bool]:
    """``lyapunov * t_loc`` and whether it stays below one."""
    if lyapunov < 0:
        raise AnalysisError("lyapunov rate must be non-negative")
    ratio = lyapunov * pointer_scales(s).t_loc
    return ratio, ratio < 1.0


def within_decade(value: float, reference: float) -> bool:
    return abs(math.log10(value / reference)) <= 1.0


@dataclass
class ScaleRow:
    name: str
    inertia: float
    lambda_loc: float
    lyapunov: float | None = None
    reference: dict | None = None

    def evaluate(self, hbar: float = HBAR_SI) -> dict:
        sc = pointer_scales(ScaleInput(self.inertia, self.lambda_loc, hbar))
        row = {"name": self.name, "inertia": self.inertia, "lambda_loc": self.lambda_loc,
               "dx": sc.dx, "dp": sc.dp, "t_loc": sc.t_loc, "dx_dp_over_hbar": sc.dx * sc.dp / hbar}
        if self.lyapunov is not None:
            ratio, ok = chaos_margin(ScaleInput(self.inertia, self.lambda_loc, hbar), self.lyapunov)
            row["lyapunov"] = self.lyapunov
            row["lyapunov_t_loc"] = ratio
            row["localizes"] = ok
        if self.reference:
            row["reference"] = self.reference
            row["within_decade"] = {k: within_decade(row[k], v) for k, v in self.reference.items()}
        return row


DAY = 86400.0
HYPERION_INERTIA = 5e18 * 135e3**2

SCALE_TABLE = (
    ScaleRow("air", 1e-3, 1e41, reference={"dx": 1e-18, "dp": 1e-16, "t_loc": 1e-5}),
    ScaleRow("photons", 1e-3, 1e28, reference={"dx": 1e-15, "dp": 1e-19, "t_loc": 1e2}),
    ScaleRow("cmb", 1e-3, 1e10, reference={"dx": 1e-10, "dp": 1e-24, "t_loc": 1e10}),
    ScaleRow("hyperion", HYPERION_INERTIA, 1e51, lyapunov=1.0 / (100 * DAY),
             reference={"dx": 1e-29, "dp": 1e-6, "t_loc": 10 * DAY, "lyapunov_t_loc": 0.1}),
)


@dataclass
class LangevinFit:
    sigma_p: float
    r_squared: float
    times: np.ndarray
    variance: np.ndarray

    def to_dict(self) -> dict:
        return {"sigma_p": self.sigma_p, "sigma_p_squared": self.sigma_p**2, "r_squared": self.r_squared}


def _r_squared(y: np.ndarray, fit: np.ndarray) -> float:
    ss_tot = float(((y - y.mean()) ** 2).sum())
    ss_res = float(((y - fit) ** 2).sum())
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)


def langevin_fit(records, min_traj: int = MIN_LANGEVIN_TRAJ) -> LangevinFit:
    """Least-squares fit of ``Var[<p>](t) = sigma_p^2 t`` through the origin,
    the variance taken across the ensemble at each recorded time."""
    records = list(records)
    if len(records) < min_traj:
        raise AnalysisError(f"need at least {min_traj} trajectories, got {len(records)}")
    t = np.asarray(records[0].times, dtype=float)
    if any(len(r.times) != len(t) for r in records):
        raise AnalysisError("records have different time grids")
    p = np.stack([r.mean_p for r in records])
    var = p.var(axis=0)
    slope = float((t * var).sum() / (t * t).sum())
    slope = max(slope, 0.0)
    return LangevinFit(math.sqrt(slope), _r_squared(var, slope * t), t, var)


@dataclass
class LocalizationFit:
    t_loc_measured: float
    r_squared: float
    window: tuple

    def to_dict(self) -> dict:
        return {"t_loc_measured": self.t_loc_measured, "r_squared": self.r_squared,
                "window": list(self.window)}


def first_jump_free_window(record: TrajectoryRecord) -> slice:
    jumps = np.flatnonzero(record.jumped[1:]) + 1
    end = int(jumps[0]) if jumps.size else len(record.times)
    return slice(0, end)


def localization_fit(record: TrajectoryRecord, params: LocalizationParams,
                     min_points: int = 5) -> LocalizationFit:
    """Exponential time constant of ``|Delta x^2 - pointer value|`` over the
    first jump-free window.

    The deviation can oscillate while it decays, so the fit uses its
    running upper envelope (maximum over the remaining window) and stops
    where the envelope falls to a small fraction of the pointer variance.
    """
    w = first_jump_free_window(record)
    t = np.asarray(record.times[w], dtype=float)
    if t.size < min_points:
        raise AnalysisError("no jump-free window long enough to fit")
    dev = np.abs(np.asarray(record.var_x[w]) - params.pointer_var_x)
    env = np.maximum.accumulate(dev[::-1])[::-1]
    keep = env > ENVELOPE_FLOOR * params.pointer_var_x
    if keep.sum() < min_points:
        raise AnalysisError("deviation from the pointer width is already below the fit floor")
    t, y = t[keep], np.log(env[keep])
    slope, icept = np.polyfit(t, y, 1)
    if slope >= 0:
        raise AnalysisError("deviation does not decay in the jump-free window")
    return LocalizationFit(float(-1.0 / slope), _r_squared(y, slope * t + icept), (float(t[0]), float(t[-1])))


@dataclass
class GapStats:
    n_gaps: int
    n_recovered: int
    fraction: float

    def to_dict(self) -> dict:
        return {"n_gaps": self.n_gaps, "n_recovered": self.n_recovered, "fraction": self.fraction}


def gap_recovery(records, params: LocalizationParams, min_gap_tloc: float = 3.0,
                 tol: float = 0.05) -> GapStats:
    """Among jump-free stretches lasting at least ``min_gap_tloc``
    localization times, count those whose variances sit within ``tol``
    (relative) of the pointer values at the end of the stretch."""
    n = rec = 0
    vx, vp = params.pointer_var_x, params.pointer_var_p
    for r in records:
        marks = np.flatnonzero(r.jumped)
        for a, b in zip(marks[:-1], marks[1:]):
            if r.times[b] - r.times[a] < min_gap_tloc * params.t_loc:
                continue
            n += 1
            i = b - 1
            if abs(r.var_x[i] / vx - 1) <= tol and abs(r.var_p[i] / vp - 1) <= tol:
                rec += 1
    return GapStats(n, rec, rec / n if n else math.nan)


def decay_rate_fit(times, values) -> tuple[float, float]:
    """Rate and R^2 of a log-linear fit to a decaying positive series."""
    t = np.asarray(times, dtype=float)
    y = np.log(np.asarray(values, dtype=float))
    slope, icept = np.polyfit(t, y, 1)
    return float(-slope), _r_squared(y, slope * t + icept)
