"""Direct integration of the position-localization master equation

    d rho/dt = -i/hbar [H, rho] + Lambda [[x, rho], x]

on a periodic grid. In the position basis the dissipator is diagonal:
element ``rho(x, x')`` is damped at rate ``Lambda (x - x')^2``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .localization import LocalizationParams, WaveFunction
from .numerics import Grid1D, NumericsError, as_matrix

HERM_TOL = 1e-9
TRACE_TOL = 1e-9
POSITIVITY_TOL = 1e-8


class MasterEquationError(RuntimeError):
    """A density-matrix invariant broke during integration."""


@dataclass
class DensityMatrix:
    """Hermitian, unit-trace, positive matrix; ``grid`` is ``None`` for an
    abstract finite basis."""

    entries: np.ndarray
    grid: Grid1D | None = None

    def __post_init__(self):
        self.entries = as_matrix(self.entries, "density matrix")
        if self.grid is not None and self.entries.shape[0] != self.grid.n_points:
            raise NumericsError("density matrix size does not match grid")

    @classmethod
    def from_pure(cls, psi, grid: Grid1D | None = None) -> "DensityMatrix":
        if isinstance(psi, WaveFunction):
            grid = grid or psi.grid
            v = psi.on_grid(grid) if grid is not psi.grid else psi.physical_amplitudes()
        else:
            v = np.asarray(psi, dtype=complex)
        v = v / np.linalg.norm(v)
        return cls(np.outer(v, v.conj()), grid)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def trace(self) -> complex:
        return complex(np.trace(self.entries))

    @property
    def purity(self) -> float:
        return float(np.real(np.vdot(self.entries, self.entries)))

    @property
    def diagonal(self) -> np.ndarray:
        return np.real(np.diag(self.entries)).copy()

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(0.5 * (self.entries + self.entries.conj().T))[0])

    def violations(self, check_positivity: bool = True) -> list[str]:
        m = self.entries
        out = []
        herm = float(np.max(np.abs(m - m.conj().T)))
        if herm > HERM_TOL:
            out.append(f"Hermiticity defect {herm:.3e}")
        tr = abs(np.trace(m) - 1.0)
        if tr > TRACE_TOL:
            out.append(f"trace defect {tr:.3e}")
        if check_positivity:
            lo = self.min_eigenvalue()
            if lo < -POSITIVITY_TOL:
                out.append(f"negative eigenvalue {lo:.3e}")
        return out

    def validate(self, check_positivity: bool = True) -> "DensityMatrix":
        bad = self.violations(check_positivity)
        if bad:
            raise MasterEquationError("; ".join(bad))
        return self

    def diagonal_to_csv(self, path) -> None:
        x = self.grid.x if self.grid is not None else np.arange(self.dim, dtype=float)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("x", "density"))
            for xi, p in zip(x, self.diagonal):
                w.writerow((repr(float(xi)), repr(float(p))))


def trace_distance(a: DensityMatrix, b: DensityMatrix) -> float:
    """Half the trace norm of ``a - b``."""
    ea = a.entries if isinstance(a, DensityMatrix) else as_matrix(a)
    eb = b.entries if isinstance(b, DensityMatrix) else as_matrix(b)
    if ea.shape != eb.shape:
        raise NumericsError(f"shape mismatch {ea.shape} vs {eb.shape}")
    d = ea - eb
    w = np.linalg.eigvalsh(0.5 * (d + d.conj().T))
    return float(min(1.0, 0.5 * np.abs(w).sum()))


class _PositionGenerator:
    """Right-hand side of the master equation on one grid."""

    def __init__(self, grid: Grid1D, params: LocalizationParams):
        self.grid = grid
        self.params = params
        x = grid.x
        self.kin = params.hbar**2 * grid.k**2 / (2.0 * params.mass)
        v = params.potential.evaluate(x, params.mass)
        self.dv = (v[:, None] - v[None, :]) / params.hbar
        self.damp = params.lambda_loc * (x[:, None] - x[None, :]) ** 2

    def __call__(self, rho: np.ndarray) -> np.ndarray:
        kin = self.kin
        h_rho = np.fft.ifft(kin[:, None] * np.fft.fft(rho, axis=0), axis=0)
        rho_h = np.fft.ifft(kin[None, :] * np.fft.fft(rho, axis=1), axis=1)
        return -1j / self.params.hbar * (h_rho - rho_h) - 1j * self.dv * rho - self.damp * rho

    def stable_dt(self) -> float:
        """Step keeping RK4 inside its stability region."""
        spectral = float(self.kin.max()) / self.params.hbar + float(np.abs(self.dv).max())
        return 2.5 / (spectral + float(self.damp.max()) + 1e-300)


def _rk4(f, rho, h):
    k1 = f(rho)
    k2 = f(rho + 0.5 * h * k1)
    k3 = f(rho + 0.5 * h * k2)
    k4 = f(rho + h * k3)
    return rho + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _require_grid(rho: DensityMatrix) -> Grid1D:
    if rho.grid is None:
        raise NumericsError("position-basis density matrix needs a grid")
    if rho.grid.n_points > 256:
        raise NumericsError("position master equation is limited to N <= 256")
    return rho.grid


def lindblad_position_step(rho: DensityMatrix, params: LocalizationParams,
                           dt: float | None = None, check_positivity: bool = True) -> DensityMatrix:
    """One RK4 step of the position-localization master equation."""
    grid = _require_grid(rho)
    h = params.dt if dt is None else dt
    out = DensityMatrix(_rk4(_PositionGenerator(grid, params), rho.entries, h), grid)
    return out.validate(check_positivity)


def evolve_master(rho: DensityMatrix, params: LocalizationParams, t_final: float,
                  max_change: float = 1e-3, check_every: int = 10,
                  checkpoints=None) -> tuple[DensityMatrix, list]:
    """Integrate to ``t_final`` with a fixed step sized for stability and
    ``max|d rho| * dt <= max_change``.

    Returns the final state and ``(t, DensityMatrix)`` pairs at the
    requested checkpoint times.
    """
    grid = _require_grid(rho)
    f = _PositionGenerator(grid, params)
    rate = float(np.abs(f(rho.entries)).max())
    h = min(f.stable_dt(), max_change / rate if rate > 0 else math.inf, t_final)
    n = max(1, int(math.ceil(t_final / h - 1e-12)))
    h = t_final / n
    marks = {max(1, int(round(tc / h))) for tc in (checkpoints or []) if 0 < tc <= t_final + 0.5 * h}
    saved = []
    m = rho.entries.copy()
    for i in range(n):
        m = _rk4(f, m, h)
        state = DensityMatrix(m, grid)
        state.validate(check_positivity=(i + 1) % check_every == 0 or i + 1 == n)
        if i + 1 in marks:
            saved.append(((i + 1) * h, DensityMatrix(m.copy(), grid)))
    return DensityMatrix(m, grid), saved


def double_commutator(x: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """``[[x, rho], x]`` for dense matrices."""
    c = x @ rho - rho @ x
    return c @ x - x @ c
