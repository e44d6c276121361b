"""Shared numerical building blocks: periodic grids, spectral calculus,
Hermitian eigendecomposition and reproducible random streams."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HERMITIAN_TOL = 1e-10


class NumericsError(ValueError):
    """Raised when an input violates a numerical precondition."""


@dataclass(frozen=True)
class Grid1D:
    """Uniform periodic grid ``x_j = x0 + j*dx`` with a power-of-two size."""

    n_points: int
    dx: float
    x0: float = 0.0

    def __post_init__(self):
        n = int(self.n_points)
        if n < 2 or n & (n - 1):
            raise NumericsError(f"n_points must be a power of two >= 2, got {self.n_points}")
        if not self.dx > 0:
            raise NumericsError(f"dx must be positive, got {self.dx}")
        object.__setattr__(self, "n_points", n)

    @classmethod
    def centered(cls, n_points: int, dx: float) -> "Grid1D":
        """Grid whose middle point (index n/2) sits at the origin."""
        return cls(n_points, dx, -0.5 * n_points * dx)

    @property
    def x(self) -> np.ndarray:
        return self.x0 + self.dx * np.arange(self.n_points)

    @property
    def length(self) -> float:
        return self.n_points * self.dx

    @property
    def center(self) -> float:
        return self.x0 + 0.5 * self.n_points * self.dx

    @property
    def k(self) -> np.ndarray:
        """Angular wavenumbers in FFT ordering."""
        return 2.0 * np.pi * np.fft.fftfreq(self.n_points, d=self.dx)

    def shifted(self, n_cells: int) -> "Grid1D":
        return Grid1D(self.n_points, self.dx, self.x0 + n_cells * self.dx)


def _check_length(v: np.ndarray, grid: Grid1D, axis: int = -1) -> None:
    if v.shape[axis] != grid.n_points:
        raise NumericsError(
            f"vector length {v.shape[axis]} does not match grid size {grid.n_points}"
        )


def spectral_transform(v, inverse: bool = False, axis: int = -1) -> np.ndarray:
    """Unitary (orthonormal) discrete Fourier transform along ``axis``."""
    v = np.asarray(v, dtype=complex)
    if inverse:
        return np.fft.ifft(v, axis=axis, norm="ortho")
    return np.fft.fft(v, axis=axis, norm="ortho")


def spectral_derivative(v, grid: Grid1D, order: int = 1, axis: int = -1) -> np.ndarray:
    """Derivative of periodic samples computed in Fourier space.

    For odd orders the Nyquist coefficient is dropped so that real input
    gives real output.
    """
    if order not in (1, 2):
        raise NumericsError(f"order must be 1 or 2, got {order}")
    v = np.asarray(v, dtype=complex)
    _check_length(v, grid, axis)
    k = grid.k
    if order == 1:
        factor = 1j * k
        if grid.n_points % 2 == 0:
            factor[grid.n_points // 2] = 0.0
    else:
        factor = -(k**2)
    shape = [1] * v.ndim
    shape[axis] = grid.n_points
    return np.fft.ifft(np.fft.fft(v, axis=axis) * factor.reshape(shape), axis=axis)


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    m = np.asarray(m, dtype=complex)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise NumericsError(f"{name} must be square, got shape {m.shape}")
    return m


def hermiticity_defect(m: np.ndarray) -> float:
    return float(np.max(np.abs(m - m.conj().T))) if m.size else 0.0


def fix_phases(vectors: np.ndarray) -> np.ndarray:
    """Rotate each column so that its largest-magnitude entry is real positive.

    Near-ties in magnitude are resolved toward the lowest index.
    """
    vectors = np.array(vectors, dtype=complex, copy=True)
    mags = np.abs(vectors)
    for j in range(vectors.shape[1]):
        col = mags[:, j]
        top = col.max()
        if top == 0:
            continue
        pivot = int(np.argmax(col >= top * (1 - 1e-9)))
        vectors[:, j] *= np.conj(vectors[pivot, j]) / col[pivot]
    return vectors


def hermitian_eig(m, tol: float = HERMITIAN_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition ``m = U diag(w) U^dagger`` with ascending ``w``.

    Raises
    ------
    NumericsError
        If ``m`` is not Hermitian within ``tol``.
    """
    m = as_matrix(m)
    defect = hermiticity_defect(m)
    if defect > tol:
        raise NumericsError(f"matrix is not Hermitian (max |m - m^dagger| = {defect:.3e})")
    w, u = np.linalg.eigh(0.5 * (m + m.conj().T))
    return w, fix_phases(u)


def rng_generator(seed: int, stream_id: int = 0) -> np.random.Generator:
    seq = np.random.SeedSequence(int(seed), spawn_key=(int(stream_id),))
    return np.random.Generator(np.random.PCG64(seq))


@dataclass
class RngStream:
    """Independent random stream identified by ``(seed, stream_id)``.

    Streams with the same identifiers reproduce the same draws no matter
    which process or batch consumes them.
    """

    seed: int
    stream_id: int = 0
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            value = int(getattr(self, name))
            if not 0 <= value < 2**64:
                raise NumericsError(f"{name} must fit in 64 unsigned bits, got {value}")
            setattr(self, name, value)
        self._gen = rng_generator(self.seed, self.stream_id)

    def uniform(self, size=None):
        return self._gen.random(size)

    def gaussian(self, size=None):
        return self._gen.standard_normal(size)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen


def rng_uniform(s: RngStream) -> float:
    return float(s.uniform())


def rng_gaussian(s: RngStream) -> float:
    return float(s.gaussian())


class UniformBlocks:
    """Per-stream uniform draws for batched loops.

    Row ``i`` consumes stream ``i`` strictly in order, with its own cursor,
    so the values a row sees never depend on what other rows do.
    """

    def __init__(self, streams: list[RngStream], block: int = 1024):
        self.streams = streams
        self.block = int(block)
        self._buf = np.empty((len(streams), self.block))
        self._pos = np.full(len(streams), self.block, dtype=np.int64)

    def next(self, rows=None) -> np.ndarray:
        rows = np.arange(len(self.streams)) if rows is None else np.asarray(rows)
        for i in rows[self._pos[rows] == self.block]:
            self._buf[i] = self.streams[i].uniform(self.block)
            self._pos[i] = 0
        vals = self._buf[rows, self._pos[rows]]
        self._pos[rows] += 1
        return vals
