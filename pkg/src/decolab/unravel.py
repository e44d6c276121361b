"""Jump unravelling of a general finite-dimensional master equation

    d rho/dt = -i/hbar [H, rho]
               + 1/2 sum_{mu,nu} r_{mu nu} (2 F_mu rho F_nu^+ - F_nu^+ F_mu rho - rho F_nu^+ F_mu)

around the current pure state. The operator basis is re-expressed in a
basis where the state is the last unit vector; the channels that do not
annihilate the state become jump operators, everything else is absorbed
into a non-Hermitian effective Hamiltonian.

The batched kernels take states of shape ``(B, N)``; the single-state
functions are batches of one.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.linalg

from .master import DensityMatrix, trace_distance
from .numerics import NumericsError, RngStream, UniformBlocks, as_matrix, hermitian_eig
from .parallel import DEFAULT_CHUNK, chunk_ranges, run_chunks

MODEL_TOL = 1e-10
ZERO_RATE = 1e-12
MAX_JUMP_PROB = 0.1


class UnravellingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# model


def _decode_matrix(rows) -> np.ndarray:
    arr = np.asarray(rows, dtype=float)
    if arr.shape[-1] != 2:
        raise ValueError("complex entries must be [re, im] pairs")
    return arr[..., 0] + 1j * arr[..., 1]


def _encode_matrix(m: np.ndarray) -> list:
    m = np.asarray(m, dtype=complex)
    return np.stack([m.real, m.imag], axis=-1).tolist()


@dataclass
class LindbladModel:
    """Hamiltonian ``H``, orthonormal operator basis ``F`` (shape
    ``(M, N, N)``) and positive semidefinite rate matrix ``r`` (``M x M``)."""

    H: np.ndarray
    F: np.ndarray
    r: np.ndarray
    hbar: float = 1.0

    def __post_init__(self):
        self.H = as_matrix(self.H, "H")
        self.F = np.asarray(self.F, dtype=complex)
        if self.F.ndim == 2:
            self.F = self.F[None]
        self.r = as_matrix(self.r, "r")
        self.validate()

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    def validate(self) -> None:
        n = self.dim
        if self.F.ndim != 3 or self.F.shape[1:] != (n, n):
            raise NumericsError(f"F must have shape (M, {n}, {n}), got {self.F.shape}")
        m = self.F.shape[0]
        if m > n * n:
            raise NumericsError("more basis operators than the operator space dimension")
        if self.r.shape != (m, m):
            raise NumericsError(f"r must be {m}x{m}, got {self.r.shape}")
        if np.max(np.abs(self.H - self.H.conj().T)) > MODEL_TOL:
            raise NumericsError("H is not Hermitian")
        vecs = self.F.reshape(m, -1)
        gram = vecs.conj() @ vecs.T
        if np.max(np.abs(gram - np.eye(m))) > MODEL_TOL:
            raise NumericsError("F operators are not orthonormal under Tr(F^+ F)")
        w, _ = hermitian_eig(self.r, MODEL_TOL)
        if w[0] < -MODEL_TOL:
            raise NumericsError(f"rate matrix is not positive semidefinite (min eigenvalue {w[0]:.3e})")

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {"dim": self.dim, "hbar": self.hbar, "H": _encode_matrix(self.H),
                "F": [_encode_matrix(f) for f in self.F], "r": _encode_matrix(self.r)}

    @classmethod
    def from_dict(cls, d: dict) -> "LindbladModel":
        allowed = {"dim", "hbar", "H", "F", "r"}
        extra = set(d) - allowed
        if extra:
            raise ValueError(f"unknown model keys: {sorted(extra)}")
        model = cls(_decode_matrix(d["H"]), np.stack([_decode_matrix(f) for f in d["F"]]),
                    _decode_matrix(d["r"]), float(d.get("hbar", 1.0)))
        if "dim" in d and int(d["dim"]) != model.dim:
            raise ValueError(f"declared dim {d['dim']} does not match H ({model.dim})")
        return model

    @classmethod
    def from_json(cls, path) -> "LindbladModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    # -- construction helpers ----------------------------------------------

    @classmethod
    def random(cls, dim: int, rng: np.random.Generator, rate_scale: float = 1.0,
               n_ops: int | None = None, hamiltonian_scale: float = 1.0) -> "LindbladModel":
        """Random model with ``Tr r = rate_scale * dim``."""
        m = dim * dim if n_ops is None else int(n_ops)
        z = rng.normal(size=(dim * dim, dim * dim)) + 1j * rng.normal(size=(dim * dim, dim * dim))
        q, _ = np.linalg.qr(z)
        F = q[:, :m].T.reshape(m, dim, dim)
        a = rng.normal(size=(m, m)) + 1j * rng.normal(size=(m, m))
        r = a @ a.conj().T
        r *= rate_scale * dim / np.trace(r).real
        h = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
        H = hamiltonian_scale * (h + h.conj().T) / (2 * math.sqrt(dim))
        return cls(H, F, 0.5 * (r + r.conj().T))

    @classmethod
    def from_jump_operators(cls, H, ops, rates, hbar: float = 1.0) -> "LindbladModel":
        """Diagonal model ``sum_k g_k (L_k rho L_k^+ - {L_k^+ L_k, rho}/2)``.

        The operators are orthonormalized through the Hilbert-Schmidt inner
        product; the rate matrix absorbs the change of basis.
        """
        ops = np.asarray(ops, dtype=complex)
        if ops.ndim == 2:
            ops = ops[None]
        rates = np.atleast_1d(np.asarray(rates, dtype=float))
        m, n = ops.shape[0], ops.shape[1]
        vecs = ops.reshape(m, -1).T
        q, tri = np.linalg.qr(vecs)
        keep = np.abs(np.diag(tri)) > 1e-12
        q, tri = q[:, keep], tri[keep]
        F = q.T.reshape(-1, n, n)
        r = tri @ np.diag(rates) @ tri.conj().T
        return cls(H, F, 0.5 * (r + r.conj().T), hbar)

    # -- dynamics ----------------------------------------------------------

    def rhs(self, rho: np.ndarray) -> np.ndarray:
        F, r = self.F, self.r
        out = -1j / self.hbar * (self.H @ rho - rho @ self.H)
        Frho = np.einsum("mij,jk->mik", F, rho)
        Fd = np.conj(np.transpose(F, (0, 2, 1)))
        out = out + np.einsum("mn,mij,njk->ik", r, Frho, Fd)
        G = np.einsum("mn,nij,mjk->ik", r, Fd, F)
        return out - 0.5 * (G @ rho + rho @ G)

    def superoperator(self) -> np.ndarray:
        """Generator acting on row-major ``vec(rho)``."""
        n = self.dim
        eye = np.eye(n)
        L = -1j / self.hbar * (np.kron(self.H, eye) - np.kron(eye, self.H.T))
        Fd = np.conj(np.transpose(self.F, (0, 2, 1)))
        G = np.einsum("mn,nij,mjk->ik", self.r, Fd, self.F)
        for mu in range(self.F.shape[0]):
            for nu in range(self.F.shape[0]):
                c = self.r[mu, nu]
                if c != 0:
                    L += c * np.kron(self.F[mu], Fd[nu].T)
        L -= 0.5 * (np.kron(G, eye) + np.kron(eye, G.T))
        return L


def integrate_lindblad(model: LindbladModel, rho0, t_final: float, dt: float = 1e-3) -> DensityMatrix:
    """RK4 integration of the general master equation."""
    rho = rho0.entries if isinstance(rho0, DensityMatrix) else as_matrix(rho0)
    n = max(1, int(math.ceil(t_final / dt - 1e-12)))
    h = t_final / n
    f = model.rhs
    for _ in range(n):
        k1 = f(rho)
        k2 = f(rho + 0.5 * h * k1)
        k3 = f(rho + 0.5 * h * k2)
        k4 = f(rho + h * k3)
        rho = rho + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return DensityMatrix(rho).validate()


def exact_step(model: LindbladModel, rho: np.ndarray, dt: float) -> np.ndarray:
    n = model.dim
    prop = scipy.linalg.expm(model.superoperator() * dt)
    return (prop @ rho.reshape(-1)).reshape(n, n)


# ---------------------------------------------------------------------------
# adapted-basis decomposition


@dataclass
class JumpDecomposition:
    """Effective Hamiltonian, jump operators and rates around one state."""

    H_eff: np.ndarray
    jump_ops: list
    rates: np.ndarray
    basis: np.ndarray
    psi: np.ndarray

    def branch_states(self, dt: float, hbar: float = 1.0):
        """Normalized branch states and their probabilities (jumps first, trunk last)."""
        states, probs = [], []
        for J, r in zip(self.jump_ops, self.rates):
            v = J @ self.psi
            states.append(v / np.linalg.norm(v))
            probs.append(r * dt)
        trunk = self.psi + (dt / (1j * hbar)) * (self.H_eff @ self.psi)
        states.append(trunk / np.linalg.norm(trunk))
        probs.append(1.0 - sum(probs))
        return states, np.array(probs)


def householder_to_last(psi: np.ndarray) -> np.ndarray:
    """Unitaries ``B`` with ``B @ psi = e_N`` for a batch of unit vectors."""
    psi = np.atleast_2d(psi)
    n = psi.shape[1]
    last = psi[:, -1]
    mag = np.abs(last)
    phase = np.where(mag > 0, last / np.where(mag > 0, mag, 1.0), 1.0)
    v = psi.copy()
    v[:, -1] += phase
    vv = np.einsum("bi,bi->b", v.conj(), v).real
    P = np.eye(n)[None] - 2.0 * v[:, :, None] * v.conj()[:, None, :] / vv[:, None, None]
    return -np.conj(phase)[:, None, None] * P


@lru_cache(maxsize=16)
def _basis_tables(n: int):
    """Index sets and products of matrix units for dimension ``n``."""
    last = n - 1
    units = np.zeros((n * n, n, n))
    for a in range(n):
        for b in range(n):
            units[a * n + b, a, b] = 1.0
    jump_idx = np.array([a * n + last for a in range(last)], dtype=np.int64)
    state_idx = last * n + last
    live = np.append(jump_idx, state_idx)
    dead = np.array([a * n + b for a in range(n) for b in range(n) if b != last], dtype=np.int64)
    # units[mu]^T @ units[A] for A in live, mu in dead
    prod = np.einsum("mji,ajk->amik", units[dead], units[live])
    return units, jump_idx, state_idx, live, dead, prod


def _decompose_batch(model: LindbladModel, psi: np.ndarray):
    """Batched decomposition in the adapted basis.

    Returns ``(Bmat, H_eff_adapted, rates, vecs)`` where ``vecs[:, :, k]``
    holds the adapted-basis direction of jump ``k`` (unit vector in the
    first ``N-1`` components).
    """
    n = model.dim
    hbar = model.hbar
    units, jump_idx, state_idx, live, dead, prod = _basis_tables(n)
    Bm = householder_to_last(psi)
    Bd = np.conj(np.transpose(Bm, (0, 2, 1)))
    Fa = np.einsum("bij,mjk,bkl->bmil", Bm, model.F, Bd)
    vecF = Fa.reshape(Fa.shape[0], Fa.shape[1], n * n)
    R = np.einsum("bma,mn,bnc->bac", vecF, model.r, vecF.conj())

    block = R[:, jump_idx][:, :, jump_idx]
    block = 0.5 * (block + np.conj(np.transpose(block, (0, 2, 1))))
    w, V = np.linalg.eigh(block)
    if np.any(w < -1e-9 * max(1.0, float(np.abs(w).max(initial=0.0)))):
        raise UnravellingError(f"jump block has negative rate {w.min():.3e}")
    rates = np.where(w < ZERO_RATE, 0.0, w)

    # Annihilator couplings from every channel that does not annihilate the
    # state, including the state projector itself.
    Y = np.einsum("bam,amik->bik", R[:, live][:, :, dead], prod)
    # The cross terms r_{jN} F_j rho arrive once from each ordering of the
    # double sum, hence the factor 2.
    col = np.zeros((psi.shape[0], n), dtype=complex)
    col[:, : n - 1] = -2.0 * R[:, jump_idx, state_idx]
    row = R[:, state_idx, jump_idx]
    Y[:, :, n - 1] += col
    Y[:, n - 1, : n - 1] += row
    total = rates.sum(axis=1)
    Y[:, n - 1, n - 1] += total
    Y -= total[:, None, None] * np.eye(n)[None]
    Ha = np.einsum("bij,jk,bkl->bil", Bm, model.H, Bd)
    Heff_a = Ha - 0.5j * hbar * Y
    return Bm, Heff_a, rates, V


def adapt_and_decompose(model: LindbladModel, psi) -> JumpDecomposition:
    """Jump operators and effective Hamiltonian adapted to ``psi``.

    Everything is returned in the original basis. Channels with rate below
    ``1e-12`` are dropped.
    """
    psi = np.asarray(psi, dtype=complex)
    if psi.shape != (model.dim,):
        raise NumericsError(f"state must have length {model.dim}")
    if abs(np.linalg.norm(psi) - 1.0) > 1e-10:
        raise NumericsError("state must be normalized")
    n = model.dim
    Bm, Heff_a, rates, V = _decompose_batch(model, psi[None])
    Bm, Heff_a, rates, V = Bm[0], Heff_a[0], rates[0], V[0]
    Bd = Bm.conj().T
    jumps, kept = [], []
    for k in range(n - 1):
        if rates[k] <= 0:
            continue
        Ja = np.zeros((n, n), dtype=complex)
        Ja[: n - 1, n - 1] = math.sqrt(rates[k]) * V[:, k]
        jumps.append(Bd @ Ja @ Bm)
        kept.append(rates[k])
    return JumpDecomposition(Bd @ Heff_a @ Bm, jumps, np.array(kept), Bm, psi.copy())


# ---------------------------------------------------------------------------
# stochastic stepping


def _branch_data(model: LindbladModel, psi: np.ndarray):
    """Rates, jump directions and trunk derivative for a batch of states.

    Uses the basis-independent form of the adapted-basis construction:
    the jump block is ``Q K Q`` with ``K = sum r_{mu nu} F_mu psi (F_nu psi)^+``
    and ``Q`` the projector orthogonal to ``psi``; the effective Hamiltonian
    only enters through ``H_eff psi``.
    """
    F, r = model.F, model.r
    f = np.tensordot(psi, F, axes=([1], [2]))  # (B, M, N): F_mu psi
    ev = np.einsum("bi,bmi->bm", psi.conj(), f)
    fT = np.transpose(f, (0, 2, 1))
    K = np.matmul(np.matmul(fT, r), f.conj())
    Kpsi = np.einsum("bij,bj->bi", K, psi)
    psiK = np.einsum("bi,bij->bj", psi.conj(), K)
    kk = np.einsum("bi,bi->b", psi.conj(), Kpsi)
    Kq = (K - psi[:, :, None] * psiK[:, None, :] - Kpsi[:, :, None] * psi.conj()[:, None, :]
          + kk[:, None, None] * psi[:, :, None] * psi.conj()[:, None, :])
    Kq = 0.5 * (Kq + np.conj(np.transpose(Kq, (0, 2, 1))))
    w, V = np.linalg.eigh(Kq)
    if np.any(w < -1e-9 * max(1.0, float(np.abs(w).max(initial=0.0)))):
        raise UnravellingError(f"jump block has negative rate {w.min():.3e}")
    rates = np.where(w < ZERO_RATE, 0.0, w)
    G = _g_operator(model)
    c = ev.conj() @ r.T
    y = psi @ G.T - 2.0 * np.einsum("bm,bmi->bi", c, f)
    y -= psi * np.einsum("bi,bi->b", psi.conj(), y)[:, None]
    heff_psi = psi @ model.H.T - 0.5j * model.hbar * y
    return rates, V, heff_psi


def _g_operator(model: LindbladModel) -> np.ndarray:
    cached = getattr(model, "_g_cache", None)
    if cached is None:
        Fd = np.conj(np.transpose(model.F, (0, 2, 1)))
        cached = np.einsum("mn,nij,mjk->ik", model.r, Fd, model.F)
        model._g_cache = cached
    return cached


def _step_batch(model: LindbladModel, psi: np.ndarray, dt: float, u: np.ndarray):
    """One branch step for each row; returns new states and jump index (-1 for none)."""
    rates, V, heff_psi = _branch_data(model, psi)
    probs = rates * dt
    total = probs.sum(axis=1)
    if np.any(total > MAX_JUMP_PROB):
        raise UnravellingError(
            f"sum r_j dt = {total.max():.3g} exceeds {MAX_JUMP_PROB}; reduce dt"
        )
    cum = np.cumsum(probs, axis=1)
    hit = u[:, None] < cum
    jumped = np.where(hit.any(axis=1), np.argmax(hit, axis=1), -1)
    out = psi + (dt / (1j * model.hbar)) * heff_psi
    rows = np.flatnonzero(jumped >= 0)
    if rows.size:
        out[rows] = V[rows, :, jumped[rows]]
    out /= np.linalg.norm(out, axis=1)[:, None]
    return out, jumped


def branch_step(model: LindbladModel, psi, dt: float, rng: RngStream):
    """Sample one branch: a jump ``J_j psi`` with probability ``r_j dt``,
    otherwise the trunk ``(1 + H_eff dt / (i hbar)) psi``.

    Returns ``(new_state, jump_index_or_None)``. Jump indices label the
    channels in ascending order of rate; zero-rate channels never fire.
    """
    psi = np.asarray(psi, dtype=complex)
    out, jumped = _step_batch(model, psi[None], dt, np.array([rng.uniform()]))
    j = int(jumped[0])
    return out[0], (None if j < 0 else j)


def verify_unravelling(model: LindbladModel, psi, dt: float) -> float:
    """Max-entry gap between the branch-averaged update and an exact
    master-equation step from ``|psi><psi|``."""
    psi = np.asarray(psi, dtype=complex)
    dec = adapt_and_decompose(model, psi)
    states, probs = dec.branch_states(dt, model.hbar)
    rho = np.outer(psi, psi.conj())
    branched = sum(p * np.outer(s, s.conj()) for p, s in zip(probs, states))
    exact = exact_step(model, rho, dt)
    return float(np.max(np.abs((branched - rho) - (exact - rho))))


# ---------------------------------------------------------------------------
# ensembles


def _trajectory_chunk(task):
    model, psi0, dt, n_steps, seed, ids, marks = task
    streams = [RngStream(seed, i) for i in ids]
    uniforms = UniformBlocks(streams)
    psi = np.repeat(np.asarray(psi0, dtype=complex)[None], len(ids), axis=0)
    counts = np.zeros(len(ids), dtype=np.int64)
    snaps = {}
    for step in range(n_steps):
        psi, jumped = _step_batch(model, psi, dt, uniforms.next())
        counts += jumped >= 0
        if step + 1 in marks:
            snaps[step + 1] = np.einsum("bi,bj->ij", psi, psi.conj())
    return psi, counts, snaps


@dataclass
class UnravelEnsemble:
    final_states: np.ndarray
    jump_counts: np.ndarray
    snapshots: dict

    def density_matrix(self) -> DensityMatrix:
        psi = self.final_states
        return DensityMatrix(np.einsum("bi,bj->ij", psi, psi.conj()) / len(psi))


def unravel_ensemble(model: LindbladModel, psi0, t_final: float, dt: float, n_traj: int,
                     seed: int, workers: int | None = None, chunk: int = DEFAULT_CHUNK,
                     checkpoints=()) -> UnravelEnsemble:
    """Run ``n_traj`` unravelled trajectories; snapshots hold ensemble-mean
    density matrices at the requested times."""
    n_steps = max(1, int(round(t_final / dt)))
    marks = {max(1, int(round(t / dt))) for t in checkpoints}
    tasks = [(model, psi0, dt, n_steps, seed, list(r), marks) for r in chunk_ranges(n_traj, chunk)]
    parts = run_chunks(_trajectory_chunk, tasks, workers)
    psi = np.concatenate([p[0] for p in parts])
    counts = np.concatenate([p[1] for p in parts])
    snaps = {}
    for mark in sorted(marks):
        total = sum(p[2][mark] for p in parts)
        snaps[mark * dt] = DensityMatrix(total / n_traj)
    return UnravelEnsemble(psi, counts, snaps)


def ensemble_vs_master(model: LindbladModel, psi0, t_final: float, dt: float, n_traj: int,
                       seed: int, workers: int | None = None) -> dict:
    psi0 = np.asarray(psi0, dtype=complex)
    ens = unravel_ensemble(model, psi0, t_final, dt, n_traj, seed, workers)
    exact = integrate_lindblad(model, np.outer(psi0, psi0.conj()), t_final, dt=min(dt, 1e-3))
    dist = trace_distance(ens.density_matrix(), exact)
    return {"trace_distance": dist, "bound": 5.0 / math.sqrt(n_traj),
            "mean_jumps": float(ens.jump_counts.mean()), "n_traj": n_traj}
