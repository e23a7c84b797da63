"""Random sector vectors, real-time evolution and overlap sequences.

The initial vectors live in one magnetization sector; because the Heisenberg
Hamiltonian conserves ``S^z_tot`` the evolution never leaves it, so every
state is stored in sector coordinates.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numba import njit

from .spin_model import SectorBasis, SectorHamiltonian

# Stream tags keep independent RNG families apart for the same (seed, r, q).
STREAM_FTQK = 0
STREAM_FTLM = 1
STREAM_NOISE = 2

DEFAULT_STEP_TOL = 1e-12
_MAX_KRYLOV = 60


class PropagationError(RuntimeError):
    pass


def _rng(*keys: int) -> np.random.Generator:
    # SeedSequence wants non-negative entropy; sector labels can be negative.
    entropy = [int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


@dataclass(frozen=True)
class RandomVectorSpec:
    seed: int
    r_index: int
    q: int
    stream: int = STREAM_FTQK


def random_sector_vector(spec: RandomVectorSpec, basis: SectorBasis) -> np.ndarray:
    """Unit-norm complex Gaussian vector in sector coordinates.

    Deterministic in ``(seed, stream, r_index, q)``.
    """
    if basis.dim == 0:
        raise ValueError("empty sector")
    rng = _rng(spec.seed, spec.stream, spec.r_index, spec.q)
    v = rng.standard_normal(basis.dim) + 1j * rng.standard_normal(basis.dim)
    return v / np.linalg.norm(v)


def random_sector_block(seed: int, r_indices, basis: SectorBasis, stream: int = STREAM_FTQK) -> np.ndarray:
    """Stack of :func:`random_sector_vector` columns, one per ``r`` in ``r_indices``."""
    cols = [
        random_sector_vector(RandomVectorSpec(seed, r, basis.q, stream), basis)
        for r in r_indices
    ]
    return np.ascontiguousarray(np.stack(cols, axis=1))


def _matvec(H, X: np.ndarray) -> np.ndarray:
    # H is real; act on the interleaved real/imag view to avoid a complex copy of H.
    Xc = np.ascontiguousarray(X)
    out = H @ Xc.view(np.float64).reshape(Xc.shape[0], -1)
    return np.ascontiguousarray(out).view(np.complex128).reshape(Xc.shape)


def _column_dot(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->j", A.conj(), B)


def _column_real_dot(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    # Re <a_j, b_j> per column, via float views (no conjugate copy)
    n, c = A.shape
    return np.einsum("ijk,ijk->j", A.view(np.float64).reshape(n, c, 2), B.view(np.float64).reshape(n, c, 2))


@njit(cache=True)
def _three_term(W, V, Vprev, bprev):
    """In place ``W -= a V + bprev Vprev`` per column; returns ``(a, |W|)``."""
    n, c = W.shape
    a = np.zeros(c)
    for i in range(n):
        for j in range(c):
            a[j] += V[i, j].real * W[i, j].real + V[i, j].imag * W[i, j].imag
    b2 = np.zeros(c)
    for i in range(n):
        for j in range(c):
            w = W[i, j] - a[j] * V[i, j] - bprev[j] * Vprev[i, j]
            W[i, j] = w
            b2[j] += w.real * w.real + w.imag * w.imag
    return a, np.sqrt(b2)


def evolve_one_step(psi, H_tilde: SectorHamiltonian, tol: float = DEFAULT_STEP_TOL, dt: float = 1.0):
    """Apply ``exp(-i dt H_tilde)`` by Lanczos exponentiation.

    ``psi`` may be a vector or a ``(dim, R)`` block; every column gets its own
    Krylov space, grown until the a-posteriori error estimate
    ``beta_m |[exp(-i dt T_m) e_1]_m|`` of every column is below ``tol``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    psi = np.asarray(psi, dtype=np.complex128)
    single = psi.ndim == 1
    X = np.ascontiguousarray(psi[:, None] if single else psi)
    # H_tilde = A + pi/2 with the spectrum of A inside [-pi/2, pi/2]
    A = H_tilde.centered_matrix
    dim, ncol = X.shape

    norms = np.sqrt(_column_real_dot(X, X))
    safe = np.where(norms > 0, norms, 1.0)
    V = [X / safe]
    alpha, beta = [], []
    m_max = min(_MAX_KRYLOV, dim)
    y = None
    err = np.zeros(ncol)
    for k in range(m_max):
        W = _matvec(A, V[k])
        if k > 0:
            a, b = _three_term(W, V[k], V[k - 1], beta[k - 1])
        else:
            a, b = _three_term(W, V[k], V[k], np.zeros(ncol))
        alpha.append(a)
        beta.append(b)
        # columns whose Krylov space closed stay exact from here on
        closed = b <= 1e-13
        if k >= 4 or k + 1 == dim or closed.all():
            y = _expm_tridiag(np.array(alpha), np.array(beta[:-1]), dt)
            err = b * np.abs(y[-1])
            if np.all(err[~closed] < tol) or k + 1 == dim:
                break
        if closed.any():
            b = np.where(closed, 0.0, b)
            W *= np.where(closed, 0.0, 1.0 / np.where(closed, 1.0, b))
        else:
            W *= 1.0 / b
        beta[k] = b
        V.append(W)
    else:
        if np.any(err >= tol):
            raise PropagationError(
                f"Krylov exponential not converged with {m_max} vectors: max error {err.max():.2e}"
            )
    out = V[0] * y[0]
    for j in range(1, len(alpha)):
        out += V[j] * y[j]
    out *= norms * np.exp(-1j * np.pi / 2 * dt)
    return out[:, 0] if single else out


def _expm_tridiag(alpha: np.ndarray, beta: np.ndarray, dt: float) -> np.ndarray:
    """``exp(-i dt T) e_1`` for a stack of real symmetric tridiagonals.

    ``alpha`` has shape (m, ncol), ``beta`` (m-1, ncol); returns (m, ncol).
    """
    m, ncol = alpha.shape
    T = np.zeros((ncol, m, m))
    idx = np.arange(m)
    T[:, idx, idx] = alpha.T
    if m > 1:
        T[:, idx[:-1], idx[1:]] = beta.T
        T[:, idx[1:], idx[:-1]] = beta.T
    w, U = np.linalg.eigh(T)
    coef = np.exp(-1j * dt * w) * U[:, 0, :]
    return np.einsum("cij,cj->ic", U, coef)


@dataclass(frozen=True, eq=False)
class OverlapSequence:
    """Overlaps ``g_n = <phi0| exp(-i n H_tilde) |phi0>`` for ``n = 0..D``.

    Negative indices follow from ``g_{-n} = conj(g_n)`` and are never stored.
    """

    g: np.ndarray = field(repr=False)
    r_index: int = 0
    q: int = 0
    noise_sigma: float = 0.0

    @property
    def D(self) -> int:
        return self.g.size - 1

    def two_sided(self, n):
        """Value(s) of ``g`` at signed indices ``n`` (``|n| <= D``)."""
        n = np.asarray(n)
        v = self.g[np.abs(n)]
        return np.where(n < 0, v.conj(), v)


def measure_overlaps(phi0, H_tilde: SectorHamiltonian, D: int, tol: float = DEFAULT_STEP_TOL, r_index: int = 0):
    """Overlap sequence(s) by repeated one-step propagation.

    A vector ``phi0`` yields one :class:`OverlapSequence`; a ``(dim, R)``
    block yields a list, column ``i`` tagged with ``r_index + i``.
    """
    if D < 1:
        raise ValueError("D must be at least 1")
    phi0 = np.asarray(phi0, dtype=np.complex128)
    single = phi0.ndim == 1
    Phi = phi0[:, None] if single else phi0
    g = np.empty((D + 1, Phi.shape[1]), dtype=np.complex128)
    g[0] = 1.0
    psi = Phi
    for n in range(1, D + 1):
        psi = evolve_one_step(psi, H_tilde, tol)
        g[n] = _column_dot(Phi, psi)
    seqs = [
        OverlapSequence(g=g[:, i].copy(), r_index=r_index + i, q=H_tilde.q)
        for i in range(Phi.shape[1])
    ]
    return seqs[0] if single else seqs


def inject_noise(seq: OverlapSequence, sigma: float, noise_seed: int) -> OverlapSequence:
    """Add i.i.d. Gaussian noise of std ``sigma`` to Re and Im of ``g_1..g_D``.

    ``g_0`` stays pinned at 1. The noise stream is keyed by
    ``(noise_seed, r, q)``, independent of the vector stream.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return seq
    rng = _rng(noise_seed, STREAM_NOISE, seq.r_index, seq.q)
    D = seq.D
    noise = rng.normal(0.0, sigma, D) + 1j * rng.normal(0.0, sigma, D)
    g = seq.g.copy()
    g[1:] += noise
    total = float(np.hypot(seq.noise_sigma, sigma))
    return replace(seq, g=g, noise_sigma=total)


def write_overlaps_csv(seqs, path) -> None:
    """Sidecar with columns ``n, re, im, r, q, sigma``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "re", "im", "r", "q", "sigma"])
        for s in seqs:
            for n, z in enumerate(s.g):
                w.writerow([n, repr(float(z.real)), repr(float(z.imag)), s.r_index, s.q, repr(s.noise_sigma)])


def read_overlaps_csv(path) -> list[OverlapSequence]:
    """Import overlap sequences, validating ``g_0`` and ``|g_n|`` against ``sigma``."""
    rows: dict[tuple[int, int], list] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            key = (int(rec["r"]), int(rec["q"]))
            rows.setdefault(key, []).append(
                (int(rec["n"]), complex(float(rec["re"]), float(rec["im"])), float(rec["sigma"]))
            )
    return [_validated(r, q, entries) for (r, q), entries in rows.items()]


def write_overlaps_json(seqs, path) -> None:
    payload = [
        {"r": s.r_index, "q": s.q, "sigma": s.noise_sigma, "re": s.g.real.tolist(), "im": s.g.imag.tolist()}
        for s in seqs
    ]
    Path(path).write_text(json.dumps(payload))


def read_overlaps_json(path) -> list[OverlapSequence]:
    out = []
    for rec in json.loads(Path(path).read_text()):
        entries = [
            (n, complex(re, im), rec["sigma"]) for n, (re, im) in enumerate(zip(rec["re"], rec["im"]))
        ]
        out.append(_validated(rec["r"], rec["q"], entries))
    return out


def _validated(r: int, q: int, entries) -> OverlapSequence:
    entries = sorted(entries)
    ns = [e[0] for e in entries]
    if ns != list(range(len(ns))):
        raise ValueError(f"sample (r={r}, q={q}): indices must run 0..D without gaps")
    g = np.array([e[1] for e in entries], dtype=np.complex128)
    sigma = entries[0][2]
    if abs(g[0] - 1) > max(4 * sigma, 1e-12):
        raise ValueError(f"sample (r={r}, q={q}): g_0 = {g[0]} is not 1 within 4 sigma")
    if np.any(np.abs(g) > 1 + 6 * sigma + 1e-12):
        raise ValueError(f"sample (r={r}, q={q}): |g_n| exceeds 1 + 6 sigma")
    return OverlapSequence(g=g, r_index=r, q=q, noise_sigma=sigma)
