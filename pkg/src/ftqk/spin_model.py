"""Spin-1/2 Heisenberg ring restricted to fixed-magnetization sectors.

Basis states are bit strings stored in ``int64``; bit ``i`` set means site
``i`` carries an up spin. Each sector ``q`` collects the states with
``N/2 + q`` up spins in increasing integer order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .lanczos import LanczosError, lanczos_extremal

DEFAULT_MARGIN = 0.05 * np.pi


@dataclass(frozen=True)
class ChainSpec:
    """Periodic spin-1/2 Heisenberg chain ``H = J sum_i S_i . S_{i+1}``."""

    N: int
    J: float = 1.0

    def __post_init__(self):
        if not isinstance(self.N, (int, np.integer)) or isinstance(self.N, bool):
            raise TypeError(f"N must be an integer, got {self.N!r}")
        if self.N < 4 or self.N % 2:
            raise ValueError(f"N must be even and >= 4, got {self.N}")
        if not self.J > 0:
            raise ValueError(f"J must be positive (antiferromagnetic), got {self.J}")

    @property
    def sectors(self) -> range:
        return range(-self.N // 2, self.N // 2 + 1)

    @property
    def s_max(self) -> int:
        return self.N // 2


def _binomial_table(n: int) -> np.ndarray:
    table = np.zeros((n + 1, n + 2), dtype=np.int64)
    for a in range(n + 1):
        for b in range(a + 1):
            table[a, b] = math.comb(a, b)
    return table


@dataclass(frozen=True, eq=False)
class SectorBasis:
    """All ``N``-bit states with ``N/2 + q`` up spins, in canonical order."""

    N: int
    q: int
    states: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return int(self.states.size)

    @property
    def n_up(self) -> int:
        return self.N // 2 + self.q

    @cached_property
    def _binom(self) -> np.ndarray:
        return _binomial_table(self.N)

    def rank(self, states) -> np.ndarray:
        """Index of each state in this sector (combinadic ranking, O(N) per state).

        The k-th set bit (k = 1, 2, ...) at position p contributes C(p, k).
        States outside the sector give meaningless ranks; callers only pass
        images of in-sector states under popcount-preserving moves.
        """
        s = np.asarray(states, dtype=np.int64)
        idx = np.zeros(s.shape, dtype=np.int64)
        seen = np.zeros(s.shape, dtype=np.int64)
        for p in range(self.N):
            bit = (s >> p) & 1
            seen += bit
            idx += bit * self._binom[p, seen]
        return idx


def enumerate_sector(spec: ChainSpec, q: int) -> SectorBasis:
    """Build the canonical basis of magnetization sector ``q``."""
    N = spec.N
    if int(q) != q or abs(q) > N // 2:
        raise ValueError(f"sector q={q} outside [-{N // 2}, {N // 2}] for N={N}")
    q = int(q)
    n_up = N // 2 + q
    states = _states_with_popcount(N, n_up)
    return SectorBasis(N=N, q=q, states=states)


def _states_with_popcount(N: int, k: int) -> np.ndarray:
    if N <= 26:
        allstates = np.arange(1 << N, dtype=np.int64)
        return allstates[np.bitwise_count(allstates) == k]
    # Gosper's hack; slow but bounded memory.
    dim = math.comb(N, k)
    out = np.empty(dim, dtype=np.int64)
    x = (1 << k) - 1
    for i in range(dim):
        out[i] = x
        if x == 0:
            break
        u = x & -x
        v = x + u
        x = v + (((v ^ x) // u) >> 2)
    return out


def build_sector_hamiltonian(spec: ChainSpec, basis: SectorBasis) -> sp.csr_matrix:
    """Sparse real-symmetric matrix of the Heisenberg ring inside one sector."""
    if basis.N != spec.N:
        raise ValueError("basis built for a different chain length")
    N, J = spec.N, spec.J
    s = basis.states
    dim = basis.dim
    diag = np.zeros(dim)
    rows, cols = [], []
    for i in range(N):
        j = (i + 1) % N
        mask = (1 << i) | (1 << j)
        antiparallel = ((s >> i) & 1) != ((s >> j) & 1)
        diag += np.where(antiparallel, -0.25 * J, 0.25 * J)
        src = np.nonzero(antiparallel)[0]
        dst = basis.rank(s[src] ^ mask)
        rows.append(src)
        cols.append(dst)
    rows.append(np.arange(dim))
    cols.append(np.arange(dim))
    n_off = sum(r.size for r in rows[:-1])
    data = np.concatenate([np.full(n_off, 0.5 * J), diag])
    H = sp.coo_matrix(
        (data, (np.concatenate(rows), np.concatenate(cols))), shape=(dim, dim)
    ).tocsr()
    H.sum_duplicates()
    return H


def estimate_bounds(H, tol: float = 1e-8, seed: int = 0) -> tuple[float, float]:
    """Certified enclosure ``(E_lo, E_hi)`` of the spectrum of ``H``.

    Extremal Ritz values from a fully reorthogonalized Lanczos run are pushed
    outward by their residual norms and then by ``max(tol, 1e-6 * spread)``.

    Raises:
        LanczosError: when the extremal residuals do not drop below ``tol``
            within ``2 * min(dim, 500)`` steps. The exception carries the
            best bounds found so far.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    dim = H.shape[0]
    if dim == 1:
        e = float(H[0, 0]) if sp.issparse(H) else float(np.asarray(H)[0, 0])
        widen = max(tol, 1e-6 * abs(e))
        return e - widen, e + widen
    max_steps = 2 * min(dim, 500)
    (lo, res_lo), (hi, res_hi), converged = lanczos_extremal(
        H, tol=tol, max_steps=max_steps, seed=seed
    )
    spread = hi - lo
    widen = max(tol, 1e-6 * spread)
    E_lo, E_hi = float(lo - res_lo - widen), float(hi + res_hi + widen)
    if not converged:
        raise LanczosError(
            f"extremal Lanczos residuals ({res_lo:.2e}, {res_hi:.2e}) above tol={tol:.1e} "
            f"after {max_steps} steps",
            best=(E_lo, E_hi),
        )
    return E_lo, E_hi


def affine_map(bounds, margin: float = DEFAULT_MARGIN) -> tuple[float, float]:
    """Return ``(tau, theta)`` sending ``[E_lo, E_hi]`` onto ``[margin, pi - margin]``.

    A single-level sector (vanishing width) maps to ``pi/2`` with ``tau = 1``.
    """
    E_lo, E_hi = map(float, bounds)
    if not 0 <= margin < np.pi / 2:
        raise ValueError(f"margin must lie in [0, pi/2), got {margin}")
    if E_hi - E_lo < 1e-12 * (abs(E_lo) + 1.0):
        if E_hi < E_lo:
            raise ValueError(f"inverted bounds {bounds}")
        mid = 0.5 * (E_lo + E_hi)
        return 1.0, np.pi / 2 - mid
    tau = (np.pi - 2 * margin) / (E_hi - E_lo)
    theta = margin - tau * E_lo
    return tau, theta


def recover_energy(lam, affine) -> np.ndarray | float:
    """Invert ``lam = cos(tau * E + theta)`` on the principal arccos branch."""
    tau, theta = affine
    lam_arr = np.asarray(lam, dtype=float)
    if np.any(np.abs(lam_arr) > 1.0):
        raise ValueError("cosine eigenvalue outside [-1, 1]; clamp before recovery")
    E = (np.arccos(lam_arr) - theta) / tau
    return float(E) if E.ndim == 0 else E


@dataclass(frozen=True, eq=False)
class SectorHamiltonian:
    """One sector's Hamiltonian together with its spectral bounds and affine map."""

    sector: SectorBasis
    matrix: sp.csr_matrix = field(repr=False)
    bounds: tuple[float, float]
    affine: tuple[float, float]

    @property
    def q(self) -> int:
        return self.sector.q

    @property
    def dim(self) -> int:
        return self.sector.dim

    @property
    def tau(self) -> float:
        return self.affine[0]

    @property
    def theta(self) -> float:
        return self.affine[1]

    @cached_property
    def centered_matrix(self) -> sp.csr_matrix:
        """``tau * H + (theta - pi/2)``: the mapped operator shifted to a zero-centred spectrum."""
        n = self.dim
        shift = self.theta - np.pi / 2
        return (self.tau * self.matrix + shift * sp.identity(n, format="csr")).tocsr()

    def tilde_energy(self, E):
        return self.tau * np.asarray(E) + self.theta


def sector_hamiltonian(
    spec: ChainSpec, q: int, margin: float = DEFAULT_MARGIN, tol: float = 1e-8
) -> SectorHamiltonian:
    basis = enumerate_sector(spec, q)
    H = build_sector_hamiltonian(spec, basis)
    bounds = estimate_bounds(H, tol=tol)
    if basis.dim == 1:
        e = float(H[0, 0])
        affine = affine_map((e, e), margin)
    else:
        affine = affine_map(bounds, margin)
    return SectorHamiltonian(basis, H, bounds, affine)


def build_model(
    spec: ChainSpec, margin: float = DEFAULT_MARGIN, tol: float = 1e-8
) -> dict[int, SectorHamiltonian]:
    """All sector Hamiltonians of the ring, keyed by ``q``."""
    return {q: sector_hamiltonian(spec, q, margin, tol) for q in spec.sectors}


def sector_dims(spec: ChainSpec) -> dict[int, int]:
    return {q: math.comb(spec.N, spec.N // 2 + q) for q in spec.sectors}
