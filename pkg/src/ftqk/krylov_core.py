"""Toeplitz generalized eigenproblem for ``cos(H_tilde)`` in the real-time Krylov space.

For the basis ``|phi_n> = U^n |phi_0>``, ``U = exp(-i H_tilde)``, both the
overlap matrix ``S`` and the matrix of ``cos(H_tilde) = (U + U^dagger)/2``
are Toeplitz in the overlap sequence ``g``. The pencil ``(F, S)`` is solved
by canonical orthogonalization: small eigenmodes of ``S`` are discarded and
the rest whitened into an ordinary Hermitian problem.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .propagator import OverlapSequence
from .spin_model import recover_energy

DEFAULT_EPS_GRID = tuple(10.0 ** -k for k in range(1, 13))
_RENORM_SLACK = 1e-12


class KrylovError(RuntimeError):
    pass


class SampleRejected(KrylovError):
    """No threshold in the grid left any retained mode."""


@dataclass(frozen=True, eq=False)
class ToeplitzPair:
    S: np.ndarray = field(repr=False)
    F: np.ndarray = field(repr=False)

    @property
    def D(self) -> int:
        return self.S.shape[0]


@dataclass(frozen=True)
class RegularizationConfig:
    """Knobs of the threshold search and the low-energy stabilization.

    ``gap_merge_tol`` is in energy units; ``None`` derives it per sector as
    ``10 * sqrt(lambda_clamp_tol) / tau``. ``stabilize=False`` switches off
    the whole stabilized scheme: a single fixed threshold (the smallest in
    the grid), no validity screening and no low-energy corrections.
    """

    eps_grid: tuple[float, ...] = DEFAULT_EPS_GRID
    lambda_clamp_tol: float = 1e-6
    weight_cap_tol: float = 1e-6
    bound_slack: float = 0.5
    gap_merge_tol: float | None = None
    stabilize: bool = True

    def __post_init__(self):
        grid = tuple(float(e) for e in self.eps_grid)
        if not grid:
            raise ValueError("eps_grid must not be empty")
        if any(not 0 < e < 1 for e in grid):
            raise ValueError("eps_grid values must lie in (0, 1)")
        if any(b >= a for a, b in zip(grid, grid[1:])):
            raise ValueError("eps_grid must be strictly decreasing")
        object.__setattr__(self, "eps_grid", grid)
        for name in ("lambda_clamp_tol", "weight_cap_tol", "bound_slack"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def for_noise(cls, sigma: float, **overrides) -> "RegularizationConfig":
        """Defaults for a given per-quadrature noise level."""
        kw = {}
        if sigma > 0:
            kw["weight_cap_tol"] = 10 * sigma
        kw.update(overrides)
        return cls(**kw)


@dataclass(frozen=True, eq=False)
class Solution:
    lambdas: np.ndarray
    vectors: np.ndarray = field(repr=False)
    D_eff: int
    eps: float
    degraded: bool = False


@dataclass(frozen=True, eq=False)
class KrylovSample:
    """Recovered levels and weights of one ``(r, q)`` sample."""

    energies: np.ndarray
    weights: np.ndarray
    D_eff: int
    eps_used: float
    r_index: int = 0
    q: int = 0
    degraded: bool = False

    def to_json(self) -> str:
        return json.dumps(
            {
                "r": self.r_index,
                "q": self.q,
                "eps_used": self.eps_used,
                "D_eff": self.D_eff,
                "degraded": self.degraded,
                "E": [float(e) for e in self.energies],
                "w": [float(w) for w in self.weights],
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "KrylovSample":
        d = json.loads(line)
        return cls(
            energies=np.asarray(d["E"], dtype=float),
            weights=np.asarray(d["w"], dtype=float),
            D_eff=int(d["D_eff"]),
            eps_used=float(d["eps_used"]),
            r_index=int(d["r"]),
            q=int(d["q"]),
            degraded=bool(d.get("degraded", False)),
        )


def write_samples(samples, path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(s.to_json() + "\n")


def read_samples(path) -> list[KrylovSample]:
    with open(path) as fh:
        return [KrylovSample.from_json(line) for line in fh if line.strip()]


def assemble_toeplitz(seq: OverlapSequence, D: int) -> ToeplitzPair:
    """``S[n, m] = g[m - n]`` and ``F[n, m] = (g[m - n + 1] + g[m - n - 1]) / 2``."""
    if D < 1:
        raise ValueError("D must be at least 1")
    if D > seq.D:
        raise KrylovError(f"D={D} needs g up to index {D}, sequence stops at {seq.D}")
    k = np.arange(D)[None, :] - np.arange(D)[:, None]
    S = seq.two_sided(k)
    F = (seq.two_sided(k + 1) + seq.two_sided(k - 1)) / 2
    return ToeplitzPair(S=S, F=F)


def solve_regularized(pair: ToeplitzPair, eps: float, s_eig=None) -> Solution:
    """Canonical orthogonalization with relative threshold ``eps``.

    Returns ascending cosine eigenvalues and ``S``-normalized generalized
    eigenvectors in the original (non-orthogonal) Krylov basis. ``s_eig``
    may carry a precomputed ``eigh(S)``.
    """
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    s_vals, s_vecs = s_eig if s_eig is not None else np.linalg.eigh(pair.S)
    keep = s_vals > eps * s_vals[-1]
    D_eff = int(keep.sum())
    if D_eff == 0 or s_vals[-1] <= 0:
        raise KrylovError(f"no overlap mode above eps={eps:g} * max")
    W = s_vecs[:, keep] / np.sqrt(s_vals[keep])
    Fp = W.conj().T @ pair.F @ W
    Fp = (Fp + Fp.conj().T) / 2
    lam, Y = np.linalg.eigh(Fp)
    return Solution(lambdas=lam, vectors=W @ Y, D_eff=D_eff, eps=eps)


def _weights(solution: Solution, g: np.ndarray) -> np.ndarray:
    # <phi_0|psi_j> = sum_n u_nj <phi_0|phi_n> = sum_n u_nj g_n
    D = solution.vectors.shape[0]
    return np.abs(g[:D] @ solution.vectors) ** 2


def _energies(lambdas, affine) -> np.ndarray:
    return recover_energy(np.clip(lambdas, -1.0, 1.0), affine)


def is_valid(solution: Solution, g, config: RegularizationConfig, affine, bounds) -> bool:
    lam = solution.lambdas
    tol = config.lambda_clamp_tol
    if lam.min() < -1 - tol or lam.max() > 1 + tol:
        return False
    E = _energies(lam, affine)
    E_lo, E_hi = bounds
    if E.min() < E_lo - config.bound_slack or E.max() > E_hi + config.bound_slack:
        return False
    w = _weights(solution, g)
    return w.sum() <= 1 + config.weight_cap_tol and w.min() >= -config.weight_cap_tol


def select_threshold(pair: ToeplitzPair, config: RegularizationConfig, affine, bounds, g=None):
    """Smallest ``eps`` in the grid whose solution passes the validity tests.

    ``g`` (the overlap sequence) is needed for the weight test; it defaults
    to the first row of ``S``. Returns ``(eps, solution)``; when nothing is
    valid the largest-eps solution comes back flagged ``degraded``.

    Raises:
        SampleRejected: every threshold truncates all modes.
    """
    if g is None:
        g = pair.S[0]
    if not config.stabilize:
        eps = config.eps_grid[-1]
        try:
            sol = solve_regularized(pair, eps)
        except KrylovError as exc:
            raise SampleRejected(str(exc)) from exc
        return eps, sol
    fallback = None
    chosen = None
    s_eig = np.linalg.eigh(pair.S)
    for eps in config.eps_grid:
        try:
            sol = solve_regularized(pair, eps, s_eig)
        except KrylovError:
            continue
        if fallback is None:
            fallback = sol
        if is_valid(sol, g, config, affine, bounds):
            chosen = sol
    if chosen is not None:
        return chosen.eps, chosen
    if fallback is None:
        raise SampleRejected("every threshold in the grid removes all overlap modes")
    return fallback.eps, replace(fallback, degraded=True)


def recover_sample(solution: Solution, seq: OverlapSequence, affine, bounds, config: RegularizationConfig) -> KrylovSample:
    """Energies via the affine-inverted arccos, weights ``|<phi_0|psi_j>|^2``."""
    lam = np.clip(solution.lambdas, -1.0, 1.0)
    E = recover_energy(lam, affine)
    w = _weights(solution, seq.g)
    order = np.argsort(E, kind="stable")
    sample = KrylovSample(
        energies=np.atleast_1d(E)[order],
        weights=w[order],
        D_eff=solution.D_eff,
        eps_used=solution.eps,
        r_index=seq.r_index,
        q=seq.q,
        degraded=solution.degraded,
    )
    if config.stabilize:
        sample = stabilize_low_energy(sample, bounds, config, affine)
    return sample


def gap_merge_tol(config: RegularizationConfig, affine) -> float:
    if config.gap_merge_tol is not None:
        return config.gap_merge_tol
    return 10 * np.sqrt(config.lambda_clamp_tol) / affine[0]


def stabilize_low_energy(sample: KrylovSample, bounds, config: RegularizationConfig, affine=(1.0, 0.0)) -> KrylovSample:
    """Bound clamping, near-degenerate bottom merge and weight capping."""
    E = np.clip(np.asarray(sample.energies, dtype=float), bounds[0], bounds[1])
    w = np.asarray(sample.weights, dtype=float).copy()
    order = np.argsort(E, kind="stable")
    E, w = E[order], w[order]
    tol = gap_merge_tol(config, affine)
    # repeat so that the result is a fixed point of this function
    while E.size >= 2 and E[1] - E[0] < tol:
        wsum = w[0] + w[1]
        e0 = (w[0] * E[0] + w[1] * E[1]) / wsum if wsum > 0 else E[0]
        e0 = min(max(e0, E[0]), E[1])  # rounding must not leave the merged interval
        E = np.concatenate([[e0], E[2:]])
        w = np.concatenate([[wsum], w[2:]])
    w = np.clip(w, 0.0, 1.0)
    total = w.sum()
    # the slack keeps a renormalized set (sum 1 up to rounding) from being rescaled again
    if total > 1 + _RENORM_SLACK:
        w = w / total
    return replace(sample, energies=E, weights=w)


def krylov_sample(seq: OverlapSequence, D: int, affine, bounds, config: RegularizationConfig) -> KrylovSample:
    """Full per-sample pipeline: Toeplitz assembly, threshold search, recovery."""
    pair = assemble_toeplitz(seq, D)
    _, sol = select_threshold(pair, config, affine, bounds, g=seq.g)
    return recover_sample(sol, seq, affine, bounds, config)
