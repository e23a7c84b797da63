"""Symmetric Lanczos with full reorthogonalization."""
from __future__ import annotations

import numpy as np
from scipy.linalg import eigh_tridiagonal


class LanczosError(RuntimeError):
    """Lanczos iteration failed to converge; ``best`` holds the last iterate."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


def _apply(A, x: np.ndarray) -> np.ndarray:
    # a real matrix acting on a complex vector: one real product on the (re, im) view
    if np.iscomplexobj(x) and not np.iscomplexobj(A.dtype.type(0)):
        n = x.shape[0]
        return np.ascontiguousarray(A @ x.view(np.float64).reshape(n, 2)).view(np.complex128).reshape(n)
    return A @ x


def lanczos_tridiagonal(A, v0, m: int, reorthogonalize: bool = True, breakdown_tol: float = 1e-12):
    """Run up to ``m`` Lanczos steps from ``v0``.

    Returns:
        (alpha, beta, V, last_beta): diagonal, off-diagonal (length
        ``len(alpha) - 1``), the Lanczos basis as columns and the norm of the
        final residual. The run stops early on an invariant subspace, so
        ``len(alpha)`` may be smaller than ``m``.
    """
    v = np.asarray(v0)
    dtype = np.result_type(v.dtype, A.dtype, np.float64)
    n = v.shape[0]
    m = min(m, n)
    # basis vectors are rows so that every step touches contiguous memory
    Vt = np.zeros((m, n), dtype=dtype)
    alpha = np.zeros(m)
    beta = np.zeros(m)
    Vt[0] = v / np.linalg.norm(v)
    k = 0
    for k in range(m):
        w = _apply(A, Vt[k]).astype(dtype, copy=False)
        alpha[k] = np.real(np.vdot(Vt[k], w))
        w -= alpha[k] * Vt[k]
        if k > 0:
            w -= beta[k - 1] * Vt[k - 1]
        if reorthogonalize:
            # two passes of classical Gram-Schmidt
            basis = Vt[: k + 1]
            for _ in range(2):
                w -= (basis @ w.conj()).conj() @ basis
        b = np.linalg.norm(w)
        beta[k] = b
        if k + 1 == m or b < breakdown_tol * max(1.0, abs(alpha[k])):
            break
        Vt[k + 1] = w / b
    steps = k + 1
    return alpha[:steps], beta[: steps - 1], Vt[:steps].T, beta[steps - 1]


def lanczos_extremal(A, tol: float = 1e-8, max_steps: int = 1000, seed: int = 0, check_every: int = 5):
    """Extremal Ritz values of a Hermitian operator with their residual norms.

    Returns:
        ((lo, res_lo), (hi, res_hi), converged)
    """
    n = A.shape[0]
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    max_steps = min(max_steps, n)
    V = np.zeros((n, max_steps))
    alpha = np.zeros(max_steps)
    beta = np.zeros(max_steps)
    V[:, 0] = v / np.linalg.norm(v)
    best = None
    for k in range(max_steps):
        w = A @ V[:, k]
        alpha[k] = V[:, k] @ w
        w -= alpha[k] * V[:, k]
        if k > 0:
            w -= beta[k - 1] * V[:, k - 1]
        for _ in range(2):
            w -= V[:, : k + 1] @ (V[:, : k + 1].T @ w)
        beta[k] = np.linalg.norm(w)
        exhausted = beta[k] < 1e-12 * max(1.0, np.abs(alpha[: k + 1]).max())
        last = exhausted or k + 1 == max_steps
        if last or (k + 1) % check_every == 0:
            theta, s = _ritz(alpha[: k + 1], beta[:k])
            res = 0.0 if exhausted else beta[k]
            best = ((theta[0], res * abs(s[-1, 0])), (theta[-1], res * abs(s[-1, -1])))
            if best[0][1] < tol and best[1][1] < tol:
                return best[0], best[1], True
        if last:
            break
        V[:, k + 1] = w / beta[k]
    return best[0], best[1], False


def _ritz(alpha, beta):
    if alpha.size == 1:
        return alpha.copy(), np.ones((1, 1))
    return eigh_tridiagonal(alpha, beta)


def ritz_pairs(alpha, beta):
    """Ritz values and squared first components of the tridiagonal eigenvectors."""
    theta, s = _ritz(np.asarray(alpha, dtype=float), np.asarray(beta, dtype=float))
    return theta, np.abs(s[0, :]) ** 2
