"""Sector-resolved stochastic-trace thermodynamics from reconstructed levels.

Every estimator here consumes ``(E_j, w_j)`` pairs tagged with a random
vector index ``r`` and a sector ``q``; FTQK, FTLM and exact diagonalization
all feed the same code path. Units: ``k_B = g = mu_B = 1``.
"""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

OBSERVABLES = ("U", "C", "chi", "S")
_COLUMNS = {"U": "U_per_site", "C": "C_per_site", "chi": "chi_per_site", "S": "S_per_site"}


class ThermoError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class TemperatureGrid:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size == 0:
            raise ValueError("temperature grid must be a non-empty 1-D array")
        if np.any(v <= 0):
            raise ValueError("temperatures must be positive")
        if np.any(np.diff(v) <= 0):
            raise ValueError("temperatures must be strictly ascending")
        object.__setattr__(self, "values", v)

    @classmethod
    def log(cls, T_min: float = 0.02, T_max: float = 100.0, points: int = 200) -> "TemperatureGrid":
        return cls(np.geomspace(T_min, T_max, points))

    def __len__(self):
        return self.values.size


@dataclass(eq=False)
class ThermoCurve:
    """Per-site thermodynamic curves on a temperature grid."""

    T: np.ndarray
    U: np.ndarray
    C: np.ndarray
    chi: np.ndarray
    S: np.ndarray
    errors: dict = field(default_factory=dict)
    log_Z: np.ndarray | None = None
    R_used: dict = field(default_factory=dict)
    provenance: str = "ftqk"

    def observable(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def error(self, name: str) -> np.ndarray:
        return self.errors.get(name, np.full_like(self.T, np.nan))

    def to_csv(self, path) -> None:
        header = ["T"] + [_COLUMNS[o] for o in OBSERVABLES] + [_COLUMNS[o] + "_err" for o in OBSERVABLES]
        header.append("provenance")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i, t in enumerate(self.T):
                row = [t] + [self.observable(o)[i] for o in OBSERVABLES] + [self.error(o)[i] for o in OBSERVABLES]
                w.writerow([f"{x:.17g}" for x in row] + [self.provenance])

    @classmethod
    def from_csv(cls, path) -> "ThermoCurve":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path}: no data rows")
        col = lambda name: np.array([float(r[name]) for r in rows])  # noqa: E731
        return cls(
            T=col("T"),
            **{o: col(_COLUMNS[o]) for o in OBSERVABLES},
            errors={o: col(_COLUMNS[o] + "_err") for o in OBSERVABLES},
            provenance=rows[0].get("provenance", ""),
        )


def _moments(samples, grid: TemperatureGrid):
    """Per-(r, q) Boltzmann moment sums with a global energy shift.

    Returns ``(E_ref, rs, qs, P)`` where ``P[k, ir, iq, t]`` is
    ``sum_j w_j (E_j - E_ref)^k exp(-beta_t (E_j - E_ref))`` for ``k = 0, 1, 2``.
    """
    samples = list(samples)
    if not samples:
        raise ThermoError("no samples to aggregate")
    E_ref = min(float(np.min(s.energies)) for s in samples if len(s.energies))
    rs = sorted({s.r_index for s in samples})
    qs = sorted({s.q for s in samples})
    r_pos = {r: i for i, r in enumerate(rs)}
    q_pos = {q: i for i, q in enumerate(qs)}
    beta = 1.0 / grid.values
    P = np.zeros((3, len(rs), len(qs), beta.size))
    # fixed sample order keeps the floating-point reduction reproducible
    for s in sorted(samples, key=lambda s: (s.q, s.r_index)):
        dE = np.asarray(s.energies, dtype=float) - E_ref
        if dE.size == 0:
            continue
        boltz = np.asarray(s.weights, dtype=float)[:, None] * np.exp(-np.outer(dE, beta))
        ir, iq = r_pos[s.r_index], q_pos[s.q]
        P[0, ir, iq] += boltz.sum(axis=0)
        P[1, ir, iq] += dE @ boltz
        P[2, ir, iq] += (dE**2) @ boltz
    present = np.zeros((len(rs), len(qs)), dtype=bool)
    for s in samples:
        present[r_pos[s.r_index], q_pos[s.q]] = True
    return E_ref, rs, qs, P, present


def _curves(P, present, qs, sector_dims, E_ref, beta, N, mask=None):
    """Observables from moment sums, optionally leaving out random vectors."""
    if mask is None:
        mask = np.ones(P.shape[1], dtype=bool)
    absent = sorted(set(sector_dims) - set(qs))
    if absent:
        raise ThermoError(f"sectors {absent} have no accepted samples")
    counts = (present & mask[:, None]).sum(axis=0)
    dims = np.array([sector_dims[q] for q in qs], dtype=float)
    if np.any(counts == 0):
        missing = [q for q, c in zip(qs, counts) if c == 0]
        raise ThermoError(f"sectors {missing} have no accepted samples")
    scale = dims / counts
    M = np.einsum("krqt,q->kt", P[:, mask], scale)
    q2 = np.einsum("rqt,q->t", P[0][mask], scale * np.asarray(qs, dtype=float) ** 2)
    Zs = M[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = M[1] / Zs
        var = M[2] / Zs - mean**2
        U = E_ref + mean
        C = beta**2 * var
        chi = beta * q2 / Zs
        log_Z = np.log(Zs) - beta * E_ref
        S = beta * mean + np.log(Zs)
    return log_Z, U / N, C / N, chi / N, S / N, Zs


def partition_function(samples, sector_dims, R=None, grid: TemperatureGrid | None = None, N: int | None = None):
    """``ln Z(T)`` from the sector-weighted random-vector average.

    ``R`` is accepted for interface symmetry; the per-sector normalization
    always uses the count of accepted samples in that sector.
    """
    grid = grid or TemperatureGrid.log()
    E_ref, rs, qs, P, present = _moments(samples, grid)
    log_Z, *_ = _curves(P, present, qs, sector_dims, E_ref, 1.0 / grid.values, N or 1)
    return log_Z


def observables(samples, sector_dims, N: int, grid: TemperatureGrid | None = None, jackknife: bool = True, provenance: str = "ftqk") -> ThermoCurve:
    """Per-site ``U, C, chi, S`` with delete-one-``r`` jackknife errors."""
    grid = grid or TemperatureGrid.log()
    samples = list(samples)
    beta = 1.0 / grid.values
    E_ref, rs, qs, P, present = _moments(samples, grid)
    log_Z, U, C, chi, S, Zs = _curves(P, present, qs, sector_dims, E_ref, beta, N)
    bad = ~(np.isfinite(Zs) & (Zs > 0))
    if np.any(bad):
        raise ThermoError(f"partition function underflow at T = {grid.values[bad][0]:.6g}")
    R_used = {q: int(c) for q, c in zip(qs, present.sum(axis=0))}
    errors = jackknife_errors(P, present, qs, sector_dims, E_ref, beta, N) if jackknife else {}
    return ThermoCurve(
        T=grid.values.copy(), U=U, C=C, chi=chi, S=S, errors=errors, log_Z=log_Z, R_used=R_used, provenance=provenance
    )


def jackknife_errors(P, present, qs, sector_dims, E_ref, beta, N) -> dict:
    """Delete-one jackknife over the random-vector index.

    Dropping ``r`` removes it from every sector at once. With fewer than two
    vectors the errors are NaN (not available).
    """
    R = P.shape[1]
    if R < 2:
        return {o: np.full(beta.size, np.nan) for o in OBSERVABLES}
    leave_out = defaultdict(list)
    for r in range(R):
        mask = np.ones(R, dtype=bool)
        mask[r] = False
        try:
            _, U, C, chi, S, _ = _curves(P, present, qs, sector_dims, E_ref, beta, N, mask)
        except ThermoError:
            return {o: np.full(beta.size, np.nan) for o in OBSERVABLES}
        for name, val in zip(OBSERVABLES, (U, C, chi, S)):
            leave_out[name].append(val)
    out = {}
    for name, vals in leave_out.items():
        a = np.array(vals)
        out[name] = np.sqrt((R - 1) / R * ((a - a.mean(axis=0)) ** 2).sum(axis=0))
    return out
