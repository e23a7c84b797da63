"""End-to-end FTQK runs: overlaps for every (r, q), then per-sample reconstruction."""
from __future__ import annotations

import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .krylov_core import RegularizationConfig, SampleRejected, krylov_sample
from .propagator import (
    DEFAULT_STEP_TOL,
    OverlapSequence,
    inject_noise,
    measure_overlaps,
    random_sector_block,
)
from .spin_model import DEFAULT_MARGIN, ChainSpec, SectorHamiltonian, build_model, sector_dims
from .thermo import TemperatureGrid, ThermoCurve, observables

log = logging.getLogger(__name__)

# columns propagated together; bounds memory at large N
_BLOCK = 100


def _depth(D, q: int) -> int:
    return D[q] if isinstance(D, dict) else D


def clean_overlaps(
    model: dict[int, SectorHamiltonian],
    R: int,
    D,
    seed: int,
    tol: float = DEFAULT_STEP_TOL,
    workers: int = 1,
    r_start: int = 1,
) -> list[OverlapSequence]:
    """Noiseless sequences for ``r = r_start .. r_start + R - 1`` in every sector.

    ``D`` is an int or a mapping from sector to depth. Output order is fixed
    (by ``q`` then ``r``) whatever the worker count.
    """
    jobs = []
    for q, h in sorted(model.items()):
        for lo in range(r_start, r_start + R, _BLOCK):
            jobs.append((h, _depth(D, q), range(lo, min(lo + _BLOCK, r_start + R))))

    def run(job):
        h, depth, rr = job
        phi = random_sector_block(seed, rr, h.sector)
        return measure_overlaps(phi, h, depth, tol, r_index=rr.start)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            chunks = list(pool.map(run, jobs))
    else:
        chunks = [run(j) for j in jobs]
    return [s for chunk in chunks for s in chunk]


@dataclass
class Diagnostics:
    rejected: list = field(default_factory=list)
    degraded: int = 0
    eps_hist: Counter = field(default_factory=Counter)
    D_eff: list = field(default_factory=list)

    def summary(self) -> dict:
        d = np.asarray(self.D_eff) if self.D_eff else np.zeros(1)
        return {
            "rejected": len(self.rejected),
            "rejected_samples": [list(x) for x in self.rejected],
            "degraded": self.degraded,
            "eps_used_histogram": {f"{k:g}": v for k, v in sorted(self.eps_hist.items(), reverse=True)},
            "D_eff": {"min": int(d.min()), "median": float(np.median(d)), "max": int(d.max())},
        }


def reconstruct(
    seqs,
    model: dict[int, SectorHamiltonian],
    D,
    config: RegularizationConfig,
    sigma: float = 0.0,
    noise_seed: int = 0,
):
    """Noise injection plus Krylov reconstruction of every sequence."""
    diag = Diagnostics()
    samples = []
    for seq in seqs:
        h = model[seq.q]
        noisy = inject_noise(seq, sigma, noise_seed)
        try:
            s = krylov_sample(noisy, _depth(D, seq.q), h.affine, h.bounds, config)
        except SampleRejected:
            diag.rejected.append((seq.r_index, seq.q))
            continue
        diag.degraded += s.degraded
        diag.eps_hist[s.eps_used] += 1
        diag.D_eff.append(s.D_eff)
        samples.append(s)
    return samples, diag


def ftqk_thermo(
    spec: ChainSpec,
    R: int,
    D,
    seed: int = 0,
    sigma: float = 0.0,
    noise_seed: int = 0,
    config: RegularizationConfig | None = None,
    grid: TemperatureGrid | None = None,
    margin: float = DEFAULT_MARGIN,
    workers: int = 1,
    seqs=None,
    model=None,
) -> tuple[ThermoCurve, list, Diagnostics]:
    model = model or build_model(spec, margin)
    config = config or RegularizationConfig.for_noise(sigma)
    if seqs is None:
        seqs = clean_overlaps(model, R, D, seed, workers=workers)
    samples, diag = reconstruct(seqs, model, D, config, sigma, noise_seed)
    curve = observables(samples, sector_dims(spec), spec.N, grid, provenance="ftqk")
    return curve, samples, diag
