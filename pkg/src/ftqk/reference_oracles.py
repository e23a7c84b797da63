"""Ground-truth thermodynamics: exact diagonalization and classical FTLM."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .krylov_core import KrylovSample
from .lanczos import lanczos_tridiagonal, ritz_pairs
from .propagator import STREAM_FTLM, RandomVectorSpec, random_sector_vector
from .spin_model import ChainSpec, build_sector_hamiltonian, enumerate_sector, sector_dims
from .thermo import TemperatureGrid, ThermoCurve, observables

log = logging.getLogger(__name__)

ED_MAX_N = 16


@dataclass(frozen=True, eq=False)
class SectorSpectrum:
    q: int
    eigenvalues: np.ndarray


@dataclass(frozen=True)
class FtlmConfig:
    R: int = 400
    M: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.R < 1 or self.M < 1:
            raise ValueError("FTLM needs R >= 1 and M >= 1")


def sector_spectrum(spec: ChainSpec, q: int) -> SectorSpectrum:
    H = build_sector_hamiltonian(spec, enumerate_sector(spec, q))
    return SectorSpectrum(q, np.linalg.eigvalsh(H.toarray()))


def ed_spectra(spec: ChainSpec) -> dict[int, SectorSpectrum]:
    if spec.N > ED_MAX_N:
        raise ValueError(f"exact diagonalization limited to N <= {ED_MAX_N}; use ftlm for N={spec.N}")
    if spec.N == ED_MAX_N:
        log.warning("dense diagonalization of N=%d sectors is slow", spec.N)
    # q and -q are related by a global spin flip; diagonalize once
    spectra = {}
    for q in spec.sectors:
        spectra[q] = spectra[-q] if -q in spectra else sector_spectrum(spec, q)
    return {q: SectorSpectrum(q, spectra[q].eigenvalues) for q in spec.sectors}


def ed_thermo(spec: ChainSpec, grid: TemperatureGrid | None = None, spectra=None) -> ThermoCurve:
    """Exact curves: one pseudo-sample per sector holding the whole spectrum at weight ``1/N_st``."""
    spectra = spectra or ed_spectra(spec)
    samples = [
        KrylovSample(
            energies=sp.eigenvalues,
            weights=np.full(sp.eigenvalues.size, 1.0 / sp.eigenvalues.size),
            D_eff=sp.eigenvalues.size,
            eps_used=0.0,
            r_index=0,
            q=q,
        )
        for q, sp in spectra.items()
    ]
    curve = observables(samples, sector_dims(spec), spec.N, grid, jackknife=False, provenance="ed")
    curve.errors = {o: np.zeros_like(curve.T) for o in ("U", "C", "chi", "S")}
    return curve


def ftlm_sample(H, phi0: np.ndarray, M: int, r_index: int, q: int) -> KrylovSample:
    """Ritz values and squared overlaps ``|<phi0|v_j>|^2`` of an M-step Lanczos run."""
    alpha, beta, _, _ = lanczos_tridiagonal(H, phi0, M, reorthogonalize=M <= 200)
    theta, w = ritz_pairs(alpha, beta)
    return KrylovSample(energies=theta, weights=w, D_eff=theta.size, eps_used=0.0, r_index=r_index, q=q)


def ftlm_samples(spec: ChainSpec, config: FtlmConfig, sectors=None):
    out = []
    for q in sectors if sectors is not None else spec.sectors:
        basis = enumerate_sector(spec, q)
        H = build_sector_hamiltonian(spec, basis)
        for r in range(1, config.R + 1):
            phi0 = random_sector_vector(RandomVectorSpec(config.seed, r, q, STREAM_FTLM), basis)
            out.append(ftlm_sample(H, phi0, config.M, r, q))
    return out


def flip_reduced_dims(spec: ChainSpec) -> dict[int, int]:
    """Sector weights for sampling ``q >= 0`` only: ``q > 0`` stands in for ``-q`` too."""
    return {q: d * (2 if q > 0 else 1) for q, d in sector_dims(spec).items() if q >= 0}


def ftlm_thermo(
    spec: ChainSpec,
    config: FtlmConfig,
    grid: TemperatureGrid | None = None,
    samples=None,
    flip_symmetric: bool = False,
) -> ThermoCurve:
    """Standard FTLM estimator, aggregated exactly like the FTQK samples.

    With ``flip_symmetric`` only sectors ``q >= 0`` are sampled; a global
    spin flip maps ``q`` onto ``-q`` with the same spectrum and the same
    ``q**2``, so their contributions are equal in expectation.
    """
    if flip_symmetric:
        sectors = [q for q in spec.sectors if q >= 0]
        samples = samples if samples is not None else ftlm_samples(spec, config, sectors)
        return observables(samples, flip_reduced_dims(spec), spec.N, grid, provenance="ftlm")
    samples = samples if samples is not None else ftlm_samples(spec, config)
    return observables(samples, sector_dims(spec), spec.N, grid, provenance="ftlm")
