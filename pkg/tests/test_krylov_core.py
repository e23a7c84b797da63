import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ftqk.krylov_core import (
    DEFAULT_EPS_GRID,
    KrylovError,
    KrylovSample,
    RegularizationConfig,
    ToeplitzPair,
    assemble_toeplitz,
    gap_merge_tol,
    is_valid,
    krylov_sample,
    read_samples,
    select_threshold,
    solve_regularized,
    stabilize_low_energy,
    write_samples,
)
from ftqk.propagator import OverlapSequence, RandomVectorSpec, inject_noise, measure_overlaps, random_sector_vector
from ftqk.spin_model import ChainSpec, affine_map, build_model

AFFINE = affine_map((-3.0, 2.0))
BOUNDS = (-3.0, 2.0)


def synthetic_sequence(energies, weights, D, affine=AFFINE):
    """g_n = sum_k w_k exp(-i n (tau E_k + theta)) for a known discrete spectrum."""
    x = affine[0] * np.asarray(energies) + affine[1]
    n = np.arange(D + 1)[:, None]
    g = (np.asarray(weights) * np.exp(-1j * n * x)).sum(axis=1)
    return OverlapSequence(g=g, r_index=1, q=0)


@pytest.fixture(scope="module")
def n6_model():
    return build_model(ChainSpec(6))


class TestToeplitz:
    def test_layout(self):
        seq = OverlapSequence(g=np.array([1, 0.2 + 0.1j, 0.3 - 0.4j, 0.05j]))
        pair = assemble_toeplitz(seq, 3)
        g = seq.g
        assert pair.S[0, 2] == g[2] and pair.S[2, 0] == np.conj(g[2])
        assert pair.F[0, 0] == (g[1] + np.conj(g[1])) / 2
        assert pair.F[0, 2] == (g[3] + g[1]) / 2
        assert pair.F[1, 0] == (g[0] + np.conj(g[2])) / 2

    def test_needs_enough_overlaps(self):
        with pytest.raises(KrylovError):
            assemble_toeplitz(OverlapSequence(g=np.ones(4, complex)), 5)

    @settings(max_examples=50)
    @given(D=st.integers(1, 12), seed=st.integers(0, 10**6), sigma=st.sampled_from([0.0, 1e-3, 1e-1]))
    def test_hermitian_bit_exact(self, D, seed, sigma):
        rng = np.random.default_rng(seed)
        g = np.concatenate([[1.0], (rng.normal(size=D) + 1j * rng.normal(size=D)) * (1 + sigma)])
        pair = assemble_toeplitz(OverlapSequence(g=g), D)
        assert np.array_equal(pair.S, pair.S.conj().T)
        assert np.array_equal(pair.F, pair.F.conj().T)
        assert np.array_equal(np.diag(pair.S), np.ones(D))

    def test_noiseless_psd(self, n6_model):
        for h in n6_model.values():
            if h.dim < 2:
                continue
            phi = random_sector_vector(RandomVectorSpec(0, 1, h.q), h.sector)
            seq = measure_overlaps(phi, h, h.dim + 5)
            S = assemble_toeplitz(seq, h.dim + 5).S
            ev = np.linalg.eigvalsh(S)
            assert ev.min() >= -1e-10


class TestSolve:
    def test_rank_one(self):
        seq = synthetic_sequence([-1.2], [1.0], 6)
        pair = assemble_toeplitz(seq, 6)
        sol = solve_regularized(pair, 1e-8)
        assert sol.D_eff == 1
        assert sol.lambdas[0] == pytest.approx(np.cos(AFFINE[0] * -1.2 + AFFINE[1]), abs=1e-12)
        s = krylov_sample(seq, 6, AFFINE, BOUNDS, RegularizationConfig())
        assert s.energies == pytest.approx([-1.2], abs=1e-9)
        assert s.weights == pytest.approx([1.0], abs=1e-12)

    def test_two_levels(self):
        seq = synthetic_sequence([-2.0, 0.5], [0.3, 0.7], 8)
        s = krylov_sample(seq, 8, AFFINE, BOUNDS, RegularizationConfig())
        assert s.D_eff == 2
        np.testing.assert_allclose(s.energies, [-2.0, 0.5], atol=1e-8)
        np.testing.assert_allclose(s.weights, [0.3, 0.7], atol=1e-10)

    def test_generalized_eigen_residual(self):
        seq = synthetic_sequence([-2.5, -1.0, 0.0, 1.5], [0.1, 0.2, 0.3, 0.4], 6)
        pair = assemble_toeplitz(seq, 6)
        sol = solve_regularized(pair, 1e-10)
        for lam, u in zip(sol.lambdas, sol.vectors.T):
            np.testing.assert_allclose(pair.F @ u, lam * (pair.S @ u), atol=1e-8)
            assert np.vdot(u, pair.S @ u).real == pytest.approx(1.0, abs=1e-10)

    def test_zero_overlap_matrix(self):
        with pytest.raises(KrylovError):
            solve_regularized(ToeplitzPair(np.zeros((2, 2)), np.zeros((2, 2))), 1e-3)

    def test_bad_eps(self):
        pair = assemble_toeplitz(synthetic_sequence([0.0], [1.0], 2), 2)
        with pytest.raises(ValueError):
            solve_regularized(pair, 1.0)

    def test_d_eff_monotone_in_eps(self, n6_model):
        h = n6_model[0]
        seq = measure_overlaps(random_sector_vector(RandomVectorSpec(0, 1, 0), h.sector), h, 20)
        pair = assemble_toeplitz(seq, 20)
        d = [solve_regularized(pair, e).D_eff for e in DEFAULT_EPS_GRID]
        assert d == sorted(d)

    @pytest.mark.parametrize("q", [0, 1, 2])
    def test_full_depth_reproduces_boltzmann_sum(self, n6_model, q):
        h = n6_model[q]
        phi = random_sector_vector(RandomVectorSpec(3, 1, q), h.sector)
        ev, V = np.linalg.eigh(h.matrix.toarray())
        c2 = np.abs(V.T @ phi) ** 2
        seq = measure_overlaps(phi, h, h.dim)
        s = krylov_sample(seq, h.dim, h.affine, h.bounds, RegularizationConfig())
        beta = np.array([0.01, 0.1, 1.0, 5.0, 20.0])
        ref = np.array([(c2 * np.exp(-b * (ev - ev[0]))).sum() for b in beta])
        got = np.array([(s.weights * np.exp(-b * (s.energies - ev[0]))).sum() for b in beta])
        np.testing.assert_allclose(got, ref, rtol=1e-8)


class TestWeights:
    @pytest.mark.parametrize("D", [5, 10, 20])
    def test_noiseless_sum_bound(self, n6_model, D):
        for h in n6_model.values():
            for r in range(1, 6):
                phi = random_sector_vector(RandomVectorSpec(1, r, h.q), h.sector)
                seq = measure_overlaps(phi, h, D)
                s = krylov_sample(seq, D, h.affine, h.bounds, RegularizationConfig())
                assert s.weights.sum() <= 1 + 1e-8
                assert s.weights.min() >= 0

    def test_noisy_capped(self, n6_model):
        h = n6_model[0]
        seq = measure_overlaps(random_sector_vector(RandomVectorSpec(1, 1, 0), h.sector), h, 20)
        for ns in range(5):
            s = krylov_sample(inject_noise(seq, 1e-2, ns), 20, h.affine, h.bounds, RegularizationConfig.for_noise(1e-2))
            assert s.weights.sum() <= 1 + 1e-12


class TestThreshold:
    def test_noiseless_uses_smallest_valid(self, n6_model):
        h = n6_model[0]
        seq = measure_overlaps(random_sector_vector(RandomVectorSpec(0, 1, 0), h.sector), h, 8)
        eps, sol = select_threshold(assemble_toeplitz(seq, 8), RegularizationConfig(), h.affine, h.bounds, seq.g)
        assert eps == DEFAULT_EPS_GRID[-1] and not sol.degraded

    def test_skips_invalid_threshold(self):
        # a spurious large weight on the smallest-eps solution must push the choice up the grid
        seq = synthetic_sequence([-1.0, 1.0], [0.5, 0.5], 6)
        rng = np.random.default_rng(0)
        g = seq.g.copy()
        g[1:] += 1e-4 * (rng.normal(size=6) + 1j * rng.normal(size=6))
        noisy = OverlapSequence(g=g)
        cfg = RegularizationConfig(weight_cap_tol=0.0, lambda_clamp_tol=0.0, bound_slack=0.0)
        pair = assemble_toeplitz(noisy, 6)
        eps, sol = select_threshold(pair, cfg, AFFINE, BOUNDS, g)
        assert eps > DEFAULT_EPS_GRID[-1] and not sol.degraded
        assert is_valid(sol, g, cfg, AFFINE, BOUNDS)
        for e in DEFAULT_EPS_GRID:
            if e < eps:
                assert not is_valid(solve_regularized(pair, e), g, cfg, AFFINE, BOUNDS)

    def test_degraded_fallback(self):
        seq = OverlapSequence(g=np.array([1.0, 3.0, 3.0, 3.0], complex))
        eps, sol = select_threshold(assemble_toeplitz(seq, 3), RegularizationConfig(), AFFINE, BOUNDS, seq.g)
        assert sol.degraded and eps == DEFAULT_EPS_GRID[0]

    def test_stabilize_off_fixes_eps(self):
        seq = OverlapSequence(g=np.array([1.0, 3.0, 3.0, 3.0], complex))
        cfg = RegularizationConfig(stabilize=False)
        eps, sol = select_threshold(assemble_toeplitz(seq, 3), cfg, AFFINE, BOUNDS, seq.g)
        assert eps == DEFAULT_EPS_GRID[-1] and not sol.degraded


class TestStabilize:
    CFG = RegularizationConfig(gap_merge_tol=0.05)

    def test_clamp_to_bounds(self):
        s = KrylovSample(np.array([-3.4, 0.0, 2.3]), np.array([0.2, 0.3, 0.4]), 3, 1e-3)
        out = stabilize_low_energy(s, BOUNDS, self.CFG)
        np.testing.assert_array_equal(out.energies, [-3.0, 0.0, 2.0])

    def test_merges_bottom_pair(self):
        s = KrylovSample(np.array([-1.0, -0.98, 0.5]), np.array([0.1, 0.3, 0.4]), 3, 1e-3)
        out = stabilize_low_energy(s, BOUNDS, self.CFG)
        np.testing.assert_allclose(out.energies, [-0.985, 0.5])
        np.testing.assert_allclose(out.weights, [0.4, 0.4])

    def test_repeated_merge(self):
        s = KrylovSample(np.array([-1.0, -0.97, -0.94, 0.5]), np.array([0.25, 0.25, 0.25, 0.25]), 4, 1e-3)
        out = stabilize_low_energy(s, BOUNDS, self.CFG)
        assert out.energies.size == 2 and out.energies[1] - out.energies[0] >= 0.05

    def test_renormalizes_excess_weight(self):
        s = KrylovSample(np.array([-1.0, 0.5]), np.array([0.8, 0.4]), 2, 1e-3)
        out = stabilize_low_energy(s, BOUNDS, self.CFG)
        assert out.weights.sum() == pytest.approx(1.0)
        assert out.weights[0] / out.weights[1] == pytest.approx(2.0)

    def test_default_merge_tolerance(self):
        cfg = RegularizationConfig()
        assert gap_merge_tol(cfg, (0.5, 0.0)) == pytest.approx(10 * 1e-3 / 0.5)

    @settings(max_examples=200)
    @given(
        E=st.lists(st.floats(-4, 3), min_size=1, max_size=12),
        w=st.lists(st.floats(-0.1, 0.6), min_size=12, max_size=12),
        tol=st.floats(0, 0.5),
    )
    def test_idempotent(self, E, w, tol):
        s = KrylovSample(np.array(E), np.array(w[: len(E)]), len(E), 1e-3)
        cfg = RegularizationConfig(gap_merge_tol=tol)
        once = stabilize_low_energy(s, BOUNDS, cfg)
        twice = stabilize_low_energy(once, BOUNDS, cfg)
        assert twice.energies.tobytes() == once.energies.tobytes()
        assert twice.weights.tobytes() == once.weights.tobytes()
        assert once.weights.sum() <= 1 + 1e-12 and once.weights.min() >= 0


class TestConfig:
    @pytest.mark.parametrize(
        "kw",
        [dict(eps_grid=()), dict(eps_grid=(1e-3, 1e-2)), dict(eps_grid=(1.0,)), dict(lambda_clamp_tol=-1.0), dict(bound_slack=-0.1)],
    )
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            RegularizationConfig(**kw)

    def test_for_noise(self):
        assert RegularizationConfig.for_noise(0.0).weight_cap_tol == 1e-6
        assert RegularizationConfig.for_noise(1e-3).weight_cap_tol == pytest.approx(1e-2)
        assert RegularizationConfig.for_noise(1e-3, weight_cap_tol=0.5).weight_cap_tol == 0.5


def test_samples_round_trip(tmp_path):
    samples = [
        KrylovSample(np.array([-1.5, 0.1 / 3]), np.array([0.25, 0.7]), 2, 1e-7, r_index=3, q=-1, degraded=True),
        KrylovSample(np.array([0.2]), np.array([1.0]), 1, 1e-12, r_index=4, q=2),
    ]
    path = tmp_path / "s.jsonl"
    write_samples(samples, path)
    back = read_samples(path)
    for a, b in zip(samples, back):
        assert a.energies.tobytes() == b.energies.tobytes() and a.weights.tobytes() == b.weights.tobytes()
        assert (a.D_eff, a.eps_used, a.r_index, a.q, a.degraded) == (b.D_eff, b.eps_used, b.r_index, b.q, b.degraded)
