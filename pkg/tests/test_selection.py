import itertools
import math

import numpy as np
import pytest

from labelforge.backbone import LatentCode, ToyBackboneConfig, toy_generate
from labelforge.errors import DataError
from labelforge.feature_volume import materialize
from labelforge.selection import (
    PoolEntry,
    first_round_seed,
    kcenter_greedy,
    load_round,
    mean_latent,
    mean_pixel_feature,
    propose_batch,
    save_round,
    uncertainty_band,
)


def entry(sample_id, emb, score=0.0, latent=None):
    return PoolEntry(
        sample_id=sample_id,
        embedding=np.atleast_1d(np.asarray(emb, dtype=np.float64)),
        image_score=score,
        latent=latent,
    )


def pool_from_points(points):
    return [entry(i, p) for i, p in enumerate(points)]


def greedy_radius(pool, centers):
    X = np.stack([e.embedding for e in pool])
    C = np.stack([e.embedding for e in pool if e.sample_id in set(centers)])
    d = np.linalg.norm(X[:, None, :] - C[None, :, :], axis=2)
    return float(d.min(axis=1).max())


def optimal_radius(pool, n):
    """Exhaustive optimal k-center radius over all n-subsets."""
    best = math.inf
    for subset in itertools.combinations(range(len(pool)), n):
        r = greedy_radius(pool, [pool[i].sample_id for i in subset])
        best = min(best, r)
    return best


class TestKCenterGreedy:
    def test_exhaustion_returns_all_seed_first(self):
        pool = pool_from_points([0.0, 1.0, 5.0])
        assert kcenter_greedy(pool, 3, seed_id=1) == [1, 2, 0]

    def test_1d_farthest_point_example(self):
        pool = pool_from_points([0.0, 1.0, 9.0, 10.0])
        centers = kcenter_greedy(pool, 2, seed_id=0)
        assert centers[0] == 0
        # brute force: the point at 10 maximizes distance to {0}
        assert centers[1] == 3

    def test_two_approximation_on_exhaustive_instances(self):
        rng = np.random.default_rng(0)
        for trial in range(100):
            size = int(rng.integers(3, 11))
            n = int(rng.integers(1, 4))
            if n > size:
                continue
            points = rng.standard_normal((size, 2))
            pool = [entry(i, p) for i, p in enumerate(points)]
            centers = kcenter_greedy(pool, n, seed_id=0)
            assert greedy_radius(pool, centers) <= 2.0 * optimal_radius(pool, n) + 1e-9

    def test_order_invariance(self):
        rng = np.random.default_rng(1)
        points = rng.standard_normal((8, 3))
        pool = [entry(i, p) for i, p in enumerate(points)]
        shuffled = [pool[i] for i in rng.permutation(8)]
        assert kcenter_greedy(pool, 4, seed_id=2) == kcenter_greedy(shuffled, 4, seed_id=2)

    def test_distance_ties_break_to_lower_id(self):
        # ids 1 and 2 are equidistant from the seed at the origin
        pool = [entry(0, [0.0, 0.0]), entry(1, [1.0, 0.0]), entry(2, [0.0, 1.0])]
        assert kcenter_greedy(pool, 2, seed_id=0) == [0, 1]

    def test_empty_pool_rejected(self):
        with pytest.raises(DataError):
            kcenter_greedy([], 1, seed_id=0)

    def test_n_larger_than_pool_rejected(self):
        with pytest.raises(DataError):
            kcenter_greedy(pool_from_points([0.0]), 2, seed_id=0)

    def test_unknown_seed_rejected(self):
        with pytest.raises(DataError):
            kcenter_greedy(pool_from_points([0.0, 1.0]), 1, seed_id=5)


class TestProposeBatch:
    def _pool(self, n=100, dim=2, seed=3):
        rng = np.random.default_rng(seed)
        return [
            entry(i, rng.standard_normal(dim), score=float(i)) for i in range(n)
        ]

    def test_band_is_ranks_11_to_20_for_pool_of_100(self):
        pool = self._pool(100)
        band = uncertainty_band(pool, 10.0, 10.0)
        assert len(band) == 10
        # scores are the ids here; ranks 11..20 by descending score
        assert sorted(e.sample_id for e in band) == list(range(80, 90))

    def test_round_has_n_centers_within_band(self):
        pool = self._pool(200)
        round_ = propose_batch(pool, k_percent=10, band_width=10, n_centers=12)
        band_ids = {e.sample_id for e in uncertainty_band(pool, 10.0, 10.0)}
        assert len(round_.chosen_ids) == 12
        assert set(round_.chosen_ids) <= band_ids
        assert round_.seed_id == min(band_ids)  # lowest score in this pool = lowest id

    def test_band_never_intersects_discarded_top(self):
        pool = self._pool(150, seed=4)
        ranked = sorted(pool, key=lambda e: (-e.image_score, -e.sample_id))
        top = {e.sample_id for e in ranked[: math.ceil(0.1 * 150)]}
        band = {e.sample_id for e in uncertainty_band(pool, 10.0, 10.0)}
        assert not (top & band)

    def test_cannot_pick_12_from_band_of_10(self):
        pool = self._pool(100)
        with pytest.raises(DataError, match="cannot pick 12"):
            propose_batch(pool, k_percent=10, band_width=10, n_centers=12)

    def test_all_equal_embeddings_pick_lowest_ids(self):
        pool = [entry(i, [1.0, 2.0], score=0.0) for i in range(40)]
        round_ = propose_batch(pool, k_percent=10, band_width=30, n_centers=12)
        band_ids = sorted(e.sample_id for e in uncertainty_band(pool, 10.0, 30.0))
        assert list(round_.chosen_ids) == sorted(band_ids)[:12]

    def test_empty_band_rejected(self):
        pool = [entry(0, [0.0], score=1.0)]
        with pytest.raises(DataError, match="band"):
            propose_batch(pool, k_percent=99.0, band_width=0.5, n_centers=1)

    def test_confirm_flow_and_limit(self):
        pool = self._pool(200)
        round_ = propose_batch(pool, n_centers=12)
        for sid in round_.chosen_ids[:6]:
            round_ = round_.confirm(sid)
        assert len(round_.human_confirmed) == 6
        with pytest.raises(DataError):
            round_.confirm(round_.chosen_ids[6])

    def test_confirm_requires_chosen_id(self):
        pool = self._pool(200)
        round_ = propose_batch(pool, n_centers=12)
        outside = max(round_.chosen_ids) + 1000
        with pytest.raises(DataError):
            round_.confirm(outside)

    def test_round_persistence(self, tmp_path):
        pool = self._pool(200)
        round_ = propose_batch(pool, n_centers=12).confirm(
            propose_batch(pool, n_centers=12).chosen_ids[0]
        )
        path = tmp_path / "round.json"
        save_round(round_, path)
        assert load_round(path) == round_


class TestFirstRoundSeed:
    def test_single_latent_is_itself(self):
        z = np.linspace(-1, 1, 8)
        code = mean_latent([entry(0, [0.0], latent=z)])
        assert np.allclose(code.z, z)
        assert code.synthetic

    def test_symmetric_latents_cancel(self):
        z = np.array([0.5, -2.0, 3.0])
        pool = [entry(0, [0.0], latent=z), entry(1, [0.0], latent=-z)]
        assert np.allclose(mean_latent(pool).z, 0.0)

    def test_law_of_large_numbers_bound(self):
        # mean of 10k standard normals: per-coordinate sigma = 0.01
        rng = np.random.default_rng(5)
        pool = [entry(i, [0.0], latent=rng.standard_normal(64)) for i in range(10_000)]
        code = mean_latent(pool)
        assert np.max(np.abs(code.z)) < 0.05

    def test_requires_latent_provenance(self):
        with pytest.raises(DataError):
            mean_latent([entry(0, [0.0])])

    def test_regenerates_through_backbone(self):
        cfg = ToyBackboneConfig(num_levels=2, base_resolution=8)
        latents = [LatentCode.from_seed(s, cfg.latent_dim) for s in range(4)]
        pool = [
            entry(i, [0.0], latent=c.z) for i, c in enumerate(latents)
        ]
        sample = first_round_seed(pool, lambda code: toy_generate(cfg, code))
        want = np.mean(np.stack([c.z for c in latents]), axis=0)
        assert np.allclose(sample.latent.z, want)
        assert sample.image.shape == (16, 16, 3)


class TestMeanEmbedding:
    def test_matches_materialized_mean(self):
        cfg = ToyBackboneConfig(num_levels=2, base_resolution=8)
        sample = toy_generate(cfg, LatentCode.from_seed(9, cfg.latent_dim))
        emb = mean_pixel_feature(sample.features)
        want = materialize(sample.features).astype(np.float64).mean(axis=(0, 1))
        assert np.allclose(emb, want, atol=1e-9)
