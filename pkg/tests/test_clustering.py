import math

import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

from subcat.annotations import BBox2D, GeoFeatures
from subcat.clustering import (
    DiscriminativeSubcategorization,
    KMeans,
    SpectralClustering,
    SpectralConfig,
    Strategy,
    Strategy1Binning,
    destandardize,
    dsc,
    fuse_affinities,
    gaussian_affinity,
    geo_clustering_matrix,
    kmeans,
    linear_svm_direction,
    median_pairwise_distance,
    model_dims_for_cluster,
    normalized_laplacian,
    residual_projection,
    spectral_cluster,
    standardize,
    strategy1_bins,
)

RNG = np.random.default_rng(42)


def two_blobs(n_per=30, sep=50.0, spread=0.5, d=3, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(0, spread, size=(n_per, d))
    b = rng.normal(0, spread, size=(n_per, d)) + sep
    return np.vstack([a, b]), np.array([0] * n_per + [1] * n_per)


def geo(alpha, level=0.0, trunc=0.0, aspect=1.0):
    return GeoFeatures(
        observation_angle=(math.cos(alpha), math.sin(alpha)),
        aspect_ratio=aspect,
        truncation=trunc,
        occlusion_level=level,
        occlusion_type=(1.0, 0.0, 0.0, 0.0),
    )


class TestStandardize:
    def test_round_trip(self):
        X = RNG.normal(3, 2, size=(20, 4))
        Xs, m, s = standardize(X)
        assert np.allclose(Xs.mean(axis=0), 0.0, atol=1e-9)
        assert np.allclose(Xs.std(axis=0), 1.0, atol=1e-9)
        assert np.allclose(destandardize(Xs, m, s), X, atol=1e-9)

    def test_constant_column_zeros(self):
        X = np.hstack([RNG.normal(size=(10, 2)), np.full((10, 1), 7.0)])
        Xs, _, _ = standardize(X)
        assert np.allclose(Xs[:, 2], 0.0)

    def test_already_standard_unchanged(self):
        X = RNG.normal(size=(500, 3))
        X = (X - X.mean(axis=0)) / X.std(axis=0)
        Xs, _, _ = standardize(X)
        assert np.allclose(Xs, X, atol=1e-9)


class TestKMeans:
    def test_k1_centroid_is_mean(self):
        X = RNG.normal(size=(25, 3))
        model = kmeans(X, 1, seed=0)
        assert np.allclose(model.centroids[0], X.mean(axis=0), atol=1e-12)

    def test_two_blob_recovery(self):
        X, labels = two_blobs(seed=1)
        model = kmeans(X, 2, seed=0)
        assert adjusted_rand_score(labels, model.assignments) == 1.0

    def test_identical_rows_repair_fires(self):
        X = np.ones((8, 2))
        est = KMeans(n_clusters=2, random_state=0).fit(X)
        assert est.n_empty_repairs_ >= 1
        assert np.bincount(est.labels_, minlength=2).min() >= 1

    def test_objective_monotone(self):
        for seed in range(10):
            X = np.random.default_rng(seed).normal(size=(60, 4))
            est = KMeans(n_clusters=5, random_state=seed).fit(X)
            assert np.all(np.diff(est.inertia_history_) <= 1e-9)

    def test_k_greater_than_n_rejected(self):
        with pytest.raises(ValueError):
            kmeans(np.eye(3), 4)

    def test_permutation_invariance_up_to_relabel(self):
        X, _ = two_blobs(n_per=20, seed=2)
        perm = np.random.default_rng(3).permutation(len(X))
        a = kmeans(X, 2, seed=5).assignments
        b = kmeans(X[perm], 2, seed=5).assignments
        back = np.empty_like(b)
        back[...] = b
        restored = np.empty_like(b)
        restored[perm] = back
        assert adjusted_rand_score(a, restored) == 1.0

    def test_predict_nearest_centroid(self):
        X, _ = two_blobs(seed=4)
        est = KMeans(n_clusters=2, random_state=0).fit(X)
        pred = est.predict(X)
        assert np.array_equal(pred, est.labels_)


class TestSpectral:
    def test_two_blobs_connected_component_oracle(self):
        X, labels = two_blobs(n_per=25, sep=40.0, spread=0.5, seed=5)
        sigma = 2.0
        model = spectral_cluster(X, SpectralConfig(sigma=sigma, k=2), seed=0)

        # oracle: connected components of W thresholded at 1e-6
        W = gaussian_affinity(X, sigma) > 1e-6
        n = len(X)
        comp = np.full(n, -1)
        cid = 0
        for i in range(n):
            if comp[i] >= 0:
                continue
            stack = [i]
            comp[i] = cid
            while stack:
                j = stack.pop()
                for nb in np.flatnonzero(W[j]):
                    if comp[nb] < 0:
                        comp[nb] = cid
                        stack.append(nb)
            cid += 1
        assert cid == 2
        assert adjusted_rand_score(comp, model.assignments) == 1.0
        assert adjusted_rand_score(labels, model.assignments) == 1.0

    def test_k_equals_n_singletons(self):
        X = RNG.normal(size=(8, 2)) * 10
        model = spectral_cluster(X, SpectralConfig(sigma=None, k=8), seed=0)
        assert len(np.unique(model.assignments)) == 8

    def test_duplicates_co_assigned(self):
        X, _ = two_blobs(n_per=10, seed=6)
        XX = np.vstack([X, X])
        model = spectral_cluster(XX, SpectralConfig(sigma=None, k=2), seed=0)
        n = len(X)
        assert np.array_equal(model.assignments[:n], model.assignments[n:])

    def test_laplacian_psd_and_residuals(self):
        X, _ = two_blobs(n_per=20, seed=7)
        est = SpectralClustering(n_clusters=2, random_state=0).fit(X)
        assert est.eigenvalues_.min() >= -1e-8
        assert np.all(est.eigenpair_residuals_ <= 1e-6)

    def test_laplacian_symmetry(self):
        X = RNG.normal(size=(15, 3))
        L = normalized_laplacian(gaussian_affinity(X, 1.0))
        assert np.allclose(L, L.T, atol=1e-12)

    def test_isolated_vertex_warns(self):
        X = np.vstack([np.zeros((3, 2)), np.full((1, 2), 1e6)])
        W = gaussian_affinity(X, 1.0)
        with pytest.warns(UserWarning):
            normalized_laplacian(W)

    def test_subsampling_extension(self):
        X, labels = two_blobs(n_per=60, sep=60.0, seed=8)
        est = SpectralClustering(
            n_clusters=2, sigma=2.0, max_points=40, random_state=0
        ).fit(X)
        assert adjusted_rand_score(labels, est.labels_) == 1.0


class TestSVMDirection:
    def test_1d_sign_toward_positives(self):
        Xpos = np.full((10, 1), 2.0)
        Xneg = np.full((10, 1), -2.0)
        w = linear_svm_direction(Xpos, Xneg)
        assert w[0] > 0

    def test_unit_norm(self):
        Xpos = RNG.normal(2, 1, size=(15, 4))
        Xneg = RNG.normal(-2, 1, size=(15, 4))
        w = linear_svm_direction(Xpos, Xneg)
        assert np.linalg.norm(w) == pytest.approx(1.0, abs=1e-9)

    def test_separable_2d_training_accuracy(self):
        Xpos = RNG.normal(0, 0.5, size=(20, 2)) + [4, 0]
        Xneg = RNG.normal(0, 0.5, size=(20, 2)) - [4, 0]
        w = linear_svm_direction(Xpos, Xneg)
        assert (Xpos @ w).min() > (Xneg @ w).max()

    def test_degenerate_identical_data(self):
        X = np.ones((5, 3))
        with pytest.raises(ValueError):
            linear_svm_direction(X, X)


class TestResidualProjection:
    def test_parallel_maps_to_zero(self):
        w = np.array([1.0, 0.0])
        assert np.allclose(residual_projection(np.array([[3.0, 0.0]]), w), 0.0)

    def test_orthogonal_unchanged(self):
        w = np.array([1.0, 0.0])
        x = np.array([[0.0, 2.0]])
        assert np.allclose(residual_projection(x, w), x)

    def test_result_orthogonal_to_w(self):
        w = RNG.normal(size=5)
        w /= np.linalg.norm(w)
        X = RNG.normal(size=(20, 5))
        R = residual_projection(X, w)
        assert np.all(np.abs(R @ w) <= 1e-9)

    def test_non_unit_w_rejected(self):
        with pytest.raises(ValueError):
            residual_projection(np.eye(2), np.array([2.0, 0.0]))


class TestDSC:
    def test_k1_converges_one_round(self):
        Xpos = RNG.normal(size=(25, 3))
        Xneg = RNG.normal(size=(40, 3)) + 10
        model = dsc(Xpos, Xneg, 1, rounds=5, seed=0)
        assert np.all(model.assignments == 0)

    def test_two_mode_recovery(self):
        rng = np.random.default_rng(9)
        mode_a = rng.normal(0, 0.4, size=(40, 2)) + [6, 0]
        mode_b = rng.normal(0, 0.4, size=(40, 2)) + [-6, 0]
        Xpos = np.vstack([mode_a, mode_b])
        Xneg = rng.normal(0, 0.4, size=(60, 2)) + [0, 8]
        model = dsc(Xpos, Xneg, 2, rounds=10, seed=0)
        truth = np.array([0] * 40 + [1] * 40)
        assert adjusted_rand_score(truth, model.assignments) == 1.0

    def test_min_cluster_size_guarantee(self):
        rng = np.random.default_rng(10)
        Xpos = rng.normal(size=(50, 3))
        Xneg = rng.normal(size=(50, 3)) + 5
        est = DiscriminativeSubcategorization(
            n_clusters=3, rounds=6, random_state=0
        ).fit_pos_neg(Xpos, Xneg)
        counts = np.bincount(est.labels_, minlength=3)
        assert counts.min() >= est.m_min_

    def test_objective_nondecreasing_on_separable_toy(self):
        rng = np.random.default_rng(11)
        mode_a = rng.normal(0, 0.3, size=(30, 2)) + [5, 0]
        mode_b = rng.normal(0, 0.3, size=(30, 2)) + [-5, 0]
        Xneg = rng.normal(0, 0.3, size=(50, 2)) + [0, 6]
        est = DiscriminativeSubcategorization(
            n_clusters=2, rounds=8, random_state=0
        ).fit_pos_neg(np.vstack([mode_a, mode_b]), Xneg)
        hist = est.objective_history_
        assert np.all(np.diff(hist) >= -1e-6)

    def test_k_exceeding_positives_rejected(self):
        with pytest.raises(ValueError):
            dsc(np.eye(3), np.eye(3) + 5, 4)


class TestStrategy1:
    def test_edge_convention(self):
        model = strategy1_bins([geo(-math.pi + 0.01)], B=4, M=1)
        est = Strategy1Binning(4, 1).fit([geo(-math.pi + 0.01)])
        assert est.bin_of_cluster_[model.assignments[0]] == 0

    def test_monolithic(self):
        feats = [geo(a) for a in np.linspace(-3, 3, 9)]
        model = strategy1_bins(feats, B=1, M=1)
        assert model.k == 1
        assert np.all(model.assignments == 0)

    def test_b10_m2_example(self):
        # orientation bin 5, occlusion bin 1 -> raw bin id 11
        feats = [geo(0.0, level=0.6), geo(-3.0, level=0.8), geo(2.0, level=0.0)]
        est = Strategy1Binning(10, 2).fit(feats)
        assert est.max_level_ == pytest.approx(0.8)
        raw = est.bin_of_cluster_[est.labels_[0]]
        assert raw == 5 * 2 + 1 == 11

    def test_split_edges(self):
        feats = [geo(0.0, level=0.10), geo(0.0, level=0.101), geo(0.0, level=0.0)]
        est = Strategy1Binning(1, 1, split=True).fit(feats)
        raw = est.bin_of_cluster_[est.labels_]
        assert raw[0] == 0 and raw[2] == 0  # 10% belongs to the visible bin
        assert raw[1] == 1

    def test_circle_partition_property(self):
        B = 7
        alphas = np.linspace(-math.pi + 1e-9, math.pi, 200)
        feats = [geo(a) for a in alphas]
        est = Strategy1Binning(B, 1).fit(feats)
        raw = est.bin_of_cluster_[est.labels_]
        widths = 2 * math.pi / B
        for a, r in zip(alphas, raw):
            expected = min(int(B * (a + math.pi) / (2 * math.pi)), B - 1)
            assert r == expected
        assert set(raw) == set(range(B))
        del widths

    def test_cluster_model_compacts_empty_bins(self):
        feats = [geo(-3.0), geo(3.0)]
        model = strategy1_bins(feats, B=8, M=1)
        assert model.k == 2
        assert sorted(np.unique(model.assignments)) == [0, 1]


class TestFuseAffinities:
    def test_endpoint_weights(self):
        A = np.array([[0.0, 1.0], [1.0, 0.0]])
        B = np.array([[0.0, 0.5], [0.5, 0.0]])
        assert np.array_equal(fuse_affinities(A, B, 1.0), A)
        assert np.array_equal(fuse_affinities(A, B, 0.0), B)
        assert np.allclose(fuse_affinities(A, B, 0.5), (A + B) / 2)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            fuse_affinities(np.zeros((2, 2)), np.zeros((3, 3)), 0.5)

    def test_asymmetric_rejected(self):
        A = np.array([[0.0, 1.0], [0.2, 0.0]])
        with pytest.raises(ValueError):
            fuse_affinities(A, A, 0.5)


class TestModelDims:
    def test_square_cluster(self):
        boxes = [BBox2D(0, 0, 50, 50)] * 5
        assert model_dims_for_cluster(boxes) == (32, 32, 4, 4)

    def test_aspect_075(self):
        boxes = [BBox2D(0, 0, 100, 75)] * 3
        w, h, pw, ph = model_dims_for_cluster(boxes)
        assert (w, h) == (32, 24)
        assert pw == 4
        assert ph == 4  # 3 px raw padding rounds to one whole cell

    def test_single_sample(self):
        assert model_dims_for_cluster([BBox2D(0, 0, 40, 80)])[1] == 64

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            model_dims_for_cluster([])


class TestGeoMatrix:
    def test_gating_zeroes_occluder_block(self):
        feats = [geo(0.3), geo(-1.0, level=0.2), geo(2.0)]
        X = geo_clustering_matrix(feats)
        assert X.shape == (3, 18)
        assert np.allclose(X[0, 9:17], 0.0)
        assert np.allclose(X[2, 9:17], 0.0)

    def test_median_distance_positive(self):
        X = RNG.normal(size=(12, 4))
        assert median_pairwise_distance(X) > 0
