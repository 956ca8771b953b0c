"""Subcategory assignment: uniform binning, k-means, spectral clustering and
discriminative subcategorization (DSC).

Estimators follow the sklearn fit/predict conventions; each one also has a
thin functional wrapper returning a :class:`ClusterModel`, the record the
rest of the pipeline consumes.
"""

from __future__ import annotations

import csv
import enum
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin

from .annotations import BBox2D, GeoFeatures, geo_feature_matrix, wrap_angle
from .linear_models import LinearSVM
from .validation import (
    check_feature_matrix,
    check_is_fitted,
    check_random_state,
)

SPLIT_OCCLUSION_EDGE = 0.10  # split mode: [0, 0.10] visible vs (0.10, 1] occluded


class Strategy(enum.Enum):
    STRATEGY1 = "strategy1"
    KMEANS = "kmeans"
    SPECTRAL = "spectral"
    DSC = "dsc"


@dataclass
class ClusterModel:
    """A finalized subcategory assignment: contiguous labels, no empty cluster."""

    k: int
    assignments: np.ndarray
    strategy: Strategy
    centroids: Optional[np.ndarray] = None
    orientation_bins: Optional[int] = None
    occlusion_bins: Optional[int] = None
    split: bool = False

    def __post_init__(self):
        self.assignments = np.asarray(self.assignments, dtype=np.int64)
        counts = np.bincount(self.assignments, minlength=self.k)
        if len(counts) > self.k or (self.k > 0 and counts.min() == 0):
            raise ValueError("assignments must cover 0..k-1 with no empty cluster")

    def members(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == label)


@dataclass(frozen=True)
class SpectralConfig:
    sigma: Optional[float]
    k: int

    def __post_init__(self):
        if self.sigma is not None and self.sigma <= 0:
            raise ValueError("sigma must be positive")


def standardize(X) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Zero-mean, unit-std columns (std floored at 1e-12)."""
    X = check_feature_matrix(X, min_samples=2)
    means = X.mean(axis=0)
    stds = X.std(axis=0)
    stds = np.where(stds > 1e-12, stds, 1e-12)
    return (X - means) / stds, means, stds


def destandardize(Xs, means, stds) -> np.ndarray:
    return np.asarray(Xs) * np.asarray(stds) + np.asarray(means)


def pairwise_sq_dists(X: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", X, X)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def median_pairwise_distance(X: np.ndarray) -> float:
    d2 = pairwise_sq_dists(X)
    iu = np.triu_indices(len(X), k=1)
    if iu[0].size == 0:
        return 1.0
    med = float(np.median(np.sqrt(d2[iu])))
    return med if med > 1e-12 else 1.0


def gaussian_affinity(X: np.ndarray, sigma: float) -> np.ndarray:
    """W_ij = exp(-||x_i - x_j||^2 / (2 sigma^2)) with a zero diagonal."""
    W = np.exp(-pairwise_sq_dists(X) / (2.0 * sigma * sigma))
    np.fill_diagonal(W, 0.0)
    return W


def normalized_laplacian(W: np.ndarray) -> np.ndarray:
    """L = I - D^(-1/2) W D^(-1/2); zero degrees are floored at 1e-12."""
    degrees = W.sum(axis=1)
    if np.any(degrees < 1e-12):
        warnings.warn("isolated vertex in affinity graph; flooring degree at 1e-12")
        degrees = np.maximum(degrees, 1e-12)
    inv_sqrt = 1.0 / np.sqrt(degrees)
    L = -W * inv_sqrt[:, None] * inv_sqrt[None, :]
    L[np.diag_indices_from(L)] += 1.0
    return 0.5 * (L + L.T)


class KMeans(BaseEstimator, ClusterMixin):
    """Lloyd's algorithm with k-means++ seeding.

    An empty cluster is repaired by stealing the point farthest from its
    own centroid, which keeps the objective non-increasing; per-iteration
    inertia is recorded in ``inertia_history_``.
    """

    def __init__(self, n_clusters=8, max_iter=100, random_state=0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_feature_matrix(X)
        k, n = self.n_clusters, X.shape[0]
        if k < 1 or k > n:
            raise ValueError(f"n_clusters must be in [1, {n}], got {k}")
        rng = check_random_state(self.random_state)
        centroids = _kmeans_pp_init(X, k, rng)

        labels = np.full(n, -1, dtype=np.int64)
        inertia_history = []
        n_repairs = 0
        n_iter = 0
        for _ in range(self.max_iter):
            n_iter += 1
            d2 = _sq_dists_to(X, centroids)
            new_labels = np.argmin(d2, axis=1)

            while True:
                counts = np.bincount(new_labels, minlength=k)
                empties = np.flatnonzero(counts == 0)
                if empties.size == 0:
                    break
                # steal the point farthest from its own centroid, but never
                # from a cluster that would become empty itself
                own = d2[np.arange(n), new_labels].copy()
                own[counts[new_labels] < 2] = -np.inf
                victim = int(np.argmax(own))
                new_labels[victim] = empties[0]
                n_repairs += 1

            for j in range(k):
                centroids[j] = X[new_labels == j].mean(axis=0)
            d2 = _sq_dists_to(X, centroids)
            inertia_history.append(float(d2[np.arange(n), new_labels].sum()))

            if np.array_equal(new_labels, labels):
                break
            labels = new_labels

        self.cluster_centers_ = centroids
        self.labels_ = labels
        self.inertia_history_ = np.asarray(inertia_history)
        self.inertia_ = inertia_history[-1]
        self.n_empty_repairs_ = n_repairs
        self.n_iter_ = n_iter
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_feature_matrix(X)
        return np.argmin(_sq_dists_to(X, self.cluster_centers_), axis=1)

    def to_cluster_model(self) -> ClusterModel:
        check_is_fitted(self, "labels_")
        return ClusterModel(
            k=self.n_clusters,
            assignments=self.labels_,
            strategy=Strategy.KMEANS,
            centroids=self.cluster_centers_.copy(),
        )


def _sq_dists_to(X: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = (
        np.einsum("ij,ij->i", X, X)[:, None]
        - 2.0 * (X @ centroids.T)
        + np.einsum("ij,ij->i", centroids, centroids)[None, :]
    )
    np.maximum(d2, 0.0, out=d2)
    return d2


def _kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists_to(X, X[chosen[-1]][None, :])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 1e-24:
            remaining = np.setdiff1d(np.arange(n), chosen)
            chosen.append(int(rng.choice(remaining)))
        else:
            chosen.append(int(rng.choice(n, p=d2 / total)))
        d2 = np.minimum(d2, _sq_dists_to(X, X[chosen[-1]][None, :])[:, 0])
    return X[chosen].astype(np.float64).copy()


class SpectralClustering(BaseEstimator, ClusterMixin):
    """Normalized-Laplacian spectral clustering with a Gaussian kernel.

    ``sigma=None`` uses the median pairwise distance. ``affinity`` may be
    "rbf" (default) or "precomputed" (X is then a symmetric affinity
    matrix). Above ``max_points`` rows, a seeded subsample is clustered and
    the rest are assigned by nearest feature-space cluster centroid.
    """

    def __init__(
        self,
        n_clusters=8,
        sigma=None,
        affinity="rbf",
        max_points=4000,
        random_state=0,
    ):
        self.n_clusters = n_clusters
        self.sigma = sigma
        self.affinity = affinity
        self.max_points = max_points
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_feature_matrix(X)
        n = X.shape[0]
        if self.n_clusters > n:
            raise ValueError(f"n_clusters={self.n_clusters} exceeds n={n}")
        rng = check_random_state(self.random_state)

        if n > self.max_points and self.affinity == "rbf":
            subset = np.sort(rng.choice(n, size=self.max_points, replace=False))
            sub = self._fit_exact(X[subset], rng)
            labels = np.empty(n, dtype=np.int64)
            labels[subset] = sub
            centroids = np.stack(
                [X[subset][sub == j].mean(axis=0) for j in range(self.n_clusters)]
            )
            rest = np.setdiff1d(np.arange(n), subset)
            labels[rest] = np.argmin(_sq_dists_to(X[rest], centroids), axis=1)
            self.labels_ = labels
        else:
            self.labels_ = self._fit_exact(X, rng)
        return self

    def _fit_exact(self, X, rng):
        if self.affinity == "precomputed":
            W = np.asarray(X, dtype=np.float64)
            if W.shape[0] != W.shape[1] or not np.allclose(W, W.T, atol=1e-8):
                raise ValueError("precomputed affinity must be square symmetric")
            W = W.copy()
            np.fill_diagonal(W, 0.0)
            self.sigma_ = None
        elif self.affinity == "rbf":
            sigma = self.sigma if self.sigma is not None else median_pairwise_distance(X)
            self.sigma_ = float(sigma)
            W = gaussian_affinity(X, sigma)
        else:
            raise ValueError(f"unknown affinity {self.affinity!r}")

        L = normalized_laplacian(W)
        eigenvalues, eigenvectors = np.linalg.eigh(L)
        k = self.n_clusters
        U = eigenvectors[:, :k]
        resid = L @ U - U * eigenvalues[None, :k]
        self.eigenvalues_ = eigenvalues
        self.eigenpair_residuals_ = np.linalg.norm(resid, axis=0)

        norms = np.linalg.norm(U, axis=1, keepdims=True)
        embedding = np.where(norms > 1e-12, U / np.where(norms > 0, norms, 1.0), U)
        self.embedding_ = embedding

        km = KMeans(n_clusters=k, max_iter=300, random_state=rng)
        return km.fit(embedding).labels_

    def to_cluster_model(self) -> ClusterModel:
        check_is_fitted(self, "labels_")
        return ClusterModel(
            k=self.n_clusters, assignments=self.labels_, strategy=Strategy.SPECTRAL
        )


def linear_svm_direction(Xpos, Xneg, C=1.0, epochs=200, random_state=0) -> np.ndarray:
    """Unit-norm weight vector of a linear SVM separating pos from neg."""
    Xpos = check_feature_matrix(Xpos, name="Xpos")
    Xneg = check_feature_matrix(Xneg, name="Xneg")
    X = np.vstack([Xpos, Xneg])
    y = np.concatenate([np.ones(len(Xpos)), -np.ones(len(Xneg))])
    svm = LinearSVM(C=C, epochs=epochs, random_state=random_state).fit(X, y)
    norm = float(np.linalg.norm(svm.coef_))
    if norm < 1e-12:
        raise ValueError("degenerate data: SVM produced a zero weight vector")
    return svm.coef_ / norm


def residual_projection(X, w) -> np.ndarray:
    """Remove the component along the unit vector w: x -> x - (w.x) w."""
    X = check_feature_matrix(X)
    w = np.asarray(w, dtype=np.float64)
    if abs(np.linalg.norm(w) - 1.0) > 1e-6:
        raise ValueError("w must have unit norm")
    return X - np.outer(X @ w, w)


class DiscriminativeSubcategorization(BaseEstimator, ClusterMixin):
    """Alternating per-cluster SVM training and cluster reassignment.

    Each round trains one linear SVM per cluster (its members against all
    negatives), reassigns every positive to its highest-scoring cluster,
    then tops up clusters below the minimum size with their highest-scoring
    outsiders. ``min_cluster_size=None`` uses max(20, 1% of positives),
    capped at n_pos // k so the constraint stays satisfiable.
    """

    def __init__(
        self,
        n_clusters=8,
        rounds=10,
        C=1.0,
        svm_epochs=100,
        min_cluster_size=None,
        random_state=0,
    ):
        self.n_clusters = n_clusters
        self.rounds = rounds
        self.C = C
        self.svm_epochs = svm_epochs
        self.min_cluster_size = min_cluster_size
        self.random_state = random_state

    def fit(self, X, y, init_labels=None):
        """``y`` marks positives with 1 and negatives with 0 (or -1)."""
        X = check_feature_matrix(X)
        y = np.asarray(y)
        pos_mask = y == 1
        Xpos, Xneg = X[pos_mask], X[~pos_mask]
        return self.fit_pos_neg(Xpos, Xneg, init_labels=init_labels)

    def fit_pos_neg(self, Xpos, Xneg, init_labels=None):
        Xpos = check_feature_matrix(Xpos, name="Xpos")
        Xneg = check_feature_matrix(Xneg, name="Xneg")
        n, k = Xpos.shape[0], self.n_clusters
        if k > n:
            raise ValueError(f"n_clusters={k} exceeds number of positives {n}")
        seeds = np.random.SeedSequence(_seed_entropy(self.random_state)).spawn(2)

        if init_labels is None:
            labels = self._default_init(Xpos, Xneg, seeds[0])
        else:
            labels = np.asarray(init_labels, dtype=np.int64).copy()
            if labels.shape != (n,):
                raise ValueError("init_labels must have one label per positive")
            if np.bincount(labels, minlength=k).min() == 0:
                raise ValueError("init_labels must populate every cluster")

        m_min = self.min_cluster_size
        if m_min is None:
            m_min = max(20, math.ceil(0.01 * n))
        m_min = max(1, min(m_min, n // k))
        self.m_min_ = m_min

        svm_seeds = seeds[1].spawn(self.rounds * k)
        objective_history = []
        svms: list[LinearSVM] = []
        n_rounds = 0
        for rnd in range(self.rounds):
            n_rounds += 1
            svms = []
            yneg = -np.ones(len(Xneg))
            for j in range(k):
                members = Xpos[labels == j]
                Xj = np.vstack([members, Xneg])
                yj = np.concatenate([np.ones(len(members)), yneg])
                seed = np.random.default_rng(svm_seeds[rnd * k + j])
                svms.append(
                    LinearSVM(C=self.C, epochs=self.svm_epochs, random_state=seed)
                    .fit(Xj, yj)
                )
            scores = np.stack([m.decision_function(Xpos) for m in svms], axis=1)
            new_labels = np.argmax(scores, axis=1)
            objective_history.append(float(scores.max(axis=1).sum()))

            new_labels = _repair_min_size(new_labels, scores, k, m_min)
            if np.array_equal(new_labels, labels):
                break
            labels = new_labels

        self.labels_ = labels
        self.svms_ = svms
        self.objective_history_ = np.asarray(objective_history)
        self.n_rounds_ = n_rounds
        return self

    def _default_init(self, Xpos, Xneg, seed):
        rng = np.random.default_rng(seed)
        w = linear_svm_direction(
            Xpos, Xneg, C=self.C, epochs=self.svm_epochs,
            random_state=np.random.default_rng(rng.integers(2**32)),
        )
        residuals = residual_projection(Xpos, w)
        sc = SpectralClustering(
            n_clusters=self.n_clusters,
            random_state=np.random.default_rng(rng.integers(2**32)),
        )
        return sc.fit(residuals).labels_

    def to_cluster_model(self) -> ClusterModel:
        check_is_fitted(self, "labels_")
        return ClusterModel(
            k=self.n_clusters, assignments=self.labels_, strategy=Strategy.DSC
        )


def _seed_entropy(random_state):
    if isinstance(random_state, np.random.Generator):
        return int(random_state.integers(2**63))
    return random_state


def _repair_min_size(labels, scores, k, m_min) -> np.ndarray:
    """Top up clusters below m_min with their highest-scoring outsiders.

    Donors must stay at or above m_min themselves; satisfiability is
    guaranteed because k * m_min <= n.
    """
    labels = labels.copy()
    counts = np.bincount(labels, minlength=k)
    for j in range(k):
        while counts[j] < m_min:
            candidates = np.flatnonzero((labels != j) & (counts[labels] > m_min))
            if candidates.size == 0:
                break
            best = candidates[np.argmax(scores[candidates, j])]
            counts[labels[best]] -= 1
            labels[best] = j
            counts[j] += 1
    return labels


class Strategy1Binning(BaseEstimator):
    """Uniform orientation x occlusion-level binning.

    Orientation bins have edges starting at -pi. Occlusion uses either the
    two split bins [0, 0.10] / (0.10, 1], or ``occlusion_bins`` uniform
    bins over [0, max observed level] learned in ``fit``. Bin ids are
    compacted to contiguous cluster labels (empty bins get no label).
    """

    def __init__(self, orientation_bins=8, occlusion_bins=1, split=False):
        self.orientation_bins = orientation_bins
        self.occlusion_bins = occlusion_bins
        self.split = split

    def fit(self, features: Sequence[GeoFeatures], y=None):
        if self.orientation_bins < 1 or self.occlusion_bins < 1:
            raise ValueError("bin counts must be >= 1")
        if not features:
            raise ValueError("no features to bin")
        levels = np.array([f.occlusion_level for f in features])
        self.max_level_ = float(levels.max())
        raw = self._raw_bins(features)
        populated = np.unique(raw)
        self.bin_of_cluster_ = populated
        remap = {b: j for j, b in enumerate(populated)}
        self.labels_ = np.array([remap[b] for b in raw], dtype=np.int64)
        self.k_ = len(populated)
        return self

    def _raw_bins(self, features) -> np.ndarray:
        B = self.orientation_bins
        occ_bins = 2 if self.split else self.occlusion_bins
        out = np.empty(len(features), dtype=np.int64)
        for i, f in enumerate(features):
            alpha = wrap_angle(f.alpha)
            ob = min(int(B * (alpha + math.pi) / (2.0 * math.pi)), B - 1)
            if self.split:
                cb = 0 if f.occlusion_level <= SPLIT_OCCLUSION_EDGE else 1
            elif self.occlusion_bins == 1 or self.max_level_ <= 0.0:
                cb = 0
            else:
                cb = min(
                    int(self.occlusion_bins * f.occlusion_level / self.max_level_),
                    self.occlusion_bins - 1,
                )
            out[i] = ob * occ_bins + cb
        return out

    def predict(self, features: Sequence[GeoFeatures]) -> np.ndarray:
        check_is_fitted(self, "bin_of_cluster_")
        raw = self._raw_bins(features)
        remap = {b: j for j, b in enumerate(self.bin_of_cluster_)}
        out = np.empty(len(raw), dtype=np.int64)
        for i, b in enumerate(raw):
            if b in remap:
                out[i] = remap[b]
            else:  # unseen bin: nearest populated bin id
                out[i] = int(np.argmin(np.abs(self.bin_of_cluster_ - b)))
        return out

    def to_cluster_model(self) -> ClusterModel:
        check_is_fitted(self, "labels_")
        return ClusterModel(
            k=self.k_,
            assignments=self.labels_,
            strategy=Strategy.STRATEGY1,
            orientation_bins=self.orientation_bins,
            occlusion_bins=2 if self.split else self.occlusion_bins,
            split=self.split,
        )


def fuse_affinities(W_geo, W_vis, weight_geo: float) -> np.ndarray:
    """Blend two affinity matrices: weight_geo * W_geo + (1-w) * W_vis."""
    W_geo = np.asarray(W_geo, dtype=np.float64)
    W_vis = np.asarray(W_vis, dtype=np.float64)
    if W_geo.shape != W_vis.shape:
        raise ValueError(f"shape mismatch: {W_geo.shape} vs {W_vis.shape}")
    if not 0.0 <= weight_geo <= 1.0:
        raise ValueError("weight_geo must lie in [0, 1]")
    for name, W in (("W_geo", W_geo), ("W_vis", W_vis)):
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise ValueError(f"{name} must be square")
        if not np.allclose(W, W.T, atol=1e-8):
            raise ValueError(f"{name} must be symmetric")
    return weight_geo * W_geo + (1.0 - weight_geo) * W_vis


def model_dims_for_cluster(
    samples: Sequence[BBox2D], base_width: int = 32, cell: int = 4
) -> tuple[int, int, int, int]:
    """Model (w, h) and padding for a cluster from its median aspect ratio.

    Width is fixed at ``base_width``; height is the median h/w times that,
    rounded to a whole cell. Padding is 1/8 of each model dimension, also
    rounded to whole cells (half-up).
    """
    if not samples:
        raise ValueError("cluster has no samples")
    if base_width % cell:
        raise ValueError(f"base_width must be a multiple of {cell}")
    aspects = np.array([b.height / b.width for b in samples])
    aspect = float(np.median(aspects))
    model_w = base_width
    model_h = max(cell, int(model_w * aspect / cell + 0.5) * cell)
    pad_w = int((model_w / 8.0) / cell + 0.5) * cell
    pad_h = int((model_h / 8.0) / cell + 0.5) * cell
    return model_w, model_h, pad_w, pad_h


# ---------------------------------------------------------------------------
# Functional wrappers in terms of ClusterModel


def kmeans(X, k: int, seed: int = 0, max_iters: int = 100) -> ClusterModel:
    return KMeans(n_clusters=k, max_iter=max_iters, random_state=seed).fit(X).to_cluster_model()


def spectral_cluster(X, cfg: SpectralConfig, seed: int = 0) -> ClusterModel:
    est = SpectralClustering(n_clusters=cfg.k, sigma=cfg.sigma, random_state=seed)
    return est.fit(X).to_cluster_model()


def dsc(
    Xpos,
    Xneg,
    k: int,
    init: Optional[ClusterModel] = None,
    rounds: int = 10,
    seed: int = 0,
    **kwargs,
) -> ClusterModel:
    est = DiscriminativeSubcategorization(
        n_clusters=k, rounds=rounds, random_state=seed, **kwargs
    )
    init_labels = init.assignments if init is not None else None
    return est.fit_pos_neg(Xpos, Xneg, init_labels=init_labels).to_cluster_model()


def strategy1_bins(
    features: Sequence[GeoFeatures], B: int, M: int, split: bool = False
) -> ClusterModel:
    return Strategy1Binning(B, M, split).fit(features).to_cluster_model()


def geo_clustering_matrix(features: Sequence[GeoFeatures]) -> np.ndarray:
    """Standardized geometric feature matrix for distance-based clustering.

    Occluder-dependent columns are zero for unoccluded samples before
    standardization, then re-gated after it so "no occluder" stays a
    neutral (zero) block rather than drifting to -mean/std.
    """
    X = geo_feature_matrix(features)
    if X.shape[0] < 2:
        return X
    Xs, _, _ = standardize(X)
    gate = X[:, -1:] != 0.0
    occluder_cols = slice(9, 17)  # rel/occluder orientation, rel position, side
    Xs[:, occluder_cols] = np.where(gate, Xs[:, occluder_cols], 0.0)
    return Xs


# ---------------------------------------------------------------------------
# Cluster report files


def write_cluster_report(path, sample_ids, model: ClusterModel, features) -> None:
    """CSV: sample_id, cluster, observation_angle, occlusion_level, truncation."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["sample_id", "cluster", "observation_angle", "occlusion_level", "truncation"]
        )
        for sid, label, feat in zip(sample_ids, model.assignments, features):
            writer.writerow(
                [sid, int(label), repr(feat.alpha), repr(feat.occlusion_level),
                 repr(feat.truncation)]
            )


def write_cluster_summary(path, model: ClusterModel, features, n_angle_bins=36) -> None:
    """Per-cluster CSV: size, mean aspect, and a 36-bin orientation histogram."""
    alphas = np.array([f.alpha for f in features])
    aspects = np.array([f.aspect_ratio for f in features])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["cluster", "size", "mean_aspect"]
            + [f"orient_hist_{i:02d}" for i in range(n_angle_bins)]
        )
        for j in range(model.k):
            idx = model.members(j)
            hist, _ = np.histogram(
                alphas[idx], bins=n_angle_bins, range=(-math.pi, math.pi)
            )
            writer.writerow(
                [j, len(idx), repr(float(aspects[idx].mean()))]
                + [int(h) for h in hist]
            )
