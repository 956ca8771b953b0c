"""Linear learners shared by clustering and orientation estimation.

All three estimators are trained by dual coordinate descent with a seeded
per-epoch permutation, so identical (data, params, seed) reproduce
bit-identical models. The bias is handled through an augmented constant
feature; this regularizes the bias too, which is accepted as an
approximation and noted here rather than special-cased in the optimizer.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin

from .validation import (
    check_feature_matrix,
    check_is_fitted,
    check_labels,
    check_random_state,
)

FORMAT_TAG = "subcat-linear-1"


def _augment(X: np.ndarray) -> np.ndarray:
    return np.hstack([X, np.ones((X.shape[0], 1))])


class LinearSVM(BaseEstimator, ClassifierMixin):
    """Binary L1-hinge SVM: min 1/2 ||w||^2 + C sum max(0, 1 - y (w.x + b)).

    Optimized in the dual until the duality gap drops below ``tol`` or
    ``epochs`` passes complete.
    """

    def __init__(self, C=1.0, epochs=200, tol=1e-3, random_state=0):
        self.C = C
        self.epochs = epochs
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y):
        X = check_feature_matrix(X)
        y = check_labels(np.asarray(y, dtype=np.float64), X.shape[0])
        if not (np.any(y > 0) and np.any(y < 0)):
            raise ValueError("both classes (+1 and -1) must be present")
        if not np.all(np.isin(y, (-1.0, 1.0))):
            raise ValueError("labels must be in {-1, +1}")

        A = _augment(X)
        n, d = A.shape
        q = np.einsum("ij,ij->i", A, A)
        rng = check_random_state(self.random_state)
        alpha = np.zeros(n)
        w = np.zeros(d)
        primal_hist, dual_hist = [], []
        n_epochs = 0
        for _ in range(self.epochs):
            order = rng.permutation(n)
            for i in order:
                if q[i] <= 0.0:
                    continue
                g = y[i] * (A[i] @ w) - 1.0
                a_old = alpha[i]
                a_new = min(max(a_old - g / q[i], 0.0), self.C)
                if a_new != a_old:
                    alpha[i] = a_new
                    w += (a_new - a_old) * y[i] * A[i]
            n_epochs += 1
            margins = 1.0 - y * (A @ w)
            primal = 0.5 * (w @ w) + self.C * np.maximum(margins, 0.0).sum()
            dual = alpha.sum() - 0.5 * (w @ w)
            primal_hist.append(primal)
            dual_hist.append(dual)
            if primal - dual <= self.tol:
                break

        self.coef_ = w[:-1].copy()
        self.intercept_ = float(w[-1])
        self.dual_coef_ = alpha
        self.objective_history_ = np.asarray(primal_hist)
        self.dual_objective_history_ = np.asarray(dual_hist)
        self.n_iter_ = n_epochs
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_feature_matrix(X)
        if X.shape[1] != self.coef_.shape[0]:
            raise ValueError(
                f"X has {X.shape[1]} features, model expects {self.coef_.shape[0]}"
            )
        return X @ self.coef_ + self.intercept_

    def predict(self, X):
        return np.where(self.decision_function(X) >= 0.0, 1.0, -1.0)

    def to_json_dict(self) -> dict:
        check_is_fitted(self, "coef_")
        return {
            "format": FORMAT_TAG,
            "kind": "binary_svm",
            "C": self.C,
            "weights": self.coef_.tolist(),
            "bias": self.intercept_,
        }


class CrammerSingerSVM(BaseEstimator, ClassifierMixin):
    """Multiclass SVM with a shared slack per sample.

    One weight vector per class, no bias, optimized as a whole: each dual
    subproblem (one sample, all classes) is solved exactly by a sorted
    water-filling step. Prediction is argmax of the class scores with ties
    broken toward the lowest class index.
    """

    def __init__(self, C=1.0, epochs=200, tol=1e-6, n_classes=None, random_state=0):
        self.C = C
        self.epochs = epochs
        self.tol = tol
        self.n_classes = n_classes
        self.random_state = random_state

    def fit(self, X, y):
        X = check_feature_matrix(X)
        y = check_labels(np.asarray(y), X.shape[0])
        classes = np.unique(y)
        if self.n_classes is not None:
            expected = np.arange(self.n_classes)
            missing = np.setdiff1d(expected, classes)
            if missing.size:
                raise ValueError(f"classes missing from y: {missing.tolist()}")
            classes = expected
        if classes.size < 2:
            raise ValueError("need at least 2 classes")
        class_index = {c: j for j, c in enumerate(classes)}
        yi = np.array([class_index[c] for c in y])

        n, d = X.shape
        k = classes.size
        q = np.einsum("ij,ij->i", X, X)
        rng = check_random_state(self.random_state)
        alpha = np.zeros((n, k))
        W = np.zeros((k, d))
        objective_hist, dual_hist = [], []
        n_epochs = 0
        for _ in range(self.epochs):
            max_delta = 0.0
            order = rng.permutation(n)
            for i in order:
                if q[i] <= 0.0:
                    continue
                x = X[i]
                yc = yi[i]
                scores = W @ x
                b = scores - q[i] * alpha[i]
                b[yc] -= 1.0
                upper = np.zeros(k)
                upper[yc] = self.C
                v = _solve_cs_subproblem(b, upper, q[i])
                delta = v - alpha[i]
                step = np.abs(delta).max()
                if step > 1e-14:
                    W += delta[:, None] * x[None, :]
                    alpha[i] = v
                    max_delta = max(max_delta, step * q[i])
            n_epochs += 1
            objective_hist.append(self._primal(X, yi, W))
            dual_hist.append(
                0.5 * float(np.sum(W * W)) - float(alpha[np.arange(n), yi].sum())
            )
            if max_delta <= self.tol:
                break

        self.classes_ = classes
        self.coef_ = W
        self.dual_coef_ = alpha
        self.objective_history_ = np.asarray(objective_hist)
        self.dual_objective_history_ = np.asarray(dual_hist)
        self.n_iter_ = n_epochs
        return self

    def _primal(self, X, yi, W):
        scores = X @ W.T
        correct = scores[np.arange(len(yi)), yi]
        scores_wrong = scores.copy()
        scores_wrong[np.arange(len(yi)), yi] = -np.inf
        slack = np.maximum(0.0, 1.0 + scores_wrong.max(axis=1) - correct)
        return 0.5 * float(np.sum(W * W)) + self.C * float(slack.sum())

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_feature_matrix(X)
        if X.shape[1] != self.coef_.shape[1]:
            raise ValueError(
                f"X has {X.shape[1]} features, model expects {self.coef_.shape[1]}"
            )
        return X @ self.coef_.T

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def to_json_dict(self) -> dict:
        check_is_fitted(self, "coef_")
        return {
            "format": FORMAT_TAG,
            "kind": "multiclass_cs",
            "C": self.C,
            "class_weights": self.coef_.tolist(),
            "classes": self.classes_.tolist(),
        }


def _solve_cs_subproblem(b: np.ndarray, upper: np.ndarray, q: float) -> np.ndarray:
    """Minimize sum_k (b_k v_k + q/2 v_k^2) s.t. sum v = 0, v_k <= upper_k.

    Solution: v_k = min(upper_k, (beta - b_k)/q) with beta fixing the sum
    constraint; beta is found by scanning the sorted cap values
    c_k = b_k + q * upper_k.
    """
    k = b.size
    c = b + q * upper
    order = np.argsort(c, kind="stable")
    c_sorted = c[order]
    target = b.sum()
    capped_sum = 0.0
    for m in range(k):
        beta = (target - capped_sum) / (k - m)
        lo = c_sorted[m - 1] if m > 0 else -np.inf
        if lo <= beta <= c_sorted[m]:
            return np.minimum(upper, (beta - b) / q)
        capped_sum += c_sorted[m]
    # numerically all capped except the last: clamp via the final segment
    beta = target - (capped_sum - c_sorted[-1])
    return np.minimum(upper, (beta - b) / q)


class L2LossSVR(BaseEstimator, RegressorMixin):
    """L2-regularized L2-loss support vector regression.

    min 1/2 ||w||^2 + C sum max(0, |y - (w.x + b)| - epsilon)^2, solved by
    dual coordinate descent with exact soft-threshold updates.
    """

    def __init__(self, C=1.0, epsilon=0.1, epochs=200, tol=1e-8, random_state=0):
        self.C = C
        self.epsilon = epsilon
        self.epochs = epochs
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y):
        X = check_feature_matrix(X)
        y = check_labels(np.asarray(y, dtype=np.float64), X.shape[0])
        if X.shape[0] < 2:
            raise ValueError("SVR needs at least 2 samples")

        A = _augment(X)
        n, d = A.shape
        q = np.einsum("ij,ij->i", A, A)
        h = q + 1.0 / (2.0 * self.C)
        rng = check_random_state(self.random_state)
        beta = np.zeros(n)
        w = np.zeros(d)
        objective_hist, dual_hist = [], []
        n_epochs = 0
        for _ in range(self.epochs):
            max_step = 0.0
            order = rng.permutation(n)
            for i in order:
                g = A[i] @ w - y[i] + beta[i] / (2.0 * self.C)
                b0 = beta[i] - g / h[i]
                b_new = np.sign(b0) * max(abs(b0) - self.epsilon / h[i], 0.0)
                step = b_new - beta[i]
                if step != 0.0:
                    beta[i] = b_new
                    w += step * A[i]
                    max_step = max(max_step, abs(step))
            n_epochs += 1
            resid = np.abs(y - A @ w) - self.epsilon
            objective_hist.append(
                0.5 * (w @ w) + self.C * np.square(np.maximum(resid, 0.0)).sum()
            )
            dual_hist.append(
                0.5 * (w @ w)
                + np.square(beta).sum() / (4.0 * self.C)
                + self.epsilon * np.abs(beta).sum()
                - float(y @ beta)
            )
            if max_step <= self.tol:
                break

        self.coef_ = w[:-1].copy()
        self.intercept_ = float(w[-1])
        self.dual_coef_ = beta
        self.objective_history_ = np.asarray(objective_hist)
        self.dual_objective_history_ = np.asarray(dual_hist)
        self.n_iter_ = n_epochs
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_feature_matrix(X)
        if X.shape[1] != self.coef_.shape[0]:
            raise ValueError(
                f"X has {X.shape[1]} features, model expects {self.coef_.shape[0]}"
            )
        return X @ self.coef_ + self.intercept_

    def to_json_dict(self) -> dict:
        check_is_fitted(self, "coef_")
        return {
            "format": FORMAT_TAG,
            "kind": "svr_l2",
            "C": self.C,
            "epsilon": self.epsilon,
            "weights": self.coef_.tolist(),
            "bias": self.intercept_,
        }


class ScoreNormalizer(BaseEstimator):
    """Per-dimension linear rescaling to [0, 1] by train-set min/max."""

    def fit(self, V):
        V = check_feature_matrix(V)
        self.mins_ = V.min(axis=0)
        spans = V.max(axis=0) - self.mins_
        self.spans_ = np.where(spans > 1e-12, spans, 1.0)
        return self

    def transform(self, V):
        check_is_fitted(self, "mins_")
        V = check_feature_matrix(V)
        return (V - self.mins_) / self.spans_

    def fit_transform(self, V):
        return self.fit(V).transform(V)

    def to_json_dict(self) -> dict:
        check_is_fitted(self, "mins_")
        return {"mins": self.mins_.tolist(), "spans": self.spans_.tolist()}

    @classmethod
    def from_json_dict(cls, payload: dict) -> "ScoreNormalizer":
        norm = cls()
        norm.mins_ = np.asarray(payload["mins"], dtype=np.float64)
        norm.spans_ = np.asarray(payload["spans"], dtype=np.float64)
        return norm


def model_from_json_dict(payload: dict):
    """Rebuild a fitted linear model from its JSON payload."""
    if payload.get("format") != FORMAT_TAG:
        raise ValueError(f"unsupported model format: {payload.get('format')!r}")
    kind = payload["kind"]
    if kind == "binary_svm":
        model = LinearSVM(C=payload["C"])
        model.coef_ = np.asarray(payload["weights"], dtype=np.float64)
        model.intercept_ = float(payload["bias"])
        return model
    if kind == "multiclass_cs":
        model = CrammerSingerSVM(C=payload["C"])
        model.coef_ = np.asarray(payload["class_weights"], dtype=np.float64)
        model.classes_ = np.asarray(payload["classes"])
        return model
    if kind == "svr_l2":
        model = L2LossSVR(C=payload["C"], epsilon=payload["epsilon"])
        model.coef_ = np.asarray(payload["weights"], dtype=np.float64)
        model.intercept_ = float(payload["bias"])
        return model
    raise ValueError(f"unknown model kind: {kind!r}")


def save_model(path, model) -> None:
    Path(path).write_text(json.dumps(model.to_json_dict(), sort_keys=True, indent=1))


def load_model(path):
    return model_from_json_dict(json.loads(Path(path).read_text()))
