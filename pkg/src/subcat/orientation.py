"""Orientation estimation from ensemble score vectors.

Each post-NMS detection is described by the maximum score every ensemble
model assigns to boxes overlapping it by more than 0.5 IoU (0 where a model
has no such box). A multiclass SVM over uniform angle bins (default) or a
pair of support vector regressors on (cos, sin) maps that vector to an
observation angle.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .annotations import wrap_angle
from .detector import Detection, overlap
from .linear_models import (
    CrammerSingerSVM,
    L2LossSVR,
    ScoreNormalizer,
    model_from_json_dict,
)

SCORE_OVERLAP = 0.5
SENTINEL = 0.0  # calibrated minimum for models with no overlapping box
FORMAT_TAG = "subcat-orientation-1"


def score_vector(
    det: Detection, per_model_nms: Sequence[Sequence[Detection]]
) -> np.ndarray:
    """Raw K-vector: per model, the best score overlapping ``det`` > 0.5 IoU.

    Normalization happens inside the orientation model (train-set min/max
    bounds), so this returns pre-normalization values.
    """
    values = np.full(len(per_model_nms), SENTINEL)
    for k, dets in enumerate(per_model_nms):
        best = SENTINEL
        found = False
        for other in dets:
            if overlap(det.bbox, other.bbox) > SCORE_OVERLAP:
                if not found or other.score > best:
                    best = other.score
                    found = True
        if found:
            values[k] = best
    return values


def uniform_bin_centers(bins: int) -> np.ndarray:
    return -math.pi + (np.arange(bins) + 0.5) * (2.0 * math.pi / bins)


def angle_bin(alpha: float, bins: int) -> int:
    alpha = wrap_angle(alpha)
    return min(int(bins * (alpha + math.pi) / (2.0 * math.pi)), bins - 1)


@dataclass
class OrientationModel:
    """A trained score-vector -> observation-angle estimator."""

    kind: str  # "classification" | "regression"
    n_inputs: int
    normalizer: ScoreNormalizer
    bins: Optional[int] = None
    classifier: Optional[CrammerSingerSVM] = None
    svr_cos: Optional[L2LossSVR] = None
    svr_sin: Optional[L2LossSVR] = None

    def estimate(self, values: np.ndarray) -> float:
        """Observation angle in (-pi, pi] for one raw score vector."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.n_inputs,):
            raise ValueError(
                f"expected a vector of length {self.n_inputs}, got {values.shape}"
            )
        v = self.normalizer.transform(values[None, :])
        if self.kind == "classification":
            centers = uniform_bin_centers(self.bins)
            bin_idx = int(self.classifier.predict(v)[0])
            return wrap_angle(float(centers[bin_idx]))
        c = float(self.svr_cos.predict(v)[0])
        s = float(self.svr_sin.predict(v)[0])
        return wrap_angle(math.atan2(s, c))

    def to_json_dict(self) -> dict:
        payload = {
            "format": FORMAT_TAG,
            "kind": self.kind,
            "n_inputs": self.n_inputs,
            "bins": self.bins,
            "normalizer": self.normalizer.to_json_dict(),
        }
        if self.kind == "classification":
            payload["classifier"] = self.classifier.to_json_dict()
        else:
            payload["svr_cos"] = self.svr_cos.to_json_dict()
            payload["svr_sin"] = self.svr_sin.to_json_dict()
        return payload

    @classmethod
    def from_json_dict(cls, payload: dict) -> "OrientationModel":
        if payload.get("format") != FORMAT_TAG:
            raise ValueError(f"unsupported format {payload.get('format')!r}")
        kwargs = dict(
            kind=payload["kind"],
            n_inputs=payload["n_inputs"],
            bins=payload["bins"],
            normalizer=ScoreNormalizer.from_json_dict(payload["normalizer"]),
        )
        if payload["kind"] == "classification":
            kwargs["classifier"] = model_from_json_dict(payload["classifier"])
        else:
            kwargs["svr_cos"] = model_from_json_dict(payload["svr_cos"])
            kwargs["svr_sin"] = model_from_json_dict(payload["svr_sin"])
        return cls(**kwargs)


def train_orientation(
    samples: Sequence[tuple[np.ndarray, float]],
    kind: str = "classification",
    bins: int = 25,
    C: float = 1.0,
    epsilon: float = 0.01,
    epochs: int = 200,
    seed: int = 0,
) -> OrientationModel:
    """Fit the estimator from (raw score vector, ground-truth angle) pairs.

    Classification targets are uniform angle-bin indices; regression fits
    (cos, sin) with two SVRs and recovers the angle by atan2, which keeps
    the target continuous across the wrap point.
    """
    if not samples:
        raise ValueError("no orientation training samples")
    V = np.stack([np.asarray(v, dtype=np.float64) for v, _ in samples])
    alphas = np.array([a for _, a in samples], dtype=np.float64)
    normalizer = ScoreNormalizer().fit(V)
    Vn = normalizer.transform(V)

    if kind == "classification":
        y = np.array([angle_bin(a, bins) for a in alphas])
        if np.unique(y).size < 2:
            raise ValueError(
                "orientation classification needs samples in >= 2 angle bins"
            )
        clf = CrammerSingerSVM(C=C, epochs=epochs, random_state=seed).fit(Vn, y)
        return OrientationModel(
            kind="classification",
            n_inputs=V.shape[1],
            normalizer=normalizer,
            bins=bins,
            classifier=clf,
        )
    if kind == "regression":
        svr_cos = L2LossSVR(C=C, epsilon=epsilon, epochs=epochs,
                            random_state=seed).fit(Vn, np.cos(alphas))
        svr_sin = L2LossSVR(C=C, epsilon=epsilon, epochs=epochs,
                            random_state=seed).fit(Vn, np.sin(alphas))
        return OrientationModel(
            kind="regression",
            n_inputs=V.shape[1],
            normalizer=normalizer,
            bins=None,
            svr_cos=svr_cos,
            svr_sin=svr_sin,
        )
    raise ValueError(f"unknown estimator kind {kind!r}")


def estimate(model: OrientationModel, values: np.ndarray) -> float:
    return model.estimate(values)


def orientation_similarity(
    assigned: Sequence[tuple[float, int]], n_detections: int
) -> float:
    """s(r) = mean over detections of delta * (1 + cos dtheta) / 2.

    ``assigned`` lists (angle error, assignment flag) pairs; detections
    omitted from the list contribute 0 exactly like entries with flag 0.
    """
    if n_detections < 1:
        raise ValueError("orientation similarity needs at least one detection")
    if len(assigned) > n_detections:
        raise ValueError("more entries than detections")
    total = 0.0
    for dtheta, flag in assigned:
        if flag not in (0, 1):
            raise ValueError("assignment flags must be 0 or 1")
        if flag:
            total += 0.5 * (1.0 + math.cos(dtheta))
    return total / n_detections


def save_orientation_model(path, model: OrientationModel) -> None:
    Path(path).write_text(json.dumps(model.to_json_dict(), sort_keys=True, indent=1))


def load_orientation_model(path) -> OrientationModel:
    return OrientationModel.from_json_dict(json.loads(Path(path).read_text()))
