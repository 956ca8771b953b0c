"""Ensemble evaluation over a shared channel pyramid.

Each subcategory model slides every pyramid level it fits, scores windows
through its soft cascade, and the pooled detections pass once through
greedy non-maximum suppression in which a suppressed box can no longer
suppress weaker ones.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .annotations import BBox2D
from .boosting import BoostedModel
from .channels import CELL, ChannelPyramid, build_pyramid, ChannelStack


@dataclass(frozen=True)
class Detection:
    """A scored box tagged with the ensemble model that produced it."""

    bbox: BBox2D
    score: float
    model_id: int
    resolution_level: int = 0
    alpha: Optional[float] = None


@dataclass
class EnsembleSpec:
    """Configuration of a pooled multi-model detector."""

    models: list[BoostedModel]
    nms_overlap: float = 0.3
    nms_mode: str = "iou"
    calibrate: Optional[bool] = None  # None: on iff several resolution levels
    stride: int = 1
    lambdas: Optional[np.ndarray] = None
    scales_per_octave: int = 8
    n_approx_per_real: int = 7
    workers: int = 1

    def __post_init__(self):
        if not self.models:
            raise ValueError("ensemble needs at least one model")
        if not 0.0 < self.nms_overlap < 1.0:
            raise ValueError("nms_overlap must lie in (0, 1)")
        if self.nms_mode not in ("iou", "iomin"):
            raise ValueError(f"unknown nms_mode {self.nms_mode!r}")

    @property
    def calibrate_effective(self) -> bool:
        if self.calibrate is not None:
            return self.calibrate
        return len({m.resolution_level for m in self.models}) > 1

    def min_window_px(self) -> tuple[int, int]:
        """Smallest padded window over the ensemble (pyramid floor)."""
        return (
            min(m.model_w + 2 * m.pad_w for m in self.models),
            min(m.model_h + 2 * m.pad_h for m in self.models),
        )


def overlap(b1: BBox2D, b2: BBox2D, mode: str = "iou") -> float:
    """Symmetric box overlap: intersection over union or over min area."""
    inter = b1.intersection_area(b2)
    if inter <= 0.0:
        return 0.0
    if mode == "iou":
        denom = b1.area + b2.area - inter
    elif mode == "iomin":
        denom = min(b1.area, b2.area)
    else:
        raise ValueError(f"unknown overlap mode {mode!r}")
    return inter / denom


def calibrate_score(s: float, calib_min: float, calib_max: float) -> float:
    """Linear rescale of a raw score to [0, 1], clamped."""
    if calib_min >= calib_max:
        raise ValueError("calib_min must be < calib_max")
    return min(max((s - calib_min) / (calib_max - calib_min), 0.0), 1.0)


def slide(
    model: BoostedModel,
    pyramid: ChannelPyramid,
    stride: int = 1,
    model_id: Optional[int] = None,
) -> list[Detection]:
    """All above-cascade windows of every level, ordered (level, row, col).

    Window cells cover the model region directly; the model's padding
    enters at feature-extraction (crop) time and in the pyramid floor, so
    a window's box maps straight back through the level scale.
    """
    dets, _ = _slide_impl(model, pyramid, stride, model_id, want_features=False)
    return dets


def slide_with_features(
    model: BoostedModel,
    pyramid: ChannelPyramid,
    stride: int = 1,
    model_id: Optional[int] = None,
) -> tuple[list[Detection], list[np.ndarray]]:
    """Like :func:`slide` but also returns each window's feature vector."""
    return _slide_impl(model, pyramid, stride, model_id, want_features=True)


def _slide_impl(model, pyramid, stride, model_id, want_features):
    if model.model_w <= 0:
        raise ValueError("only window-backed models can slide")
    if stride < 1:
        raise ValueError("stride must be >= 1 cell")
    mid = model.subcategory_id if model_id is None else model_id
    packed = model.packed()
    wh, ww = model.cells_h, model.cells_w
    detections: list[Detection] = []
    features: list[np.ndarray] = []
    for stack in pyramid.levels:
        if stack.height_a < wh or stack.width_a < ww:
            continue
        planes = np.ascontiguousarray(stack.planes)
        grid = _kernels.slide_level(
            planes, wh, ww, stride,
            packed["root_p"], packed["root_dy"], packed["root_dx"],
            packed["root_thr"],
            packed["child_p"], packed["child_dy"], packed["child_dx"],
            packed["child_thr"],
            packed["leaves"], packed["cascade"],
        )
        rows, cols = np.nonzero(np.isfinite(grid))
        inv_scale = 1.0 / stack.scale
        for r, c in zip(rows, cols):
            x1 = c * stride * CELL * inv_scale
            y1 = r * stride * CELL * inv_scale
            bbox = BBox2D(
                x1, y1,
                x1 + model.model_w * inv_scale,
                y1 + model.model_h * inv_scale,
            )
            detections.append(
                Detection(
                    bbox=bbox,
                    score=float(grid[r, c]),
                    model_id=mid,
                    resolution_level=model.resolution_level,
                )
            )
            if want_features:
                rr, cc = r * stride, c * stride
                features.append(
                    stack.planes[:, rr : rr + wh, cc : cc + ww].ravel().copy()
                )
    return detections, features


def nms_greedy(
    detections: Sequence[Detection],
    thr: float,
    mode: str = "iou",
    return_indices: bool = False,
):
    """Greedy NMS where a suppressed box can no longer suppress.

    Order: score descending, ties broken by larger area first, then input
    order. A kept box suppresses every later not-yet-suppressed box whose
    overlap with it exceeds ``thr``.
    """
    if not 0.0 < thr < 1.0:
        raise ValueError("NMS threshold must lie in (0, 1)")
    n = len(detections)
    if n == 0:
        return [] if not return_indices else []
    order = sorted(
        range(n),
        key=lambda i: (-detections[i].score, -detections[i].bbox.area, i),
    )
    boxes = np.array(
        [
            (d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2, d.bbox.area)
            for d in detections
        ]
    )[order]
    suppressed = np.zeros(n, dtype=bool)
    kept: list[int] = []
    for pos in range(n):
        if suppressed[pos]:
            continue
        kept.append(order[pos])
        later = np.arange(pos + 1, n)
        later = later[~suppressed[later]]
        if later.size == 0:
            continue
        bx = boxes[pos]
        cand = boxes[later]
        iw = np.minimum(bx[2], cand[:, 2]) - np.maximum(bx[0], cand[:, 0])
        ih = np.minimum(bx[3], cand[:, 3]) - np.maximum(bx[1], cand[:, 1])
        inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
        if mode == "iou":
            denom = bx[4] + cand[:, 4] - inter
        else:
            denom = np.minimum(bx[4], cand[:, 4])
        suppressed[later[inter / denom > thr]] = True
    if return_indices:
        return kept
    return [detections[i] for i in kept]


def build_shared_pyramid(image: np.ndarray, spec: EnsembleSpec) -> ChannelPyramid:
    return build_pyramid(
        image,
        scales_per_octave=spec.scales_per_octave,
        n_approx_per_real=spec.n_approx_per_real,
        lambdas=spec.lambdas,
        min_size_px=spec.min_window_px(),
    )


def detect_ensemble(image: np.ndarray, spec: EnsembleSpec) -> list[Detection]:
    """Slide every model over one shared pyramid, pool, and suppress."""
    final, _ = detect_with_details(image, spec)
    return final


def detect_with_details(
    image: np.ndarray, spec: EnsembleSpec
) -> tuple[list[Detection], list[list[Detection]]]:
    """Pooled post-NMS detections plus each model's individually-NMS'd list.

    The per-model lists feed orientation score vectors; the pooled list is
    the detector output. Models run in index order (or on worker threads
    with results merged in index order), so output is thread-count
    independent.
    """
    pyramid = build_shared_pyramid(image, spec)
    return detect_on_pyramid(pyramid, spec)


def detect_on_pyramid(
    pyramid: ChannelPyramid, spec: EnsembleSpec
) -> tuple[list[Detection], list[list[Detection]]]:
    calibrate = spec.calibrate_effective

    def run(args):
        idx, model = args
        dets = slide(model, pyramid, stride=spec.stride, model_id=idx)
        if calibrate:
            dets = [
                replace(
                    d, score=calibrate_score(d.score, model.calib_min, model.calib_max)
                )
                for d in dets
            ]
        return dets

    jobs = list(enumerate(spec.models))
    if spec.workers > 1:
        with ThreadPoolExecutor(max_workers=spec.workers) as pool:
            per_model_raw = list(pool.map(run, jobs))
    else:
        per_model_raw = [run(j) for j in jobs]

    pooled: list[Detection] = []
    for dets in per_model_raw:
        pooled.extend(dets)
    final = nms_greedy(pooled, spec.nms_overlap, spec.nms_mode)
    per_model_nms = [
        nms_greedy(dets, spec.nms_overlap, spec.nms_mode) for dets in per_model_raw
    ]
    return final, per_model_nms


_HYBRID_WIDTH_FACTORS = (1.0, 1.25, 1.5, 2.0, 3.0)


def hybrid_resolution_set(base_w: int = 32, count: int = 3) -> list[int]:
    """Model widths for the hybrid multiresolution sets: 1, 3 or 5 levels."""
    if count not in (1, 3, 5):
        raise ValueError("count must be 1, 3 or 5")
    widths = [int(round(base_w * f)) for f in _HYBRID_WIDTH_FACTORS[:count]]
    if any(w % CELL for w in widths):
        raise ValueError(f"base width {base_w} yields non-cell-aligned widths")
    return widths


# ---------------------------------------------------------------------------
# Result files


def detection_to_kitti_line(det: Detection, class_name: str) -> str:
    alpha = float(det.alpha) if det.alpha is not None else -10.0
    b = det.bbox
    return (
        f"{class_name} -1 -1 {alpha!r} "
        f"{float(b.x1)!r} {float(b.y1)!r} {float(b.x2)!r} {float(b.y2)!r} "
        f"-1 -1 -1 -1000 -1000 -1000 -10 {float(det.score)!r}"
    )


def write_detections_kitti(path, detections: Sequence[Detection], class_name: str):
    text = "".join(
        detection_to_kitti_line(d, class_name) + "\n" for d in detections
    )
    Path(path).write_text(text)


def write_detections_jsonl(path, stem: str, detections: Sequence[Detection]):
    with open(path, "a") as fh:
        for d in detections:
            fh.write(
                json.dumps(
                    {
                        "image": stem,
                        "bbox": [d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2],
                        "score": d.score,
                        "model_id": d.model_id,
                        "resolution_level": d.resolution_level,
                        "alpha": d.alpha,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
