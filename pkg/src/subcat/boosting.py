"""Per-subcategory boosted classifiers over aggregated channel features.

Real AdaBoost with depth-2 trees: each tree's leaves carry half log-odds of
the weighted class masses, the sample distribution is reweighted by
exp(-y h) each round, and a constant-offset soft cascade records, per tree,
the lowest running score of any training positive.

Training is staged: the first stage sees random negatives, later stages add
hard negatives mined from the training images with subcategory-agnostic
exclusion of every annotated class instance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .annotations import Annotation3D, BBox2D
from .channels import (
    CELL,
    ChannelPyramid,
    N_CHANNELS,
    aggregate_and_smooth,
    compute_channels,
    sample_rect_bilinear,
)
from .validation import check_random_state

LEAF_EPS = 1e-9  # Laplace floor inside leaf log-odds
# Constant cascade offset below the weakest training positive's score trace,
# expressed as a fraction of that positive's final score magnitude: slid
# windows see slightly different channel statistics than training crops
# (approximated pyramid levels, cell-grid alignment), so the floor needs
# real slack to keep borderline true positives alive.
CASCADE_SLACK = 0.8
N_SPLIT_BINS = 256
MODEL_FORMAT_TAG = "subcat-boosted-1"
BUNDLE_FORMAT_TAG = "subcat-bundle-1"


@dataclass(frozen=True)
class DepthTwoTree:
    """A depth-2 decision tree: root split, two child splits, four leaves.

    A pass-through child uses threshold +inf so every sample takes its left
    leaf. Comparisons are strict: value < threshold goes left.
    """

    root_feature: int
    root_threshold: float
    child_features: tuple[int, int]
    child_thresholds: tuple[float, float]
    leaf_values: tuple[float, float, float, float]

    def evaluate(self, F: np.ndarray) -> np.ndarray:
        F = np.atleast_2d(F)
        side = (F[:, self.root_feature] >= self.root_threshold).astype(np.int64)
        cf = np.asarray(self.child_features)[side]
        ct = np.asarray(self.child_thresholds)[side]
        leaf = (F[np.arange(len(F)), cf] >= ct).astype(np.int64)
        return np.asarray(self.leaf_values)[side * 2 + leaf]


@dataclass(frozen=True)
class TrainConfig:
    tree_schedule: tuple[int, ...] = (32, 128, 512, 2048)
    n_random_neg: int = 5000
    mining_rounds: int = 3
    mining_quota: int = 5000
    exclusion_overlap: float = 0.3
    stage0_max_overlap: float = 0.1
    nms_overlap: float = 0.3
    jitter: bool = False
    cascade_slack: float = CASCADE_SLACK
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.exclusion_overlap < 1.0:
            raise ValueError("exclusion_overlap must lie in (0, 1)")
        if len(self.tree_schedule) < self.mining_rounds + 1:
            raise ValueError(
                "tree_schedule needs one entry per stage "
                f"({self.mining_rounds + 1}), got {len(self.tree_schedule)}"
            )


@dataclass
class BoostedModel:
    """A trained subcategory detector.

    Window-backed models have positive ``model_w``/``model_h`` and exactly
    (model_w/4) * (model_h/4) * 10 features. ``model_w == 0`` marks a
    plain feature-vector classifier (used on non-window data), which can
    score rows but cannot slide.
    """

    trees: list[DepthTwoTree]
    model_w: int
    model_h: int
    pad_w: int
    pad_h: int
    cascade_thresholds: np.ndarray
    calib_min: float = 0.0
    calib_max: float = 1.0
    subcategory_id: int = 0
    resolution_level: int = 0
    resolution_width: int = 32
    train_loss: list[float] = field(default_factory=list)
    n_features: int = 0

    def __post_init__(self):
        if not self.trees:
            raise ValueError("model needs at least one tree")
        if self.model_w % CELL or self.model_h % CELL:
            raise ValueError("model dimensions must be multiples of the cell size")
        if self.calib_min >= self.calib_max:
            raise ValueError("calib_min must be < calib_max")
        self.cascade_thresholds = np.asarray(self.cascade_thresholds, dtype=np.float64)
        if self.cascade_thresholds.shape != (len(self.trees),):
            raise ValueError("one cascade threshold per tree required")
        if self.model_w > 0:
            expected = self.cells_w * self.cells_h * N_CHANNELS
            if self.n_features == 0:
                self.n_features = expected
            elif self.n_features != expected:
                raise ValueError(
                    f"n_features={self.n_features} contradicts model dims "
                    f"({expected} expected)"
                )
        elif self.n_features <= 0:
            raise ValueError("n_features is required when model_w == 0")

    @property
    def cells_w(self) -> int:
        return self.model_w // CELL

    @property
    def cells_h(self) -> int:
        return self.model_h // CELL

    @property
    def score_floor(self) -> float:
        return float(self.cascade_thresholds[-1])

    def tree_arrays(self) -> dict[str, np.ndarray]:
        """Contiguous per-tree arrays for batch evaluation."""
        t = len(self.trees)
        return {
            "root_feat": np.array(
                [tr.root_feature for tr in self.trees], dtype=np.int64
            ),
            "root_thr": np.array([tr.root_threshold for tr in self.trees]),
            "child_feat": np.array(
                [tr.child_features for tr in self.trees], dtype=np.int64
            ),
            "child_thr": np.array([tr.child_thresholds for tr in self.trees]),
            "leaves": np.array([tr.leaf_values for tr in self.trees]).reshape(t, 4),
            "cascade": self.cascade_thresholds,
        }

    def packed(self) -> dict[str, np.ndarray]:
        """Tree arrays plus (plane, dy, dx) feature lookups for sliding."""
        if self.model_w <= 0:
            raise ValueError("only window-backed models can slide")
        arrays = self.tree_arrays()

        def decompose(feat):
            per_plane = self.cells_h * self.cells_w
            plane = feat // per_plane
            rem = feat % per_plane
            return plane, rem // self.cells_w, rem % self.cells_w

        rp, rdy, rdx = decompose(arrays["root_feat"])
        cp, cdy, cdx = decompose(arrays["child_feat"])
        arrays.update(
            root_p=rp, root_dy=rdy, root_dx=rdx,
            child_p=cp, child_dy=cdy, child_dx=cdx,
        )
        return arrays

    def decision_function(self, F: np.ndarray) -> np.ndarray:
        """Final boosted score of each feature-vector row (no cascade)."""
        F = np.ascontiguousarray(np.atleast_2d(F), dtype=np.float64)
        if F.shape[1] != self.n_features:
            raise ValueError(
                f"expected {self.n_features} features, got {F.shape[1]}"
            )
        p = self.tree_arrays()
        return _kernels.eval_trees_matrix(
            F, p["root_feat"], p["root_thr"], p["child_feat"], p["child_thr"],
            p["leaves"],
        )

    def to_json_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT_TAG,
            "model_w": self.model_w, "model_h": self.model_h,
            "pad_w": self.pad_w, "pad_h": self.pad_h,
            "n_features": self.n_features,
            "calib_min": self.calib_min, "calib_max": self.calib_max,
            "subcategory_id": self.subcategory_id,
            "resolution_level": self.resolution_level,
            "resolution_width": self.resolution_width,
            "cascade_thresholds": self.cascade_thresholds.tolist(),
            "train_loss": list(self.train_loss),
            "trees": [
                {
                    "root": [t.root_feature, t.root_threshold],
                    "children": [
                        [t.child_features[0], t.child_thresholds[0]],
                        [t.child_features[1], t.child_thresholds[1]],
                    ],
                    "leaves": list(t.leaf_values),
                }
                for t in self.trees
            ],
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "BoostedModel":
        if payload.get("format") != MODEL_FORMAT_TAG:
            raise ValueError(f"unsupported model format {payload.get('format')!r}")
        trees = [
            DepthTwoTree(
                root_feature=int(t["root"][0]),
                root_threshold=float(t["root"][1]),
                child_features=(int(t["children"][0][0]), int(t["children"][1][0])),
                child_thresholds=(
                    float(t["children"][0][1]), float(t["children"][1][1]),
                ),
                leaf_values=tuple(float(v) for v in t["leaves"]),
            )
            for t in payload["trees"]
        ]
        return cls(
            trees=trees,
            model_w=payload["model_w"], model_h=payload["model_h"],
            pad_w=payload["pad_w"], pad_h=payload["pad_h"],
            cascade_thresholds=np.asarray(payload["cascade_thresholds"]),
            calib_min=payload["calib_min"], calib_max=payload["calib_max"],
            subcategory_id=payload["subcategory_id"],
            resolution_level=payload["resolution_level"],
            resolution_width=payload["resolution_width"],
            train_loss=list(payload.get("train_loss", [])),
            n_features=payload.get("n_features", 0),
        )


def save_model(path, model: BoostedModel) -> None:
    Path(path).write_text(json.dumps(model.to_json_dict(), sort_keys=True))


def load_model(path) -> BoostedModel:
    return BoostedModel.from_json_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Tree and AdaBoost training


def _quantize(F: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lo = F.min(axis=0)
    hi = F.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    binned = np.clip(
        ((F - lo) / span * N_SPLIT_BINS).astype(np.int64), 0, N_SPLIT_BINS - 1
    ).astype(np.uint8)
    return binned, lo, span


def _bin_threshold(lo: float, span: float, b: int) -> float:
    return lo + span * (b + 1) / N_SPLIT_BINS


def _leaf_value(weights, is_pos, idx) -> float:
    wp = weights[idx][is_pos[idx]].sum() if idx.size else 0.0
    wn = weights[idx][~is_pos[idx]].sum() if idx.size else 0.0
    return 0.5 * math.log((wp + LEAF_EPS) / (wn + LEAF_EPS))


def train_tree(
    F: np.ndarray,
    y: np.ndarray,
    sample_weights: np.ndarray,
    _binned=None,
    _lo=None,
    _span=None,
) -> DepthTwoTree:
    """Greedy depth-2 tree minimizing weighted classification error.

    Split thresholds come from a 256-bin quantization of each feature's
    range; leaves carry half log-odds with a Laplace floor. The optional
    pre-quantization arguments let the boosting loop amortize binning.
    """
    F = np.atleast_2d(np.asarray(F, dtype=np.float64))
    y = np.asarray(y)
    w = np.asarray(sample_weights, dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("sample weights must be non-negative with positive sum")
    is_pos = y > 0
    if is_pos.all() or not is_pos.any():
        raise ValueError("both classes must be present to train a tree")

    if _binned is None:
        _binned, _lo, _span = _quantize(F)

    all_idx = np.arange(len(F), dtype=np.int64)
    rf, rb, _ = _kernels.node_best_split(_binned, w, is_pos, all_idx, N_SPLIT_BINS)
    if rf < 0:  # no informative split anywhere: constant tree
        v = _leaf_value(w, is_pos, all_idx)
        return DepthTwoTree(0, np.inf, (0, 0), (np.inf, np.inf), (v, v, v, v))
    root_thr = _bin_threshold(_lo[rf], _span[rf], rb)
    left_idx = all_idx[F[:, rf] < root_thr]
    right_idx = all_idx[F[:, rf] >= root_thr]

    child_features = []
    child_thresholds = []
    leaf_values = []
    for idx in (left_idx, right_idx):
        node_value = _leaf_value(w, is_pos, idx)
        pure = idx.size == 0 or is_pos[idx].all() or not is_pos[idx].any()
        cf, cb = (-1, -1)
        if not pure:
            cf, cb, _ = _kernels.node_best_split(_binned, w, is_pos, idx, N_SPLIT_BINS)
        if cf < 0:  # pass-through child
            child_features.append(0)
            child_thresholds.append(np.inf)
            leaf_values.extend([node_value, node_value])
        else:
            thr = _bin_threshold(_lo[cf], _span[cf], cb)
            child_features.append(int(cf))
            child_thresholds.append(thr)
            leaf_values.append(_leaf_value(w, is_pos, idx[F[idx, cf] < thr]))
            leaf_values.append(_leaf_value(w, is_pos, idx[F[idx, cf] >= thr]))

    return DepthTwoTree(
        root_feature=int(rf),
        root_threshold=float(root_thr),
        child_features=tuple(child_features),
        child_thresholds=tuple(child_thresholds),
        leaf_values=tuple(leaf_values),
    )


def adaboost_train(
    pos: np.ndarray,
    neg: np.ndarray,
    n_trees: int,
    seed: int = 0,
    model_geom: Optional[dict] = None,
    cascade_slack: float = CASCADE_SLACK,
) -> BoostedModel:
    """Real-AdaBoost loop over depth-2 trees.

    Stops early when no weak learner with weighted error < 1/2 exists.
    Cascade thresholds are set so that no training positive is ever
    rejected: the minimum running positive score minus a constant offset
    (a ``cascade_slack`` fraction of the weakest positive's final score).
    """
    pos = np.atleast_2d(np.asarray(pos, dtype=np.float64))
    neg = np.atleast_2d(np.asarray(neg, dtype=np.float64))
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("both positive and negative windows are required")
    del seed  # deterministic already; kept for interface stability

    F = np.vstack([pos, neg])
    y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
    n = len(F)
    w = np.full(n, 1.0 / n)
    binned, lo, span = _quantize(F)

    trees: list[DepthTwoTree] = []
    cascade: list[float] = []
    losses: list[float] = []
    scores = np.zeros(n)
    pos_slice = slice(0, len(pos))
    for _ in range(n_trees):
        tree = train_tree(F, y, w, _binned=binned, _lo=lo, _span=span)
        h = tree.evaluate(F)
        err = w[(np.where(h >= 0, 1.0, -1.0) != y)].sum()
        if err >= 0.5 - 1e-12:
            break
        trees.append(tree)
        scores += h
        w = w * np.exp(-y * h)
        w /= w.sum()
        losses.append(float(np.mean(np.exp(-y * scores))))
        cascade.append(float(scores[pos_slice].min()))

    if not trees:
        # degenerate data: a constant tree keeps the model well-formed
        v = _leaf_value(np.full(n, 1.0 / n), y > 0, np.arange(n))
        trees = [DepthTwoTree(0, np.inf, (0, 0), (np.inf, np.inf), (v, v, v, v))]
        cascade = [v]
        losses = [float(np.mean(np.exp(-y * np.full(n, v))))]

    offset = cascade_slack * abs(cascade[-1]) + 1.0
    cascade = [c - offset for c in cascade]

    geom = model_geom or {
        "model_w": 0, "model_h": 0, "pad_w": 0, "pad_h": 0,
        "n_features": F.shape[1],
    }
    floor = min(cascade)
    return BoostedModel(
        trees=trees,
        cascade_thresholds=np.asarray(cascade),
        calib_min=floor,
        calib_max=max(float(scores[pos_slice].max()), floor + 1e-3),
        train_loss=losses,
        **geom,
    )


# ---------------------------------------------------------------------------
# Window extraction


def _load(image) -> np.ndarray:
    if isinstance(image, np.ndarray):
        return image
    from .io import load_image

    return load_image(image)


# extra context sampled around the padded crop so the gradient-normalization
# window of the model region sees real pixels rather than replicated edges
HALO_PX = 8


def padded_window_features(
    image, bbox: BBox2D, model_w: int, model_h: int, pad_w: int, pad_h: int
) -> np.ndarray:
    """Feature vector of a box: context-expanded crop, channels, central cells.

    The crop is expanded by (pad + halo)/model on each side, resampled to
    (model + 2*pad + 2*halo) pixels, channels are computed on the expanded
    crop, and only the central model region's cells enter the vector. The
    surround supplies real image context to the model cells, matching what
    a sliding window sees in the pyramid.
    """
    image = _load(image)
    ex = pad_w + HALO_PX
    ey = pad_h + HALO_PX
    fx = ex / model_w
    fy = ey / model_h
    crop = sample_rect_bilinear(
        image,
        bbox.x1 - fx * bbox.width,
        bbox.y1 - fy * bbox.height,
        bbox.x2 + fx * bbox.width,
        bbox.y2 + fy * bbox.height,
        model_h + 2 * ey,
        model_w + 2 * ex,
    )
    planes = aggregate_and_smooth(compute_channels(np.clip(crop, 0.0, 1.0)))
    cy, cx = ey // CELL, ex // CELL
    inner = planes[:, cy : cy + model_h // CELL, cx : cx + model_w // CELL]
    return inner.ravel()


def extract_positives(
    samples: Sequence[tuple[int, BBox2D]],
    images: Sequence,
    model_w: int,
    model_h: int,
    pad_w: int,
    pad_h: int,
    jitter: bool = False,
) -> np.ndarray:
    """Stack positive feature vectors; optional one-cell shift augmentation."""
    rows = []
    for img_idx, bbox in samples:
        image = _load(images[img_idx])
        rows.append(
            padded_window_features(image, bbox, model_w, model_h, pad_w, pad_h)
        )
        if jitter:
            dx = bbox.width * CELL / model_w
            dy = bbox.height * CELL / model_h
            for sx, sy in ((-dx, 0.0), (dx, 0.0), (0.0, -dy), (0.0, dy)):
                shifted = BBox2D(
                    bbox.x1 + sx, bbox.y1 + sy, bbox.x2 + sx, bbox.y2 + sy
                )
                rows.append(
                    padded_window_features(
                        image, shifted, model_w, model_h, pad_w, pad_h
                    )
                )
    return np.stack(rows)


# ---------------------------------------------------------------------------
# Pyramid-grid window extraction: training windows come from the same
# channel pyramid (lambda-corrected levels included) that sliding uses, so
# train and test features follow the same distribution.


def window_cells(
    stack, r: int, c: int, cells_h: int, cells_w: int
) -> np.ndarray:
    return stack.planes[:, r : r + cells_h, c : c + cells_w].ravel()


def positive_windows_from_pyramid(
    pyramid: ChannelPyramid,
    bbox: BBox2D,
    model_w: int,
    model_h: int,
    jitter: bool = False,
) -> list[np.ndarray]:
    """Grid window(s) of the level whose scale best matches the box width.

    The window centers on the box; positions clamp into the level grid.
    With ``jitter`` the four one-cell-shifted neighbors are added. Returns
    an empty list when no level fits the window.
    """
    mh, mw = model_h // CELL, model_w // CELL
    target = model_w / bbox.width
    best = None
    for li, stack in enumerate(pyramid.levels):
        if stack.height_a < mh or stack.width_a < mw:
            continue
        cost = abs(math.log(stack.scale / target))
        if best is None or cost < best[0]:
            best = (cost, li)
    if best is None:
        return []
    stack = pyramid.levels[best[1]]
    cx, cy = bbox.centroid
    c0 = int(round((cx * stack.scale - model_w / 2.0) / CELL))
    r0 = int(round((cy * stack.scale - model_h / 2.0) / CELL))
    c0 = min(max(c0, 0), stack.width_a - mw)
    r0 = min(max(r0, 0), stack.height_a - mh)
    positions = [(r0, c0)]
    if jitter:
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            r = min(max(r0 + dr, 0), stack.height_a - mh)
            c = min(max(c0 + dc, 0), stack.width_a - mw)
            if (r, c) not in positions:
                positions.append((r, c))
    return [window_cells(stack, r, c, mh, mw) for r, c in positions]


def _grid_window_box(stack, r: int, c: int, model_w: int, model_h: int) -> BBox2D:
    inv = 1.0 / stack.scale
    x1 = c * CELL * inv
    y1 = r * CELL * inv
    return BBox2D(x1, y1, x1 + model_w * inv, y1 + model_h * inv)


def _sample_negatives_from_pyramids(
    pyramids: Sequence[ChannelPyramid],
    annotations: Sequence[Sequence[Annotation3D]],
    n: int,
    model_w: int,
    model_h: int,
    class_name: str,
    rng,
    max_overlap: float = 0.1,
    max_attempts_factor: int = 50,
) -> np.ndarray:
    """Uniform grid windows whose box misses every class instance."""
    from .detector import overlap  # local import to avoid a module cycle

    rng = check_random_state(rng)
    mh, mw = model_h // CELL, model_w // CELL
    rows = []
    attempts = 0
    max_attempts = max_attempts_factor * n
    while len(rows) < n and attempts < max_attempts:
        attempts += 1
        idx = int(rng.integers(len(pyramids)))
        pyramid = pyramids[idx]
        if len(pyramid) == 0:
            continue
        li = int(rng.integers(len(pyramid)))
        stack = pyramid.levels[li]
        if stack.height_a < mh or stack.width_a < mw:
            continue
        r = int(rng.integers(stack.height_a - mh + 1))
        c = int(rng.integers(stack.width_a - mw + 1))
        box = _grid_window_box(stack, r, c, model_w, model_h)
        if any(
            overlap(box, a.bbox) >= max_overlap
            for a in annotations[idx]
            if a.class_name == class_name
        ):
            continue
        rows.append(window_cells(stack, r, c, mh, mw))
    if not rows:
        raise ValueError("could not sample any negative windows")
    return np.stack(rows)


def sample_random_negatives(
    images: Sequence,
    annotations: Sequence[Sequence[Annotation3D]],
    n: int,
    model_w: int,
    model_h: int,
    pad_w: int,
    pad_h: int,
    class_name: str,
    rng,
    max_overlap: float = 0.1,
    lambdas=None,
) -> np.ndarray:
    """Random pyramid-grid windows below ``max_overlap`` with any instance."""
    from .channels import build_pyramid

    pyramids = [
        build_pyramid(
            _load(img), lambdas=lambdas,
            min_size_px=(model_w + 2 * pad_w, model_h + 2 * pad_h),
        )
        for img in images
    ]
    return _sample_negatives_from_pyramids(
        pyramids, annotations, n, model_w, model_h, class_name, rng, max_overlap
    )


# ---------------------------------------------------------------------------
# Hard-negative mining


def mine_hard_negatives(
    model: BoostedModel,
    images: Sequence,
    annotations: Sequence[Sequence[Annotation3D]],
    cfg: TrainConfig,
    quota: int,
    class_name: str = "Car",
    lambdas=None,
) -> np.ndarray:
    """Top-scoring detections that miss every annotated class instance.

    Detections are NMS-pruned per image, then kept only if their IoU with
    every class instance (any subcategory) is below the exclusion overlap.
    Returns at most ``quota`` feature rows sorted by score descending.
    """
    from .channels import build_pyramid

    scored: list[tuple[float, int, int, np.ndarray]] = []
    for img_idx in range(len(images)):
        image = _load(images[img_idx])
        pyramid = build_pyramid(
            image,
            lambdas=lambdas,
            min_size_px=(model.model_w + 2 * model.pad_w,
                         model.model_h + 2 * model.pad_h),
        )
        for order, (score, feats) in enumerate(
            _mine_from_pyramid(model, pyramid, annotations[img_idx], cfg, class_name)
        ):
            scored.append((score, img_idx, order, feats))
    scored.sort(key=lambda t: (-t[0], t[1], t[2]))
    if not scored:
        return np.empty((0, model.n_features))
    return np.stack([t[3] for t in scored[:quota]])


def _mine_from_pyramid(
    model: BoostedModel,
    pyramid: ChannelPyramid,
    image_annotations: Sequence[Annotation3D],
    cfg: TrainConfig,
    class_name: str,
) -> list[tuple[float, np.ndarray]]:
    from .detector import nms_greedy, overlap, slide_with_features

    detections, feats = slide_with_features(model, pyramid)
    keep_idx = nms_greedy(
        detections, cfg.nms_overlap, mode="iou", return_indices=True
    )
    out = []
    class_boxes = [a.bbox for a in image_annotations if a.class_name == class_name]
    for i in keep_idx:
        det = detections[i]
        if any(overlap(det.bbox, b) >= cfg.exclusion_overlap for b in class_boxes):
            continue
        out.append((det.score, feats[i]))
    return out


# ---------------------------------------------------------------------------
# Staged subcategory training


def _extract_cluster_positives(
    samples: Sequence[tuple[int, BBox2D]],
    pyramids: Sequence[ChannelPyramid],
    model_w: int,
    model_h: int,
    jitter: bool,
) -> np.ndarray:
    rows = []
    for img_idx, bbox in samples:
        rows.extend(
            positive_windows_from_pyramid(
                pyramids[img_idx], bbox, model_w, model_h, jitter=jitter
            )
        )
    if not rows:
        raise ValueError("no positive window fits any pyramid level")
    return np.stack(rows)


def train_subcategory(
    samples: Sequence[tuple[int, BBox2D]],
    images: Sequence,
    annotations: Sequence[Sequence[Annotation3D]],
    cfg: TrainConfig,
    class_name: str = "Car",
    model_dims: Optional[tuple[int, int, int, int]] = None,
    subcategory_id: int = 0,
    resolution_level: int = 0,
    resolution_width: int = 32,
    lambdas=None,
    calibration_images: Optional[Sequence] = None,
) -> BoostedModel:
    """Stage-0 training on random negatives plus mining rounds.

    Positive and negative windows are read off each training image's
    channel pyramid. Calibration bounds come from the final model's
    detection scores over ``calibration_images`` (default: the training
    images).
    """
    from .channels import build_pyramid
    from .clustering import model_dims_for_cluster

    if not samples:
        raise ValueError("cluster has no samples")
    if model_dims is None:
        model_dims = model_dims_for_cluster(
            [b for _, b in samples], base_width=resolution_width
        )
    model_w, model_h, pad_w, pad_h = model_dims

    pyramids = [
        build_pyramid(
            _load(img), lambdas=lambdas,
            min_size_px=(model_w + 2 * pad_w, model_h + 2 * pad_h),
        )
        for img in images
    ]
    rng = check_random_state(cfg.seed + 7919 * subcategory_id + resolution_level)
    pos = _extract_cluster_positives(samples, pyramids, model_w, model_h, cfg.jitter)
    neg = _sample_negatives_from_pyramids(
        pyramids, annotations, cfg.n_random_neg, model_w, model_h,
        class_name, rng, max_overlap=cfg.stage0_max_overlap,
    )

    geom = {"model_w": model_w, "model_h": model_h, "pad_w": pad_w, "pad_h": pad_h}
    model = adaboost_train(pos, neg, cfg.tree_schedule[0], model_geom=geom,
                           cascade_slack=cfg.cascade_slack)
    model = replace(
        model, subcategory_id=subcategory_id,
        resolution_level=resolution_level, resolution_width=resolution_width,
    )
    all_loss = list(model.train_loss)

    negatives = [neg]
    for stage in range(1, cfg.mining_rounds + 1):
        scored = []
        for img_idx, pyramid in enumerate(pyramids):
            for order, (score, feats) in enumerate(
                _mine_from_pyramid(model, pyramid, annotations[img_idx], cfg,
                                   class_name)
            ):
                scored.append((score, img_idx, order, feats))
        scored.sort(key=lambda t: (-t[0], t[1], t[2]))
        if scored:
            negatives.append(np.stack([t[3] for t in scored[: cfg.mining_quota]]))
        model = adaboost_train(
            pos, np.vstack(negatives), cfg.tree_schedule[stage], model_geom=geom,
            cascade_slack=cfg.cascade_slack,
        )
        model = replace(
            model, subcategory_id=subcategory_id,
            resolution_level=resolution_level, resolution_width=resolution_width,
        )
        all_loss.extend(model.train_loss)

    if calibration_images is None:
        lo, hi = math.inf, -math.inf
        for pyramid in pyramids:
            from .detector import slide

            for det in slide(model, pyramid):
                lo = min(lo, det.score)
                hi = max(hi, det.score)
        if not math.isfinite(lo) or hi <= lo:
            lo, hi = model.score_floor, model.score_floor + 1.0
        calib = (lo, hi)
    else:
        calib = calibrate_on_images(model, calibration_images, lambdas=lambdas)
    return replace(
        model, calib_min=calib[0], calib_max=calib[1], train_loss=all_loss
    )


def calibrate_on_images(
    model: BoostedModel, images: Sequence, lambdas=None
) -> tuple[float, float]:
    """(min, max) detection score over a set of images, for calibration."""
    from .channels import build_pyramid
    from .detector import slide

    lo, hi = math.inf, -math.inf
    for image in images:
        pyramid = build_pyramid(
            _load(image),
            lambdas=lambdas,
            min_size_px=(model.model_w + 2 * model.pad_w,
                         model.model_h + 2 * model.pad_h),
        )
        for det in slide(model, pyramid):
            lo = min(lo, det.score)
            hi = max(hi, det.score)
    if not math.isfinite(lo) or hi <= lo:
        floor = model.score_floor
        return floor, floor + 1.0
    return lo, hi


# ---------------------------------------------------------------------------
# Ensemble training (all subcategories x resolutions in lockstep)


def train_ensemble(
    samples_by_cluster: Sequence[Sequence[tuple[int, BBox2D]]],
    images: Sequence,
    annotations: Sequence[Sequence[Annotation3D]],
    cfg: TrainConfig,
    widths: Sequence[int] = (32,),
    class_name: str = "Car",
    lambdas=None,
    workers: int = 1,
    calibration_images: Optional[Sequence] = None,
    log=None,
) -> list[BoostedModel]:
    """Train every (resolution, subcategory) model with shared-pyramid mining.

    Models are ordered resolution-major then subcategory, which is also the
    ensemble model-id order. Each training image's channel pyramid is built
    once and reused for positive extraction, negative sampling, every mining
    round and calibration; results are independent of the worker count.

    Higher-resolution models only train on samples at least as wide as
    their model width (smaller objects never reach those models' detection
    scales), falling back to all samples when the cluster has none.
    """
    from concurrent.futures import ThreadPoolExecutor

    from .channels import build_pyramid
    from .clustering import model_dims_for_cluster

    jobs = []
    for level, width in enumerate(widths):
        for j, samples in enumerate(samples_by_cluster):
            if not samples:
                raise ValueError(f"cluster {j} has no samples")
            dims = model_dims_for_cluster([b for _, b in samples], base_width=width)
            eligible = [s for s in samples if s[1].width >= 0.95 * width]
            if len(eligible) < 2:
                eligible = list(samples)
            jobs.append(
                {
                    "level": level, "width": width, "cluster": j,
                    "samples": eligible, "dims": dims,
                }
            )

    def run(fn, items):
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                return list(pool.map(fn, items))
        return [fn(item) for item in items]

    def emit(record):
        if log is not None:
            log(record)

    min_size = (
        min(j["dims"][0] + 2 * j["dims"][2] for j in jobs),
        min(j["dims"][1] + 2 * j["dims"][3] for j in jobs),
    )

    def make_pyramid(img_idx):
        return build_pyramid(
            _load(images[img_idx]), lambdas=lambdas, min_size_px=min_size
        )

    pyramids = run(make_pyramid, range(len(images)))

    def prepare(job):
        mw, mh, pw, ph = job["dims"]
        pos = _extract_cluster_positives(
            job["samples"], pyramids, mw, mh, jitter=cfg.jitter
        )
        rng = check_random_state([cfg.seed, job["level"], job["cluster"]])
        neg = _sample_negatives_from_pyramids(
            pyramids, annotations, cfg.n_random_neg, mw, mh,
            class_name, rng, max_overlap=cfg.stage0_max_overlap,
        )
        return pos, [neg]

    prepared = run(prepare, jobs)
    for job, (pos, negs) in zip(jobs, prepared):
        job["pos"], job["negs"] = pos, negs

    def retrain(args):
        job, n_trees = args
        mw, mh, pw, ph = job["dims"]
        model = adaboost_train(
            job["pos"], np.vstack(job["negs"]), n_trees,
            model_geom={"model_w": mw, "model_h": mh, "pad_w": pw, "pad_h": ph},
            cascade_slack=cfg.cascade_slack,
        )
        return replace(
            model,
            subcategory_id=job["cluster"],
            resolution_level=job["level"],
            resolution_width=job["width"],
        )

    models = run(retrain, [(job, cfg.tree_schedule[0]) for job in jobs])
    for job, model in zip(jobs, models):
        emit(
            {
                "event": "stage_trained", "stage": 0,
                "cluster": job["cluster"], "resolution_level": job["level"],
                "n_trees": len(model.trees), "final_loss": model.train_loss[-1],
                "loss": model.train_loss,
                "n_neg": int(sum(len(n) for n in job["negs"])),
            }
        )

    for stage in range(1, cfg.mining_rounds + 1):

        def mine_image(img_idx):
            pyramid = pyramids[img_idx]
            per_job = []
            for model in models:
                per_job.append(
                    _mine_from_pyramid(
                        model, pyramid, annotations[img_idx], cfg, class_name
                    )
                )
            return per_job

        mined_by_image = run(mine_image, range(len(images)))
        for jidx, job in enumerate(jobs):
            rows = []
            for img_idx, per_job in enumerate(mined_by_image):
                for order, (score, feats) in enumerate(per_job[jidx]):
                    rows.append((score, img_idx, order, feats))
            rows.sort(key=lambda t: (-t[0], t[1], t[2]))
            kept = rows[: cfg.mining_quota]
            if kept:
                job["negs"].append(np.stack([t[3] for t in kept]))
            emit(
                {
                    "event": "mined", "stage": stage,
                    "cluster": job["cluster"], "resolution_level": job["level"],
                    "n_mined": len(kept),
                }
            )

        models = run(retrain, [(job, cfg.tree_schedule[stage]) for job in jobs])
        for job, model in zip(jobs, models):
            emit(
                {
                    "event": "stage_trained", "stage": stage,
                    "cluster": job["cluster"], "resolution_level": job["level"],
                    "n_trees": len(model.trees), "final_loss": model.train_loss[-1],
                    "loss": model.train_loss,
                    "n_neg": int(sum(len(n) for n in job["negs"])),
                }
            )

    bounds = [[math.inf, -math.inf] for _ in jobs]
    if calibration_images is None:
        calib_pyramids = pyramids
    else:
        calib_pyramids = [
            build_pyramid(_load(img), lambdas=lambdas, min_size_px=min_size)
            for img in calibration_images
        ]

    def calib_image(img_idx):
        from .detector import slide

        pyramid = calib_pyramids[img_idx]
        out = []
        for model in models:
            lo, hi = math.inf, -math.inf
            for det in slide(model, pyramid):
                lo = min(lo, det.score)
                hi = max(hi, det.score)
            out.append((lo, hi))
        return out

    for per_job in run(calib_image, range(len(calib_pyramids))):
        for b, (lo, hi) in zip(bounds, per_job):
            b[0] = min(b[0], lo)
            b[1] = max(b[1], hi)

    final = []
    for model, (lo, hi) in zip(models, bounds):
        if not math.isfinite(lo) or hi <= lo:
            lo, hi = model.score_floor, model.score_floor + 1.0
        final.append(replace(model, calib_min=float(lo), calib_max=float(hi)))
    return final


# ---------------------------------------------------------------------------
# Model bundles


def save_bundle(directory, models: Sequence[BoostedModel], manifest: dict) -> None:
    """Write per-model JSON files plus a manifest describing the ensemble."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, model in enumerate(models):
        name = f"model_{i:03d}.json"
        save_model(directory / name, model)
        entries.append(
            {
                "file": name,
                "subcategory_id": model.subcategory_id,
                "resolution_level": model.resolution_level,
                "resolution_width": model.resolution_width,
                "model_w": model.model_w, "model_h": model.model_h,
                "pad_w": model.pad_w, "pad_h": model.pad_h,
                "calib_min": model.calib_min, "calib_max": model.calib_max,
            }
        )
    payload = {"format": BUNDLE_FORMAT_TAG, "models": entries, **manifest}
    (directory / "manifest.json").write_text(
        json.dumps(payload, sort_keys=True, indent=1)
    )


def load_bundle(directory) -> tuple[list[BoostedModel], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != BUNDLE_FORMAT_TAG:
        raise ValueError(f"unsupported bundle format {manifest.get('format')!r}")
    models = [load_model(directory / e["file"]) for e in manifest["models"]]
    return models, manifest
