"""KITTI-format labels and the geometric features used for subcategorization.

A label line has 15 whitespace-separated fields (a trailing 16th score field
is tolerated on input and preserved when present):

    type truncated occluded alpha x1 y1 x2 y2 h w l x y z rotation_y [score]

All operations here are pure functions of immutable inputs.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateGeometryError, LabelParseError

TWO_PI = 2.0 * math.pi


class Occlusion(enum.IntEnum):
    """KITTI occlusion index."""

    NOT_OCCLUDED = 0
    PARTIAL = 1
    HEAVY = 2
    UNKNOWN = 3


@dataclass(frozen=True)
class BBox2D:
    """Axis-aligned 2-D box in pixels, x1 < x2 and y1 < y2."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not math.isfinite(v):
                raise ValueError("bbox coordinates must be finite")
        if self.x2 <= self.x1 or self.y2 <= self.y1:
            raise ValueError(f"bbox must have positive area: {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def centroid(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def intersection_area(self, other: "BBox2D") -> float:
        iw = min(self.x2, other.x2) - max(self.x1, other.x1)
        ih = min(self.y2, other.y2) - max(self.y1, other.y1)
        if iw <= 0.0 or ih <= 0.0:
            return 0.0
        return iw * ih


@dataclass(frozen=True)
class Annotation3D:
    """One labeled object instance (a parsed KITTI label line)."""

    class_name: str
    truncation: float
    occlusion: Occlusion
    alpha: float
    bbox: BBox2D
    dims_hwl: tuple[float, float, float]
    location_xyz: tuple[float, float, float]
    rotation_y: float
    score: Optional[float] = None

    def camera_distance(self) -> float:
        return math.sqrt(sum(v * v for v in self.location_xyz))


@dataclass(frozen=True)
class GeoFeatures:
    """Geometric descriptor of one instance for subcategorization.

    Angles are stored as (cos, sin) pairs so Euclidean distances respect
    circularity. Occluder-dependent fields are all-zero when
    ``has_occluder`` is 0.
    """

    observation_angle: tuple[float, float]
    aspect_ratio: float
    truncation: float
    occlusion_level: float
    occlusion_type: tuple[float, float, float, float]
    rel_orientation: tuple[float, float] = (0.0, 0.0)
    occluder_orientation: tuple[float, float] = (0.0, 0.0)
    rel_position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    occluder_side: float = 0.0
    has_occluder: float = 0.0

    def to_vector(self) -> np.ndarray:
        """Flatten to the 18-D clustering vector (fixed field order)."""
        return np.array(
            [
                *self.observation_angle,
                self.aspect_ratio,
                self.truncation,
                self.occlusion_level,
                *self.occlusion_type,
                *self.rel_orientation,
                *self.occluder_orientation,
                *self.rel_position,
                self.occluder_side,
                self.has_occluder,
            ],
            dtype=np.float64,
        )

    @property
    def alpha(self) -> float:
        c, s = self.observation_angle
        return math.atan2(s, c)


GEO_FEATURE_DIM = 18


def wrap_angle(a: float) -> float:
    """Wrap a finite angle to (-pi, pi]."""
    if not math.isfinite(a):
        raise ValueError(f"angle must be finite, got {a}")
    r = a - TWO_PI * math.floor((a + math.pi) / TWO_PI)
    if r == -math.pi:
        return math.pi
    return r


def observation_angle(location_xyz: Sequence[float], rotation_y: float) -> float:
    """Observer-relative orientation: yaw minus the bearing of the object.

    The bearing is atan2(x, z) in camera coordinates (x right, z forward).
    """
    x, _, z = location_xyz
    if x == 0.0 and z == 0.0:
        raise DegenerateGeometryError("object located at the camera origin")
    return wrap_angle(rotation_y - math.atan2(x, z))


_N_FIELDS = 15
_FIELD_NAMES = (
    "type", "truncated", "occluded", "alpha",
    "bbox_x1", "bbox_y1", "bbox_x2", "bbox_y2",
    "height", "width", "length", "x", "y", "z", "rotation_y",
)


def parse_kitti_label(line: str) -> Annotation3D:
    """Parse one label line into an :class:`Annotation3D`.

    Raises :class:`LabelParseError` naming the 1-based token index on a
    short or malformed line, and on non-finite numeric values.
    """
    tokens = line.split()
    if len(tokens) < _N_FIELDS:
        raise LabelParseError(
            f"label line has {len(tokens)} tokens, expected >= {_N_FIELDS}; "
            f"first missing token index: {len(tokens) + 1}",
            token_index=len(tokens) + 1,
        )

    values = []
    for i, tok in enumerate(tokens[1:_N_FIELDS], start=2):
        try:
            v = float(tok)
        except ValueError:
            raise LabelParseError(
                f"token {i} ({_FIELD_NAMES[i - 1]}) is not numeric: {tok!r}",
                token_index=i,
            ) from None
        if not math.isfinite(v):
            raise LabelParseError(
                f"token {i} ({_FIELD_NAMES[i - 1]}) is not finite: {tok!r}",
                token_index=i,
            )
        values.append(v)

    score = None
    if len(tokens) >= _N_FIELDS + 1:
        try:
            score = float(tokens[_N_FIELDS])
        except ValueError:
            raise LabelParseError(
                f"token {_N_FIELDS + 1} (score) is not numeric: "
                f"{tokens[_N_FIELDS]!r}",
                token_index=_N_FIELDS + 1,
            ) from None

    trunc, occ_raw, alpha = values[0], values[1], values[2]
    x1, y1, x2, y2 = values[3:7]
    h, w, l = values[7:10]
    x, y, z = values[10:13]
    rot_y = values[13]

    occ_int = int(occ_raw)
    if occ_int not in (0, 1, 2, 3):
        # KITTI writes -1 for "unknown" in some tools; fold into UNKNOWN.
        occ_int = 3
    try:
        bbox = BBox2D(x1, y1, x2, y2)
    except ValueError as exc:
        raise LabelParseError(f"invalid bbox in label line: {exc}", token_index=5) from exc

    return Annotation3D(
        class_name=tokens[0],
        truncation=trunc,
        occlusion=Occlusion(occ_int),
        alpha=alpha,
        bbox=bbox,
        dims_hwl=(h, w, l),
        location_xyz=(x, y, z),
        rotation_y=rot_y,
        score=score,
    )


def _fmt(v: float) -> str:
    # repr-shortest float: guarantees parse(serialize(x)) round-trips exactly
    if v == int(v) and abs(v) < 1e15:
        return f"{v:.2f}"
    return repr(float(v))


def serialize_kitti_label(ann: Annotation3D) -> str:
    """Serialize to the canonical label line (field-exact round trip)."""
    fields = [
        ann.class_name,
        _fmt(ann.truncation),
        str(int(ann.occlusion)),
        _fmt(ann.alpha),
        _fmt(ann.bbox.x1), _fmt(ann.bbox.y1), _fmt(ann.bbox.x2), _fmt(ann.bbox.y2),
        _fmt(ann.dims_hwl[0]), _fmt(ann.dims_hwl[1]), _fmt(ann.dims_hwl[2]),
        _fmt(ann.location_xyz[0]), _fmt(ann.location_xyz[1]), _fmt(ann.location_xyz[2]),
        _fmt(ann.rotation_y),
    ]
    if ann.score is not None:
        fields.append(_fmt(ann.score))
    return " ".join(fields)


def load_label_file(path) -> list[Annotation3D]:
    """Parse every non-empty line of a label file."""
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line:
            out.append(parse_kitti_label(line))
    return out


def save_label_file(path, annotations: Sequence[Annotation3D]) -> None:
    text = "".join(serialize_kitti_label(a) + "\n" for a in annotations)
    Path(path).write_text(text)


def find_occluder(
    target: Annotation3D, others: Sequence[Annotation3D]
) -> Optional[int]:
    """Index into ``others`` of the occluder of ``target``, or None.

    A candidate qualifies if its 2-D box intersects the target's with
    positive area and it is strictly closer to the camera in 3-D. Among
    qualifiers the one nearest the target in 3-D wins (lowest index on
    ties).
    """
    target_dist = target.camera_distance()
    best = None
    best_d = math.inf
    for i, other in enumerate(others):
        if other is target:
            continue
        if other.bbox.intersection_area(target.bbox) <= 0.0:
            continue
        if other.camera_distance() >= target_dist:
            continue
        d = math.dist(other.location_xyz, target.location_xyz)
        if d < best_d:
            best, best_d = i, d
    return best


def occlusion_level(occludee: BBox2D, occluder: BBox2D) -> float:
    """Fraction of the occludee's box covered by the occluder, in [0, 1]."""
    frac = occludee.intersection_area(occluder) / occludee.area
    return min(max(frac, 0.0), 1.0)


def _cos_sin(a: float) -> tuple[float, float]:
    return (math.cos(a), math.sin(a))


def geometric_features(
    target: Annotation3D,
    all_annotations: Sequence[Annotation3D],
    image_w: Optional[float] = None,
) -> GeoFeatures:
    """Compute the full geometric descriptor for ``target``.

    ``target`` must be an element (by identity) of ``all_annotations``.
    ``image_w`` is accepted for interface completeness; truncation is taken
    from the label, not recomputed from image bounds.
    """
    if not any(a is target for a in all_annotations):
        raise ValueError("target must be a member of all_annotations")
    del image_w

    alpha = observation_angle(target.location_xyz, target.rotation_y)
    aspect = target.bbox.width / target.bbox.height
    one_hot = [0.0, 0.0, 0.0, 0.0]
    one_hot[int(target.occlusion)] = 1.0

    others = [a for a in all_annotations if a is not target]
    occ_idx = find_occluder(target, others)
    if occ_idx is None:
        return GeoFeatures(
            observation_angle=_cos_sin(alpha),
            aspect_ratio=aspect,
            truncation=target.truncation,
            occlusion_level=0.0,
            occlusion_type=tuple(one_hot),
        )

    occluder = others[occ_idx]
    level = occlusion_level(target.bbox, occluder.bbox)
    rel_rot = wrap_angle(target.rotation_y - occluder.rotation_y)
    rel_pos = tuple(
        t - o for t, o in zip(target.location_xyz, occluder.location_xyz)
    )
    # left = 0, right = 1, decided by bbox centroid x
    side = 0.0 if occluder.bbox.centroid[0] < target.bbox.centroid[0] else 1.0
    return GeoFeatures(
        observation_angle=_cos_sin(alpha),
        aspect_ratio=aspect,
        truncation=target.truncation,
        occlusion_level=level,
        occlusion_type=tuple(one_hot),
        rel_orientation=_cos_sin(rel_rot),
        occluder_orientation=_cos_sin(occluder.rotation_y),
        rel_position=rel_pos,
        occluder_side=side,
        has_occluder=1.0,
    )


def geo_feature_matrix(features: Sequence[GeoFeatures]) -> np.ndarray:
    """Stack descriptors into an (n, 18) matrix in fixed field order."""
    if not features:
        return np.empty((0, GEO_FEATURE_DIM), dtype=np.float64)
    return np.stack([f.to_vector() for f in features])
