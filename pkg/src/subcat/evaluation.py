"""KITTI-protocol scoring: difficulty filtering, greedy matching,
precision/recall with interpolated average precision, orientation-similarity
curves, miss rate at a false-positives-per-image operating point, and a
taxonomy of false positives and missed detections.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .annotations import Annotation3D, Occlusion, wrap_angle
from .detector import overlap

DEFAULT_OVERLAP = 0.7
LOC_OVERLAP = 0.1  # below this an error box is unrelated to any object


class DetFlag(enum.Enum):
    TP = "tp"
    FP = "fp"
    IGNORED = "ignored"


class GTFlag(enum.Enum):
    MATCHED = "matched"
    MISSED = "missed"
    DONT_CARE = "dont_care"


@dataclass(frozen=True)
class EvalSettings:
    name: str
    min_height: float
    max_occlusion: Occlusion
    max_truncation: float
    overlap_thr: float = DEFAULT_OVERLAP

    def __post_init__(self):
        if not 0.0 < self.overlap_thr < 1.0:
            raise ValueError("overlap_thr must lie in (0, 1)")


def difficulty_presets() -> dict[str, dict]:
    with resources.files("subcat.data").joinpath("difficulty.json").open() as fh:
        raw = json.load(fh)
    return {k: v for k, v in raw.items() if not k.startswith("_")}


def eval_settings(name: str, overlap_thr: float = DEFAULT_OVERLAP) -> EvalSettings:
    presets = difficulty_presets()
    if name not in presets:
        raise ValueError(f"unknown difficulty {name!r}; options: {sorted(presets)}")
    p = presets[name]
    return EvalSettings(
        name=name,
        min_height=p["min_height"],
        max_occlusion=Occlusion(p["max_occlusion"]),
        max_truncation=p["max_truncation"],
        overlap_thr=overlap_thr,
    )


def difficulty_filter(
    gt: Annotation3D, settings: EvalSettings, class_name: str = "Car"
) -> bool:
    """True when the ground truth is evaluated; False marks a don't-care."""
    if gt.class_name != class_name:
        return False
    if gt.bbox.height < settings.min_height:
        return False
    if int(gt.occlusion) > int(settings.max_occlusion):
        return False
    if gt.truncation > settings.max_truncation:
        return False
    return True


@dataclass
class MatchReport:
    det_flags: list[DetFlag]
    gt_flags: list[GTFlag]
    det_scores: list[float]
    delta_theta: list[Optional[float]]  # per detection, set on TPs

    def __post_init__(self):
        if not (len(self.det_flags) == len(self.det_scores) == len(self.delta_theta)):
            raise ValueError("per-detection lists must align")

    @property
    def n_evaluated_gt(self) -> int:
        return sum(1 for f in self.gt_flags if f is not GTFlag.DONT_CARE)


def match(
    dets: Sequence[Annotation3D],
    gts: Sequence[Annotation3D],
    settings: EvalSettings,
    class_name: str = "Car",
) -> MatchReport:
    """Greedy score-ordered assignment of detections to ground truth.

    Each detection claims the highest-overlap unmatched evaluated GT at or
    above the overlap threshold (TP, recording the observation-angle
    error); failing that, a don't-care GT at threshold makes it ignored;
    otherwise it is a false positive.
    """
    scores = [d.score if d.score is not None else 0.0 for d in dets]
    if any(scores[i] < scores[i + 1] for i in range(len(scores) - 1)):
        raise ValueError("detections must be sorted by score descending")

    evaluated = [difficulty_filter(g, settings, class_name) for g in gts]
    taken = [False] * len(gts)
    det_flags: list[DetFlag] = []
    deltas: list[Optional[float]] = []
    for det in dets:
        best_eval, best_eval_ov = -1, 0.0
        best_dc_ov = 0.0
        for j, gt in enumerate(gts):
            ov = overlap(det.bbox, gt.bbox)
            if ov < settings.overlap_thr:
                continue
            if evaluated[j] and not taken[j]:
                if ov > best_eval_ov:
                    best_eval, best_eval_ov = j, ov
            elif not evaluated[j]:
                best_dc_ov = max(best_dc_ov, ov)
        if best_eval >= 0:
            taken[best_eval] = True
            det_flags.append(DetFlag.TP)
            deltas.append(wrap_angle(det.alpha - gts[best_eval].alpha))
        elif best_dc_ov >= settings.overlap_thr:
            det_flags.append(DetFlag.IGNORED)
            deltas.append(None)
        else:
            det_flags.append(DetFlag.FP)
            deltas.append(None)

    gt_flags = [
        GTFlag.DONT_CARE if not evaluated[j]
        else (GTFlag.MATCHED if taken[j] else GTFlag.MISSED)
        for j in range(len(gts))
    ]
    return MatchReport(
        det_flags=det_flags,
        gt_flags=gt_flags,
        det_scores=scores,
        delta_theta=deltas,
    )


@dataclass
class EvalCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    similarity: np.ndarray
    fppi: np.ndarray
    miss_rate: np.ndarray
    ap: float
    aos: float
    n_evaluated_gt: int
    n_images: int
    ap_points: int


def _cumulative_counts(reports: Sequence[MatchReport]):
    rows = []
    for rep in reports:
        for flag, score, delta in zip(rep.det_flags, rep.det_scores, rep.delta_theta):
            if flag is DetFlag.IGNORED:
                continue
            is_tp = flag is DetFlag.TP
            sim = 0.5 * (1.0 + math.cos(delta)) if is_tp else 0.0
            rows.append((score, 1 if is_tp else 0, sim))
    rows.sort(key=lambda r: -r[0])
    scores = np.array([r[0] for r in rows])
    tp = np.cumsum([r[1] for r in rows])
    fp = np.cumsum([1 - r[1] for r in rows])
    sim = np.cumsum([r[2] for r in rows])
    if len(rows):
        # keep one point per distinct threshold (include all ties)
        keep = np.append(scores[:-1] > scores[1:], True)
        scores, tp, fp, sim = scores[keep], tp[keep], fp[keep], sim[keep]
    return scores, tp, fp, sim


def _interp_max_at_recall(grid, recall, values) -> np.ndarray:
    out = np.zeros_like(grid)
    for i, r in enumerate(grid):
        mask = recall >= r - 1e-12
        if mask.any():
            out[i] = values[mask].max()
    return out


def pr_curve(
    reports: Sequence[MatchReport],
    n_images: int,
    ap_points: int = 41,
) -> EvalCurve:
    """Precision/recall and similarity/recall curves with interpolated areas.

    AP and AOS sample max precision / max similarity at ``ap_points``
    evenly spaced recall values (41-point by default, 11-point optional).
    """
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    n_gt = sum(rep.n_evaluated_gt for rep in reports)
    if n_gt == 0:
        raise ValueError("no evaluated ground truth to score against")
    if ap_points < 2:
        raise ValueError("ap_points must be >= 2")

    scores, tp, fp, sim = _cumulative_counts(reports)
    if len(scores) == 0:
        grid = np.linspace(0.0, 1.0, ap_points)
        zero = np.zeros(0)
        return EvalCurve(
            thresholds=zero, precision=zero, recall=zero, similarity=zero,
            fppi=zero, miss_rate=zero, ap=0.0, aos=0.0,
            n_evaluated_gt=n_gt, n_images=n_images, ap_points=ap_points,
        )

    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    similarity = sim / np.maximum(tp + fp, 1)
    fppi = fp / n_images
    grid = np.linspace(0.0, 1.0, ap_points)
    ap = float(_interp_max_at_recall(grid, recall, precision).mean())
    aos = float(_interp_max_at_recall(grid, recall, similarity).mean())
    return EvalCurve(
        thresholds=scores,
        precision=precision,
        recall=recall,
        similarity=similarity,
        fppi=fppi,
        miss_rate=1.0 - recall,
        ap=ap,
        aos=aos,
        n_evaluated_gt=n_gt,
        n_images=n_images,
        ap_points=ap_points,
    )


def miss_rate_at_fppi(
    reports: Sequence[MatchReport], n_images: int, fppi: float = 0.1
) -> float:
    """1 - recall at the tightest threshold whose FP/image stays <= fppi.

    Between adjacent thresholds the recall is interpolated log-linearly in
    FPPI. With no admissible threshold the miss rate is 1.
    """
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    n_gt = sum(rep.n_evaluated_gt for rep in reports)
    if n_gt == 0:
        raise ValueError("no evaluated ground truth to score against")
    scores, tp, fp, _ = _cumulative_counts(reports)
    if len(scores) == 0:
        return 1.0
    recall = tp / n_gt
    rates = fp / n_images

    admissible = np.flatnonzero(rates <= fppi)
    if admissible.size == 0:
        return 1.0
    i = admissible[-1]
    if i == len(scores) - 1:
        return float(1.0 - recall[i])
    f0, f1 = rates[i], rates[i + 1]
    r0, r1 = recall[i], recall[i + 1]
    if f0 <= 0.0:  # log interpolation undefined at zero: fall back to linear
        t = (fppi - f0) / (f1 - f0)
    else:
        t = (math.log(fppi) - math.log(f0)) / (math.log(f1) - math.log(f0))
    return float(1.0 - (r0 + t * (r1 - r0)))


# ---------------------------------------------------------------------------
# Error taxonomy


TAXONOMY_LABELS = ("loc", "occ", "trunc", "trunc+occ", "other")


def fp_taxonomy(
    report: MatchReport,
    dets: Sequence[Annotation3D],
    gts: Sequence[Annotation3D],
) -> tuple[list[tuple[int, str]], list[tuple[int, str]]]:
    """Label each false positive and each missed ground truth.

    False positives overlapping any GT by at least 0.1 are localization
    errors, otherwise "other". Missed GTs are labeled by their occlusion
    and truncation flags; unoccluded untruncated misses fall back to "loc"
    when some detection overlapped them >= 0.1, else "other".
    """
    fp_labels = []
    for i, flag in enumerate(report.det_flags):
        if flag is not DetFlag.FP:
            continue
        best = max((overlap(dets[i].bbox, g.bbox) for g in gts), default=0.0)
        fp_labels.append((i, "loc" if best >= LOC_OVERLAP else "other"))

    miss_labels = []
    for j, flag in enumerate(report.gt_flags):
        if flag is not GTFlag.MISSED:
            continue
        occluded = int(gts[j].occlusion) >= int(Occlusion.PARTIAL)
        truncated = gts[j].truncation > 0.0
        if occluded and truncated:
            label = "trunc+occ"
        elif occluded:
            label = "occ"
        elif truncated:
            label = "trunc"
        else:
            best = max((overlap(d.bbox, gts[j].bbox) for d in dets), default=0.0)
            label = "loc" if best >= LOC_OVERLAP else "other"
        miss_labels.append((j, label))
    return fp_labels, miss_labels


# ---------------------------------------------------------------------------
# Directory-level evaluation and report files


def evaluate_directories(
    gt_dir,
    result_dir,
    settings: EvalSettings,
    class_name: str = "Car",
) -> tuple[list[MatchReport], list[str], int]:
    """Match every GT label file against its result file (by stem).

    A missing result file counts as zero detections for that image.
    Returns (reports, stems, n_images).
    """
    from .annotations import load_label_file

    gt_dir, result_dir = Path(gt_dir), Path(result_dir)
    stems = sorted(p.stem for p in gt_dir.glob("*.txt"))
    if not stems:
        raise ValueError(f"no label files in {gt_dir}")
    reports = []
    for stem in stems:
        gts = load_label_file(gt_dir / f"{stem}.txt")
        result_path = result_dir / f"{stem}.txt"
        dets = load_label_file(result_path) if result_path.exists() else []
        dets = [d for d in dets if d.class_name == class_name]
        dets.sort(key=lambda d: -(d.score if d.score is not None else 0.0))
        reports.append(match(dets, gts, settings, class_name))
    return reports, stems, len(stems)


def write_curve_csv(path, curve: EvalCurve) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["threshold", "precision", "recall", "orientation_similarity",
             "fppi", "miss_rate"]
        )
        for i in range(len(curve.thresholds)):
            writer.writerow(
                [repr(float(curve.thresholds[i])), repr(float(curve.precision[i])),
                 repr(float(curve.recall[i])), repr(float(curve.similarity[i])),
                 repr(float(curve.fppi[i])), repr(float(curve.miss_rate[i]))]
            )


def write_summary_json(path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, sort_keys=True, indent=1))


def taxonomy_fractions(
    reports: Sequence[MatchReport],
    dets_per_image: Sequence[Sequence[Annotation3D]],
    gts_per_image: Sequence[Sequence[Annotation3D]],
) -> dict[str, dict[str, int]]:
    """Aggregate taxonomy counts over a dataset."""
    fp_counts = {label: 0 for label in TAXONOMY_LABELS}
    miss_counts = {label: 0 for label in TAXONOMY_LABELS}
    for rep, dets, gts in zip(reports, dets_per_image, gts_per_image):
        fps, misses = fp_taxonomy(rep, dets, gts)
        for _, label in fps:
            fp_counts[label] += 1
        for _, label in misses:
            miss_counts[label] += 1
    return {"false_positives": fp_counts, "missed_detections": miss_counts}


# ---------------------------------------------------------------------------
# Plots (SVG; matplotlib imported lazily so batch scoring stays light)


def _plt():
    import matplotlib

    matplotlib.use("svg", force=False)
    import matplotlib.pyplot as plt

    return plt


def plot_pr(path, curves: dict[str, EvalCurve]) -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, c in curves.items():
        ax.plot(c.recall, c.precision, label=f"{name} (AP {c.ap:.3f})")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.legend(loc="lower left")
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)


def plot_roc_fppi(path, curves: dict[str, EvalCurve]) -> None:
    """Recall against false positives per image (log x-axis)."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, c in curves.items():
        mask = c.fppi > 0
        if mask.any():
            ax.semilogx(c.fppi[mask], c.recall[mask], label=name)
    ax.set_xlabel("false positives per image")
    ax.set_ylabel("recall")
    ax.set_ylim(0, 1.05)
    ax.legend(loc="lower right")
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)


def plot_aos(path, curves: dict[str, EvalCurve]) -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, c in curves.items():
        ax.plot(c.recall, c.similarity, label=f"{name} (AOS {c.aos:.3f})")
    ax.set_xlabel("recall")
    ax.set_ylabel("orientation similarity")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.legend(loc="lower left")
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)


def plot_taxonomy(path, taxonomy: dict[str, dict[str, int]]) -> None:
    """Stacked bars of error-type fractions for FPs and misses."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 4))
    groups = list(taxonomy.keys())
    bottoms = np.zeros(len(groups))
    for label in TAXONOMY_LABELS:
        heights = []
        for g in groups:
            total = max(sum(taxonomy[g].values()), 1)
            heights.append(taxonomy[g][label] / total)
        ax.bar(groups, heights, bottom=bottoms, label=label)
        bottoms += np.asarray(heights)
    ax.set_ylabel("fraction")
    ax.legend()
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
