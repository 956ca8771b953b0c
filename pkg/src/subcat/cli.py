"""Batch driver: cluster | train | detect | orient | eval | synth | all.

Configuration is a JSON file deep-merged over the packaged defaults, with
``--set key.path=value`` overrides. Every command is idempotent for a
fixed (config, seed): rerunning overwrites byte-identical CSV/JSON output
regardless of the worker count.

Exit codes: 0 success, 1 internal error, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import annotations as ann
from . import boosting, clustering, detector, evaluation, orientation, synth
from .channels import estimate_lambdas
from .errors import ConfigError
from .io import load_image, list_image_files


# ---------------------------------------------------------------------------
# Configuration


def packaged_defaults() -> dict:
    with resources.files("subcat.data").joinpath("defaults.json").open() as fh:
        raw = json.load(fh)
    raw.pop("_doc", None)
    return raw


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def _apply_set(config: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, _, raw = assignment.partition("=")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set path {key!r} crosses a non-object value")
    node[parts[-1]] = value


def load_config(args) -> dict:
    config = packaged_defaults()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        config = _deep_merge(config, json.loads(path.read_text()))
    for assignment in args.set or []:
        _apply_set(config, assignment)
    if args.seed is not None:
        config["seed"] = args.seed
    if args.workers is not None:
        config["workers"] = args.workers
    if args.out is not None:
        config["out"] = args.out
    if config.get("seed") is None:
        raise ConfigError("a seed is mandatory (no wall-clock seeding)")
    return config


def _require_dir(config: dict, dotted: str) -> Path:
    node = config
    for part in dotted.split("."):
        node = node.get(part) if isinstance(node, dict) else None
    if node is None:
        raise ConfigError(f"config value {dotted!r} is required")
    path = Path(node)
    if not path.is_dir():
        raise ConfigError(f"{dotted} directory does not exist: {path}")
    return path


def _out_dir(config: dict) -> Path:
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Shared dataset plumbing


class ImageSet:
    """Lazy image access by index with a uint8 cache (bounded memory)."""

    def __init__(self, paths):
        self.paths = list(paths)
        self._cache: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, idx):
        if idx not in self._cache:
            arr = load_image(self.paths[idx])
            self._cache[idx] = (arr * 255.0 + 0.5).astype(np.uint8)
        return self._cache[idx].astype(np.float64) / 255.0


def _load_dataset(images_dir, labels_dir):
    image_paths = list_image_files(images_dir)
    if labels_dir is None:
        return ImageSet(image_paths), None, [p.stem for p in image_paths]
    stems, paths, labels = [], [], []
    for p in image_paths:
        label_path = Path(labels_dir) / f"{p.stem}.txt"
        if not label_path.exists():
            raise ConfigError(f"missing label file for image {p.stem}: {label_path}")
        stems.append(p.stem)
        paths.append(p)
        labels.append(ann.load_label_file(label_path))
    return ImageSet(paths), labels, stems


def _class_instances(labels, class_name):
    """(image_idx, annotation, GeoFeatures) for each class instance."""
    out = []
    for img_idx, annotations in enumerate(labels):
        same_class = [a for a in annotations if a.class_name == class_name]
        for a in same_class:
            feats = ann.geometric_features(a, same_class)
            out.append((img_idx, a, feats))
    return out


def _resolve_lambdas(config, images):
    if config.get("lambdas") is not None:
        return np.asarray(config["lambdas"], dtype=np.float64)
    cap = int(config.get("lambda_image_cap", 8))
    sample = [images[i] for i in range(min(cap, len(images)))]
    return estimate_lambdas(sample)


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(config) -> int:
    out = _out_dir(config)
    s = config["synth"]
    spec = synth.SynthSpec(
        n_images=int(s["n_images"]),
        image_w=int(s["image_w"]),
        image_h=int(s["image_h"]),
        objects_per_image=tuple(s["objects_per_image"]),
        orientation_set=tuple(synth.default_orientation_set(int(s["n_orientations"]))),
        occlusion_prob=float(s["occlusion_prob"]),
        truncation_prob=float(s["truncation_prob"]),
        seed=int(config["seed"]),
    )
    synth.generate_dataset(spec, out)
    print(f"wrote {spec.n_images} scenes to {out}")
    return 0


def _cluster_assignments(config, images, labels, instances):
    """ClusterModel for the configured strategy over the class instances."""
    strat = config["strategy"]
    name = strat["name"]
    feats = [f for _, _, f in instances]
    seed = int(config["seed"])
    if name == "strategy1":
        return clustering.strategy1_bins(
            feats,
            B=int(strat["orientation_bins"]),
            M=int(strat["occlusion_bins"]),
            split=bool(strat["split"]),
        )
    k = int(strat["k"])
    source = strat.get("features", "geometric")
    if source == "geometric":
        X = clustering.geo_clustering_matrix(feats)
        if name == "kmeans":
            return clustering.kmeans(X, k, seed=seed)
        if name == "spectral":
            cfg = clustering.SpectralConfig(sigma=strat.get("sigma"), k=k)
            return clustering.spectral_cluster(X, cfg, seed=seed)
        if name == "dsc":
            Xneg = _visual_negatives(config, images, labels, len(instances))
            Xg = _visual_positives(config, images, instances)
            return clustering.dsc(Xg, Xneg, k, seed=seed)
        raise ConfigError(f"unknown strategy {name!r}")
    if source == "visual":
        X = _visual_positives(config, images, instances)
        if name == "kmeans":
            return clustering.kmeans(X, k, seed=seed)
        if name == "spectral":
            cfg = clustering.SpectralConfig(sigma=strat.get("sigma"), k=k)
            return clustering.spectral_cluster(X, cfg, seed=seed)
        if name == "dsc":
            Xneg = _visual_negatives(config, images, labels, len(instances))
            return clustering.dsc(X, Xneg, k, seed=seed)
        raise ConfigError(f"unknown strategy {name!r}")
    if source == "fused":
        Xg = clustering.geo_clustering_matrix(feats)
        Xv = _visual_positives(config, images, instances)
        sigma_g = clustering.median_pairwise_distance(Xg)
        sigma_v = clustering.median_pairwise_distance(Xv)
        W = clustering.fuse_affinities(
            clustering.gaussian_affinity(Xg, sigma_g),
            clustering.gaussian_affinity(Xv, sigma_v),
            float(strat.get("weight_geo", 0.75)),
        )
        est = clustering.SpectralClustering(
            n_clusters=k, affinity="precomputed", random_state=seed
        )
        return est.fit(W).to_cluster_model()
    raise ConfigError(f"unknown strategy feature source {source!r}")


def _mean_crop_size(instances) -> tuple[int, int]:
    ws = np.array([a.bbox.width for _, a, _ in instances])
    hs = np.array([a.bbox.height for _, a, _ in instances])
    w = max(8, int(ws.mean() / 4 + 0.5) * 4)
    h = max(8, int(hs.mean() / 4 + 0.5) * 4)
    return min(w, 64), min(h, 64)


def _visual_positives(config, images, instances):
    from .channels import crop_channel_descriptor

    w, h = _mean_crop_size(instances)
    rows = [
        crop_channel_descriptor(images[img_idx], a.bbox, w, h)
        for img_idx, a, _ in instances
    ]
    return np.stack(rows)


def _visual_negatives(config, images, labels, n, cap=500):
    from .channels import crop_channel_descriptor

    rng = np.random.default_rng([int(config["seed"]), 9173])
    class_name = config["class_name"]
    w, h = 32, 32
    rows = []
    attempts = 0
    target = min(max(n, 100), cap)
    while len(rows) < target and attempts < 50 * target:
        attempts += 1
        idx = int(rng.integers(len(images)))
        image = images[idx]
        ih, iw = image.shape[:2]
        bw = float(rng.uniform(16, iw / 2))
        bh = float(rng.uniform(16, ih / 2))
        x1 = float(rng.uniform(0, iw - bw))
        y1 = float(rng.uniform(0, ih - bh))
        box = ann.BBox2D(x1, y1, x1 + bw, y1 + bh)
        if any(
            detector.overlap(box, a.bbox) >= 0.1
            for a in labels[idx]
            if a.class_name == class_name
        ):
            continue
        rows.append(crop_channel_descriptor(image, box, w, h))
    return np.stack(rows)


def cmd_cluster(config) -> int:
    out = _out_dir(config)
    images_dir = _require_dir(config, "dataset.train_images")
    labels_dir = _require_dir(config, "dataset.train_labels")
    images, labels, stems = _load_dataset(images_dir, labels_dir)
    instances = _class_instances(labels, config["class_name"])
    if not instances:
        raise ConfigError(f"no {config['class_name']!r} instances in {labels_dir}")
    model = _cluster_assignments(config, images, labels, instances)

    feats = [f for _, _, f in instances]
    sample_ids = [f"{stems[i]}:{j}" for j, (i, _, _) in enumerate(instances)]
    clustering.write_cluster_report(out / "cluster_report.csv", sample_ids, model, feats)
    clustering.write_cluster_summary(out / "cluster_summary.csv", model, feats)
    payload = {
        "strategy": model.strategy.value,
        "k": model.k,
        "assignments": model.assignments.tolist(),
        "samples": [
            {"image": stems[i], "bbox": [a.bbox.x1, a.bbox.y1, a.bbox.x2, a.bbox.y2],
             "alpha": a.alpha}
            for i, a, _ in instances
        ],
        "orientation_bins": model.orientation_bins,
        "occlusion_bins": model.occlusion_bins,
        "split": model.split,
    }
    (out / "cluster_model.json").write_text(json.dumps(payload, sort_keys=True, indent=1))
    print(f"clustered {len(instances)} instances into {model.k} subcategories")
    return 0


def cmd_train(config) -> int:
    out = _out_dir(config)
    images_dir = _require_dir(config, "dataset.train_images")
    labels_dir = _require_dir(config, "dataset.train_labels")
    cluster_path = out / "cluster_model.json"
    if not cluster_path.exists():
        raise ConfigError(f"cluster model not found: {cluster_path} (run cluster first)")
    cluster = json.loads(cluster_path.read_text())

    images, labels, stems = _load_dataset(images_dir, labels_dir)
    stem_index = {s: i for i, s in enumerate(stems)}
    samples_by_cluster: list[list] = [[] for _ in range(cluster["k"])]
    for assign, sample in zip(cluster["assignments"], cluster["samples"]):
        img_idx = stem_index[sample["image"]]
        bbox = ann.BBox2D(*sample["bbox"])
        samples_by_cluster[assign].append((img_idx, bbox))

    lambdas = _resolve_lambdas(config, images)
    t = config["train"]
    cfg = boosting.TrainConfig(
        tree_schedule=tuple(int(x) for x in t["tree_schedule"]),
        n_random_neg=int(t["n_random_neg"]),
        mining_rounds=int(t["mining_rounds"]),
        mining_quota=int(t["mining_quota"]),
        exclusion_overlap=float(t["exclusion_overlap"]),
        stage0_max_overlap=float(t["stage0_max_overlap"]),
        nms_overlap=float(t["nms_overlap"]),
        jitter=bool(t["jitter"]),
        seed=int(config["seed"]),
    )
    widths = detector.hybrid_resolution_set(
        int(t["base_width"]), int(config["resolutions"])
    )
    calib_cap = int(t["calibration_image_cap"])
    calibration_images = [images[i] for i in range(min(calib_cap, len(images)))]

    log_records = []
    models = boosting.train_ensemble(
        samples_by_cluster,
        images,
        labels,
        cfg,
        widths=widths,
        class_name=config["class_name"],
        lambdas=lambdas,
        workers=int(config["workers"]),
        calibration_images=calibration_images,
        log=log_records.append,
    )
    bundle_dir = out / "bundle"
    manifest = {
        "class_name": config["class_name"],
        "k": cluster["k"],
        "strategy": cluster["strategy"],
        "resolution_widths": widths,
        "lambdas": lambdas.tolist(),
        "seed": int(config["seed"]),
        "train_config": {
            "tree_schedule": list(cfg.tree_schedule),
            "n_random_neg": cfg.n_random_neg,
            "mining_rounds": cfg.mining_rounds,
            "mining_quota": cfg.mining_quota,
            "exclusion_overlap": cfg.exclusion_overlap,
        },
    }
    boosting.save_bundle(bundle_dir, models, manifest)
    with open(out / "train_log.jsonl", "w") as fh:
        for record in log_records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    print(f"trained {len(models)} models -> {bundle_dir}")
    return 0


def _ensemble_spec(config, models, manifest) -> detector.EnsembleSpec:
    d = config["detect"]
    return detector.EnsembleSpec(
        models=models,
        nms_overlap=float(d["nms_overlap"]),
        nms_mode=str(d["nms_mode"]),
        calibrate=d["calibrate"],
        stride=int(d["stride"]),
        lambdas=np.asarray(manifest["lambdas"], dtype=np.float64),
        scales_per_octave=int(d["scales_per_octave"]),
        n_approx_per_real=int(d["n_approx_per_real"]),
    )


def _detect_directory(config, spec, images, stems, workers):
    def run(i):
        return detector.detect_with_details(images[i], spec)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(len(images))))
    else:
        results = [run(i) for i in range(len(images))]
    return results


def cmd_detect(config) -> int:
    out = _out_dir(config)
    images_dir = _require_dir(config, "dataset.test_images")
    bundle_dir = Path(config.get("bundle") or out / "bundle")
    if not bundle_dir.is_dir():
        raise ConfigError(f"model bundle not found: {bundle_dir}")
    models, manifest = boosting.load_bundle(bundle_dir)
    spec = _ensemble_spec(config, models, manifest)

    images, _, stems = _load_dataset(images_dir, None)
    result_dir = out / "results"
    result_dir.mkdir(parents=True, exist_ok=True)
    class_name = manifest["class_name"]
    results = _detect_directory(config, spec, images, stems, int(config["workers"]))

    jsonl_lines = []
    for stem, (final, per_model) in zip(stems, results):
        detector.write_detections_kitti(
            result_dir / f"{stem}.txt", final, class_name
        )
        for det in final:
            vec = orientation.score_vector(det, per_model)
            jsonl_lines.append(
                json.dumps(
                    {
                        "image": stem,
                        "bbox": [det.bbox.x1, det.bbox.y1, det.bbox.x2, det.bbox.y2],
                        "score": det.score,
                        "model_id": det.model_id,
                        "resolution_level": det.resolution_level,
                        "score_vector": vec.tolist(),
                    },
                    sort_keys=True,
                )
            )
    (out / "detections.jsonl").write_text(
        "".join(line + "\n" for line in jsonl_lines)
    )
    print(f"detected over {len(stems)} images -> {result_dir}")
    return 0


def _orientation_training_samples(config, spec, images, labels, class_name):
    """Score vectors of training true positives with their GT angles."""
    settings = evaluation.eval_settings(
        "moderate", overlap_thr=float(config["eval"]["overlap"])
    )
    samples = []
    results = _detect_directory(config, spec, images, None, int(config["workers"]))
    for (final, per_model), gts in zip(results, labels):
        order = sorted(range(len(final)), key=lambda i: -final[i].score)
        dets_sorted = [final[i] for i in order]
        det_ann = [
            ann.Annotation3D(
                class_name=class_name, truncation=0.0,
                occlusion=ann.Occlusion.NOT_OCCLUDED, alpha=-10.0,
                bbox=d.bbox, dims_hwl=(1.0, 1.0, 1.0),
                location_xyz=(0.0, 1.0, 10.0), rotation_y=0.0, score=d.score,
            )
            for d in dets_sorted
        ]
        report = evaluation.match(det_ann, gts, settings, class_name)
        matched_pairs = _recover_matches(det_ann, gts, report, settings, class_name)
        for det_idx, gt_idx in matched_pairs:
            vec = orientation.score_vector(dets_sorted[det_idx], per_model)
            samples.append((vec, gts[gt_idx].alpha))
    return samples


def _recover_matches(dets, gts, report, settings, class_name):
    """Replay the greedy matching to recover (det, gt) index pairs."""
    evaluated = [
        evaluation.difficulty_filter(g, settings, class_name) for g in gts
    ]
    taken = [False] * len(gts)
    pairs = []
    for i, det in enumerate(dets):
        if report.det_flags[i] is not evaluation.DetFlag.TP:
            continue
        best, best_ov = -1, 0.0
        for j, gt in enumerate(gts):
            if not evaluated[j] or taken[j]:
                continue
            ov = detector.overlap(det.bbox, gt.bbox)
            if ov >= settings.overlap_thr and ov > best_ov:
                best, best_ov = j, ov
        if best >= 0:
            taken[best] = True
            pairs.append((i, best))
    return pairs


def cmd_orient(config) -> int:
    out = _out_dir(config)
    bundle_dir = Path(config.get("bundle") or out / "bundle")
    models, manifest = boosting.load_bundle(bundle_dir)
    spec = _ensemble_spec(config, models, manifest)
    class_name = manifest["class_name"]
    ocfg = config["orientation"]

    model_path = bundle_dir / "orientation.json"
    if model_path.exists():
        omodel = orientation.load_orientation_model(model_path)
    else:
        images_dir = _require_dir(config, "dataset.train_images")
        labels_dir = _require_dir(config, "dataset.train_labels")
        images, labels, _ = _load_dataset(images_dir, labels_dir)
        samples = _orientation_training_samples(
            config, spec, images, labels, class_name
        )
        if not samples:
            raise ConfigError("no true positives on the training set; cannot "
                              "train the orientation estimator")
        omodel = orientation.train_orientation(
            samples,
            kind=str(ocfg["kind"]),
            bins=int(ocfg["bins"]),
            C=float(ocfg["C"]),
            epochs=int(ocfg["epochs"]),
            seed=int(config["seed"]),
        )
        orientation.save_orientation_model(model_path, omodel)

    detections_path = out / "detections.jsonl"
    if not detections_path.exists():
        raise ConfigError(f"detections not found: {detections_path} (run detect first)")
    by_stem: dict[str, list] = {}
    for line in detections_path.read_text().splitlines():
        row = json.loads(line)
        alpha = omodel.estimate(np.asarray(row["score_vector"]))
        det = detector.Detection(
            bbox=ann.BBox2D(*row["bbox"]),
            score=row["score"],
            model_id=row["model_id"],
            resolution_level=row["resolution_level"],
            alpha=alpha,
        )
        by_stem.setdefault(row["image"], []).append(det)

    result_dir = out / "results"
    for stem, dets in sorted(by_stem.items()):
        detector.write_detections_kitti(result_dir / f"{stem}.txt", dets, class_name)
    print(f"orientation assigned for {sum(len(v) for v in by_stem.values())} "
          f"detections in {len(by_stem)} images")
    return 0


def cmd_eval(config) -> int:
    out = _out_dir(config)
    labels_dir = _require_dir(config, "dataset.test_labels")
    result_dir = Path(config.get("results") or out / "results")
    if not result_dir.is_dir():
        raise ConfigError(f"results directory not found: {result_dir}")
    ecfg = config["eval"]
    class_name = config["class_name"]

    summary = {}
    curves = {}
    for difficulty in ecfg["difficulties"]:
        settings = evaluation.eval_settings(
            difficulty, overlap_thr=float(ecfg["overlap"])
        )
        reports, stems, n_images = evaluation.evaluate_directories(
            labels_dir, result_dir, settings, class_name
        )
        curve = evaluation.pr_curve(reports, n_images, int(ecfg["ap_points"]))
        curves[difficulty] = curve
        summary[difficulty] = {
            "ap": curve.ap,
            "aos": curve.aos,
            "miss_rate_at_0.1_fppi": evaluation.miss_rate_at_fppi(
                reports, n_images, 0.1
            ),
            "n_evaluated_gt": curve.n_evaluated_gt,
        }
        evaluation.write_curve_csv(out / f"curve_{difficulty}.csv", curve)

    # taxonomy over the last difficulty's matching
    dets_per_image, gts_per_image, reports_t = [], [], []
    settings = evaluation.eval_settings(
        ecfg["difficulties"][-1], overlap_thr=float(ecfg["overlap"])
    )
    for stem in sorted(p.stem for p in Path(labels_dir).glob("*.txt")):
        gts = ann.load_label_file(Path(labels_dir) / f"{stem}.txt")
        rp = result_dir / f"{stem}.txt"
        dets = ann.load_label_file(rp) if rp.exists() else []
        dets = [d for d in dets if d.class_name == class_name]
        dets.sort(key=lambda d: -(d.score or 0.0))
        reports_t.append(evaluation.match(dets, gts, settings, class_name))
        dets_per_image.append(dets)
        gts_per_image.append(gts)
    taxonomy = evaluation.taxonomy_fractions(reports_t, dets_per_image, gts_per_image)

    evaluation.write_summary_json(out / "summary.json", summary)
    evaluation.plot_pr(out / "pr.svg", curves)
    evaluation.plot_roc_fppi(out / "roc_fppi.svg", curves)
    evaluation.plot_aos(out / "aos.svg", curves)
    evaluation.plot_taxonomy(out / "taxonomy.svg", taxonomy)
    for difficulty, row in summary.items():
        print(
            f"{difficulty}: AP={row['ap']:.4f} AOS={row['aos']:.4f} "
            f"miss@0.1fppi={row['miss_rate_at_0.1_fppi']:.4f}"
        )
    return 0


def cmd_all(config) -> int:
    for step in (cmd_cluster, cmd_train, cmd_detect, cmd_orient, cmd_eval):
        code = step(config)
        if code != 0:
            return code
    return 0


COMMANDS = {
    "cluster": cmd_cluster,
    "train": cmd_train,
    "detect": cmd_detect,
    "orient": cmd_orient,
    "eval": cmd_eval,
    "synth": cmd_synth,
    "all": cmd_all,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="subcat",
        description="Subcategory-aware vehicle detection toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file merged over defaults")
        p.add_argument(
            "--set", action="append", metavar="KEY=VALUE",
            help="override a config value (dotted path, JSON value)",
        )
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args)
        if args.workers is None and os.environ.get("SUBCAT_WORKERS"):
            config["workers"] = int(os.environ["SUBCAT_WORKERS"])
        return COMMANDS[args.command](config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
