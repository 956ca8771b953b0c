"""Desk-scale end-to-end calibration run (development aid, not shipped)."""
import json
import sys
import time
from pathlib import Path

from subcat.cli import main

ROOT = Path(sys.argv[1] if len(sys.argv) > 1 else "/tmp/e2e")
ROOT.mkdir(parents=True, exist_ok=True)
T0 = time.time()


def log(msg):
    print(f"[{time.time() - T0:8.1f}s] {msg}", flush=True)


def run(args):
    args = [str(a) for a in args]
    code = main(args)
    assert code == 0, (code, args)


SYNTH = [
    "--set", "synth.image_w=512",
    "--set", "synth.image_h=160",
    "--set", "synth.objects_per_image=[1,3]",
    "--set", "synth.n_orientations=8",
    "--set", "synth.occlusion_prob=0.3",
    "--set", "synth.truncation_prob=0.1",
]

train_dir = ROOT / "train"
test_dir = ROOT / "test"
if not (train_dir / "meta.json").exists():
    run(["synth", "--seed", 11, "--out", train_dir, "--set", "synth.n_images=300"] + SYNTH)
    log("train dataset done")
    run(["synth", "--seed", 12, "--out", test_dir, "--set", "synth.n_images=100"] + SYNTH)
    log("test dataset done")

DATASET = [
    "--set", f'dataset.train_images="{train_dir}/image_2"',
    "--set", f'dataset.train_labels="{train_dir}/label_2"',
    "--set", f'dataset.test_images="{test_dir}/image_2"',
    "--set", f'dataset.test_labels="{test_dir}/label_2"',
]
TRAIN = [
    "--set", "train.tree_schedule=[32,128,512,1024]",
    "--set", "train.mining_quota=2500",
]

out8 = ROOT / "out_b8"
common8 = ["--seed", 0, "--workers", 2, "--out", out8] + DATASET + TRAIN + [
    "--set", "strategy.orientation_bins=8",
    "--set", "resolutions=3",
]
for cmd in ("cluster", "train", "detect", "orient", "eval"):
    if cmd == "cluster" and (out8 / "cluster_model.json").exists():
        continue
    if cmd == "train" and (out8 / "bundle" / "manifest.json").exists():
        continue
    run([cmd] + common8)
    log(f"B=8: {cmd} done")
print(json.dumps(json.loads((out8 / "summary.json").read_text()), indent=1))

out1 = ROOT / "out_b1"
common1 = ["--seed", 0, "--workers", 2, "--out", out1] + DATASET + TRAIN + [
    "--set", "strategy.orientation_bins=1",
    "--set", "resolutions=3",
]
for cmd in ("cluster", "train", "detect", "eval"):
    if cmd == "train" and (out1 / "bundle" / "manifest.json").exists():
        continue
    run([cmd] + common1)
    log(f"B=1: {cmd} done")
print(json.dumps(json.loads((out1 / "summary.json").read_text()), indent=1))
log("ALL DONE")
