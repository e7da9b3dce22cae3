"""Config-driven experiment runner: scene grid x ablation presets x seeds.

Usage:
    semsplat run --config cfg.json [--out DIR] [--workers N] [--dry-run]
                 [--resume] [--serial]

Config schema (JSON):
    {
      "out_dir": "runs/exp1",          # optional, --out overrides
      "presets": ["full", "no_egd"],   # see PRESETS below
      "scene_seeds": [0, 1, 2, 3, 4],
      "repeat_seeds": [0, 1, 2, 3, 4],
      "scene": { ... SceneSpec overrides ... },
      "train": { ... TrainConfig overrides ... },
      "workers": 1
    }

Per finished run a JSON record lands in <out>/runs/<run_id>.json (atomic
rename); results.json is the sorted merge, summary.csv holds per-preset
medians and IQRs.  Rendered PPM/PFM dumps and a loss CSV are written for the
first repeat seed of each (preset, scene).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from multiprocessing import get_context

import numpy as np

from . import imgio, losses, mtc, raster, synth, train
from .core import ConfigError, TrainConfig, activate

PRESETS = {
    "full": {},
    "no_egd": {"egd_enabled": False},
    "no_error_aware": {"policy": "random"},
    "no_cosine": {"policy": "fixed"},
    "step_schedule": {"policy": "step"},
    "no_mtc": {"mtc_enabled": False},
    "no_Lp": {"use_lp": False},
    "no_geo_aware": {"geo_aware": False},
    "no_geo": {"lambda2": 0.0},
    "opacity_zeroing": {"policy": "opacity_zero"},
}

EXIT_BAD_CONFIG = 2
EXIT_NAN_ABORT = 3

METRIC_KEYS = ("psnr", "ssim", "rel", "rmse", "miou", "macc")


def load_config(path) -> dict:
    try:
        with open(path) as f:
            cfg = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    cfg.setdefault("presets", ["full"])
    cfg.setdefault("scene_seeds", [0])
    cfg.setdefault("repeat_seeds", [0])
    cfg.setdefault("scene", {})
    cfg.setdefault("train", {})
    cfg.setdefault("workers", 1)
    for p in cfg["presets"]:
        if p not in PRESETS:
            raise ConfigError(f"unknown preset {p!r}; choose from "
                              f"{sorted(PRESETS)}")
    # validate the overrides eagerly so --dry-run catches typos
    synth.SceneSpec.from_dict(dict(cfg["scene"], seed=0))
    base = TrainConfig()
    for k in cfg["train"]:
        if not hasattr(base, k):
            raise ConfigError(f"unknown TrainConfig field {k!r}")
    build_train_config(cfg, "full", 0).validate()
    return cfg


def build_train_config(cfg: dict, preset: str, repeat_seed: int) -> TrainConfig:
    over = dict(cfg["train"])
    over.update(PRESETS[preset])
    over["rng_seed"] = repeat_seed
    return TrainConfig().with_overrides(**over)


def run_id(cfg: dict, preset: str, scene_seed: int, repeat_seed: int) -> str:
    payload = json.dumps({
        "preset": preset, "scene_seed": scene_seed,
        "repeat_seed": repeat_seed, "scene": cfg["scene"],
        "train": cfg["train"],
    }, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def teacher_miou(scene, teacher) -> float:
    """The 2D teacher's own segmentation quality on the held-out views."""
    from . import metrics
    vals = []
    for i in range(len(scene.heldout_cameras)):
        scores = teacher.heldout_feat[i].reshape(-1, teacher.feat_dim) \
            @ teacher.class_embed.T
        pred = scores.argmax(1).reshape(scene.heldout_class[i].shape)
        vals.append(metrics.seg_metrics(pred, scene.heldout_class[i],
                                        scene.spec.n_classes)[0])
    return float(np.mean(vals))


def execute_run(job) -> dict:
    cfg, preset, scene_seed, repeat_seed, out_dir, dump_images = job
    spec = synth.SceneSpec.from_dict(dict(cfg["scene"], seed=scene_seed))
    scene = synth.generate(spec)
    teacher = synth.make_teacher(scene)
    tcfg = build_train_config(cfg, preset, repeat_seed)

    rng_init = np.random.default_rng(
        np.random.SeedSequence((scene_seed, repeat_seed, 7)))
    gset = synth.init_pixel_aligned(scene, sigma_init=0.05, rng=rng_init)
    head = mtc.ProjectionHead.create(
        gset.feat_dim, teacher.feat_dim, tcfg.head_hidden_factor,
        rng=np.random.default_rng(np.random.SeedSequence((repeat_seed, 13))))
    gset, head, reports = train.train_scene(scene, teacher, tcfg,
                                            gset=gset, head=head)
    metrics_rec = train.evaluate(gset, head, scene, teacher.class_embed,
                                 renormalize_depth=tcfg.renormalize_depth)
    rec = {
        "run_id": run_id(cfg, preset, scene_seed, repeat_seed),
        "preset": preset,
        "scene_seed": scene_seed,
        "repeat_seed": repeat_seed,
        "metrics": metrics_rec,
        "teacher_miou": teacher_miou(scene, teacher),
        "final_loss": reports[-1].total if reports else None,
    }
    if dump_images:
        img_dir = os.path.join(out_dir, "images",
                               f"{preset}_scene{scene_seed}")
        os.makedirs(img_dir, exist_ok=True)
        act = activate(gset)
        for i, cam in enumerate(scene.heldout_cameras):
            out = raster.render(act, cam)
            imgio.write_ppm(os.path.join(img_dir, f"held{i}_color.ppm"),
                            np.clip(out.color, 0, 1))
            imgio.write_pfm(os.path.join(img_dir, f"held{i}_depth.pfm"),
                            out.depth)
            imgio.write_pfm(os.path.join(img_dir, f"held{i}_alpha.pfm"),
                            out.alpha)
            imgio.write_ppm(os.path.join(img_dir, f"held{i}_gt.ppm"),
                            scene.heldout_images[i])
        losses.write_loss_csv(os.path.join(img_dir, "loss.csv"), reports)
        losses.write_loss_summary(os.path.join(img_dir, "loss_summary.json"),
                                  reports)
    return rec


def _execute_and_write(job) -> dict:
    cfg, preset, scene_seed, repeat_seed, out_dir, dump_images = job
    rec = execute_run(job)
    path = os.path.join(out_dir, "runs", f"{rec['run_id']}.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(rec, f, sort_keys=True, indent=1)
    os.replace(tmp, path)
    return rec


def summarize(records: list, path) -> None:
    by_preset: dict = {}
    for r in records:
        by_preset.setdefault(r["preset"], []).append(r)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        header = ["preset", "runs"]
        for k in METRIC_KEYS:
            header += [f"{k}_median", f"{k}_iqr"]
        w.writerow(header)
        for preset in sorted(by_preset):
            rows = by_preset[preset]
            line = [preset, len(rows)]
            for k in METRIC_KEYS:
                vals = np.array([r["metrics"][k] for r in rows])
                q1, med, q3 = np.percentile(vals, [25, 50, 75])
                line += [f"{med:.6f}", f"{q3 - q1:.6f}"]
            w.writerow(line)


def run(config_path, out_dir=None, workers=None, dry_run=False,
        resume=False, serial=False) -> int:
    try:
        cfg = load_config(config_path)
    except ConfigError as e:
        print(f"invalid config: {e}", file=sys.stderr)
        return EXIT_BAD_CONFIG

    out_dir = out_dir or cfg.get("out_dir") \
        or os.environ.get("SEMSPLAT_OUT", "semsplat_runs")
    workers = workers if workers is not None else int(cfg.get("workers", 1))
    if serial:
        workers = 1

    jobs = []
    for preset in cfg["presets"]:
        for scene_seed in cfg["scene_seeds"]:
            for i, repeat_seed in enumerate(cfg["repeat_seeds"]):
                jobs.append((cfg, preset, scene_seed, repeat_seed, out_dir,
                             i == 0))
    if dry_run:
        print(f"planned runs: {len(jobs)} -> {out_dir}")
        for _, preset, ss, rs, _, dump in jobs:
            rid = run_id(cfg, preset, ss, rs)
            print(f"  {rid}  preset={preset} scene_seed={ss} "
                  f"repeat_seed={rs}{' +images' if dump else ''}")
        return 0

    os.makedirs(os.path.join(out_dir, "runs"), exist_ok=True)
    if resume:
        remaining = []
        for job in jobs:
            rid = run_id(cfg, job[1], job[2], job[3])
            if not os.path.exists(os.path.join(out_dir, "runs",
                                               f"{rid}.json")):
                remaining.append(job)
        skipped = len(jobs) - len(remaining)
        if skipped:
            print(f"resume: skipping {skipped} completed runs")
        jobs = remaining

    try:
        if workers > 1 and len(jobs) > 1:
            with get_context("spawn").Pool(workers) as pool:
                for rec in pool.imap_unordered(_execute_and_write, jobs):
                    print(f"done {rec['run_id']} ({rec['preset']}, "
                          f"scene {rec['scene_seed']}, seed "
                          f"{rec['repeat_seed']})", flush=True)
        else:
            for job in jobs:
                rec = _execute_and_write(job)
                print(f"done {rec['run_id']} ({rec['preset']}, scene "
                      f"{rec['scene_seed']}, seed {rec['repeat_seed']})",
                      flush=True)
    except train.TrainAbort as e:
        dump_path = os.path.join(out_dir, "abort_dump.json")
        with open(dump_path, "w") as f:
            json.dump(e.dump, f, indent=1, sort_keys=True)
        print(f"non-finite loss at iteration {e.iteration}; "
              f"dump at {dump_path}", file=sys.stderr)
        return EXIT_NAN_ABORT

    run_dir = os.path.join(out_dir, "runs")
    records = []
    for name in sorted(os.listdir(run_dir)):
        if name.endswith(".json"):
            with open(os.path.join(run_dir, name)) as f:
                records.append(json.load(f))
    records.sort(key=lambda r: (r["preset"], r["scene_seed"],
                                r["repeat_seed"]))
    with open(os.path.join(out_dir, "results.json"), "w") as f:
        json.dump(records, f, sort_keys=True, indent=1)
    summarize(records, os.path.join(out_dir, "summary.csv"))
    print(f"wrote {len(records)} records to {out_dir}/results.json")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="semsplat",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run an experiment grid from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--dry-run", action="store_true")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--serial", action="store_true")
    args = parser.parse_args(argv)
    if args.command == "run":
        return run(args.config, out_dir=args.out, workers=args.workers,
                   dry_run=args.dry_run, resume=args.resume,
                   serial=args.serial)
    return EXIT_BAD_CONFIG


if __name__ == "__main__":
    sys.exit(main())
