"""Command-line entry point.

    viewdiff render-dataset [--data DIR] [--seed N]
    viewdiff train    --mode a --out runs/a
    viewdiff sample   --checkpoint runs/a/model.ckpt --out runs/a
    viewdiff sweep    --checkpoint runs/a/model.ckpt --steps 20,50 --scale 1,4
    viewdiff evaluate --checkpoint runs/a/model.ckpt --checkpoint runs/b/model.ckpt
    viewdiff diagnose --random-init --mode a

Exit codes: 0 success, 2 configuration error, 3 data error, 4 checkpoint error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import __version__
from .config import RunConfig, load_config, tomllib
from .diagnostics import attention_entropy, check_degeneracy
from .diffusion import build_schedule, sample_ddim
from .errors import CheckpointError, ConfigError, DataError, MissingDataset, ViewDiffError
from .evaluation import (
    aggregate_row,
    baseline_images,
    condition_inputs,
    eval_targets,
    generate_heldout,
    report_rows,
    run_sweep,
    save_cells,
    score_predictions,
    sweep_condition_views,
)
from .metrics import metric_encoder, psnr
from .model import ViewDiffusionModel
from .plotting import plot_eval, plot_loss, plot_sweep_grid
from .scenes import CameraPose, SceneSpec, load_dataset, make_dataset, relative_pose, render, save_png
from .training import load_model, merge_config, read_loss_csv, restore, train, write_loss_csv

log = logging.getLogger("viewdiff")

COMMANDS = ("render-dataset", "train", "sample", "sweep", "evaluate", "diagnose")


def _csv_list(kind):
    def parse(text: str):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"expected comma-separated {kind.__name__}s: {text!r}") from exc

    return parse


def _parse_set(item: str) -> tuple[str, Any]:
    key, sep, raw = item.partition("=")
    if not sep:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key.strip(), value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration (defaults to the bundled one)")
    common.add_argument("--seed", type=int, help="top-level seed for every random stream")
    common.add_argument("--mode", choices=("a", "b", "c"), help="context layout")
    common.add_argument("--views", type=int, help="condition views per sample")
    common.add_argument("--steps", type=_csv_list(int), help="DDIM step counts, e.g. 20,50,100")
    common.add_argument("--scale", type=_csv_list(float), help="guidance scales, e.g. 1,4,16")
    common.add_argument("--checkpoint", action="append", help="checkpoint file (repeat for evaluate)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help="dataset directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. --set train.steps=500")
    common.add_argument("--random-init", action="store_true", help="use fresh weights instead of a checkpoint")
    common.add_argument("--scenes", type=int, help="evaluate only the first K scenes")
    common.add_argument("--trials", type=int, default=8, help="diagnose: hidden-state pairs per check")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="viewdiff", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "render-dataset": "render the synthetic multi-view dataset",
        "train": "train a model (resumes when --checkpoint is given)",
        "sample": "generate one novel view",
        "sweep": "sample the full steps x scale grid",
        "evaluate": "score checkpoints on held-out views",
        "diagnose": "check cross-attention for query independence",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def explicit_model_flags(args) -> bool:
    return bool(args.mode or args.views or args.config
                or any(s.startswith(("model.", "dataset.resolution", "schedule.")) for s in args.set))


def config_from_args(args) -> RunConfig:
    overrides: dict[str, Any] = dict(_parse_set(s) for s in args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.mode:
        overrides["model.mode"] = args.mode
        if args.mode == "c" and args.views is None and "model.views" not in overrides:
            overrides["model.views"] = 2
    if args.views is not None:
        overrides["model.views"] = args.views
    if args.steps:
        overrides["sample.steps"] = args.steps
    if args.scale:
        overrides["sample.scales"] = args.scale
    if args.out:
        overrides["out"] = args.out
    if args.data:
        overrides["dataset.path"] = args.data
    return load_config(args.config, overrides)


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, allow_nan=False) + "\n")


def _dataset_for(cfg: RunConfig):
    ds = load_dataset(cfg.dataset.path)
    if ds.resolution != cfg.dataset.resolution or ds.views_per_scene != cfg.dataset.views_per_scene:
        raise DataError(
            f"dataset at {cfg.dataset.path} is {ds.resolution}px x {ds.views_per_scene} views; "
            f"config expects {cfg.dataset.resolution}px x {cfg.dataset.views_per_scene}"
        )
    return ds


def _schedule(cfg: RunConfig):
    s = cfg.schedule
    return build_schedule(s.timesteps, s.beta_start, s.beta_end, s.kind)


def _model(args, cfg: RunConfig, path: Optional[str] = None) -> tuple[ViewDiffusionModel, RunConfig]:
    """Model from a checkpoint (its config echo decides the shape) or fresh weights."""
    path = path or (args.checkpoint[0] if args.checkpoint else None)
    if path is None or (args.random_init and not Path(path).exists()):
        if not args.random_init:
            raise CheckpointError("--checkpoint is required (or pass --random-init)")
        return ViewDiffusionModel.from_config(cfg), cfg
    model, saved, _, _ = load_model(path)
    return model, merge_config(saved, cfg, check_model=explicit_model_flags(args))


# ---------------------------------------------------------------------------
# commands


def cmd_render_dataset(args, cfg: RunConfig) -> int:
    d = cfg.dataset
    path = make_dataset(d.path, d.n_scenes, d.views_per_scene, d.resolution, seed=cfg.seed)
    print(f"wrote {d.n_scenes * d.views_per_scene} views of {d.n_scenes} scenes; manifest {path}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    state = None
    if args.checkpoint:
        state, cfg = restore(args.checkpoint[0], cfg, check_model=explicit_model_flags(args))
        log.info("resuming from step %d", state.step)
    ds = _dataset_for(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    start = state.step if state else 0
    loss_path = out / "loss.csv"
    earlier = [r for r in read_loss_csv(loss_path) if r[0] <= start] if start and loss_path.exists() else []

    def progress(step, loss, ema):
        if step % 100 == 0 or step == cfg.train.steps:
            log.info("step %d loss %.4f ema %.4f", step, loss, ema)

    state = train(cfg, ds, state, out / "model.ckpt", progress)
    rows = earlier + state.history
    write_loss_csv(loss_path, rows)
    if rows:
        plot_loss(rows, out / "loss.png")
    (out / "config.toml").write_text(cfg.to_toml())
    ema = f"{state.ema:.4f}" if state.ema is not None else "n/a"
    print(f"trained to step {state.step}; final EMA loss {ema}; checkpoint {out / 'model.ckpt'}")
    return 0


def _single_condition(cfg: RunConfig, ds, model):
    scene, target = cfg.sample.scene, cfg.sample.target_view
    views = sweep_condition_views(cfg, model.views)
    if len(views) < model.views:
        raise ConfigError(f"need {model.views} condition views, found {views}")
    imgs, poses = condition_inputs(ds, scene, views, target)
    return scene, target, views, imgs, poses


def cmd_sample(args, cfg: RunConfig) -> int:
    model, cfg = _model(args, cfg)
    ds = _dataset_for(cfg)
    scene, target, views, imgs, poses = _single_condition(cfg, ds, model)
    steps = args.steps[0] if args.steps else cfg.sample.eval_steps
    scale = args.scale[0] if args.scale else cfg.sample.eval_scale
    ctx = model.conditioned(imgs, poses)
    img = sample_ddim(model, ctx, _schedule(cfg), steps, scale, [cfg.seed, 2])[0]
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_png(img, out / "sample.png")
    p = psnr(img, ds.images[scene, target])
    _write_json(out / "sample.json", {
        "scene_id": ds.scene_ids[scene], "condition_views": views, "target_view": target,
        "mode": model.mode, "steps": steps, "scale": scale, "seed": cfg.seed,
        "psnr": p if math.isfinite(p) else None, "psnr_infinite": math.isinf(p),
    })
    plot_sweep_grid({(steps, scale): img}, [steps], [scale], out / "sample_panel.png",
                    condition=imgs[0, 0], target=ds.images[scene, target])
    print(f"wrote {out / 'sample.png'} (PSNR {p:.2f} dB against the target)")
    return 0


def cmd_sweep(args, cfg: RunConfig) -> int:
    model, cfg = _model(args, cfg)
    ds = _dataset_for(cfg)
    scene, target, views, imgs, poses = _single_condition(cfg, ds, model)
    steps, scales = cfg.sample.steps, cfg.sample.scales
    cells = run_sweep(model, _schedule(cfg), imgs, poses, steps, scales, [cfg.seed, 2])
    out = Path(cfg.out)
    files = save_cells(cells, out / "sweep")
    truth = ds.images[scene, target]
    cell_rows = []
    for c in cells:
        row = {"steps": c.steps, "scale": c.scale, "file": None, "psnr": None, "error": c.error}
        if c.image is not None:
            p = psnr(c.image, truth)
            row.update(file=f"sweep/{files[(c.steps, c.scale)]}", psnr=p if math.isfinite(p) else None)
        cell_rows.append(row)
    failed = sum(c.error is not None for c in cells)
    _write_json(out / "sweep.json", {
        "scene_id": ds.scene_ids[scene], "condition_views": views, "target_view": target,
        "mode": model.mode, "seed": cfg.seed, "rows": steps, "cols": scales,
        "cells": cell_rows, "failed": failed,
    })
    with (out / "sweep_timing.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["steps", "scale", "seconds", "seconds_per_step"])
        for c in cells:
            w.writerow([c.steps, c.scale, f"{c.seconds:.6f}", f"{c.seconds / c.steps:.6f}"])
    plot_sweep_grid({(c.steps, c.scale): c.image for c in cells}, steps, scales, out / "sweep_grid.png",
                    condition=imgs[0, 0], target=truth)
    print(f"sweep: {len(cells) - failed}/{len(cells)} cells rendered under {out / 'sweep'}")
    return 0 if failed == 0 else 1


def cmd_evaluate(args, cfg: RunConfig) -> int:
    if not args.checkpoint:
        raise CheckpointError("evaluate needs at least one --checkpoint")
    ds = _dataset_for(cfg)
    n_scenes = min(args.scenes or ds.n_scenes, ds.n_scenes)
    targets = eval_targets(cfg, n_scenes)
    if not targets:
        raise MissingDataset("no held-out views to evaluate")
    truths = np.stack([ds.images[s, v] for s, v in targets])
    encoder = metric_encoder(ds.resolution)
    generated = []
    labels: set[str] = set()
    for path in args.checkpoint:
        model, mcfg = _model(args, cfg, path)
        label = model.mode if model.mode != "c" else f"c{model.views}"
        while label in labels:
            label += "'"
        labels.add(label)
        log.info("sampling %d held-out views with %s", len(targets), path)
        generated.append(generate_heldout(model, ds, mcfg, _schedule(mcfg), targets, label))
    base = baseline_images(ds, cfg, targets)
    gray_scores = score_predictions(base["gray"].images, truths, encoder)
    rows, summary = [], []
    for gen in generated + [base["copy"], base["gray"]]:
        scores = gray_scores if gen is base["gray"] else score_predictions(gen.images, truths, encoder)
        is_model = gen.label not in ("copy", "gray")
        steps = cfg.sample.eval_steps if is_model else None
        scale = cfg.sample.eval_scale if is_model else None
        rows += report_rows(gen, scores, ds, targets, steps, scale)
        summary.append(aggregate_row(gen, scores, gray_scores["psnr"]))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "eval.json", {
        "seed": cfg.seed, "steps": cfg.sample.eval_steps, "scale": cfg.sample.eval_scale,
        "targets": len(targets), "metric_features": "fixed-seed encoder (FID/LPIPS/CLIP analogues)",
        "rows": rows, "aggregate": summary,
    })
    with (out / "eval.csv").open("w", newline="") as fh:
        keys = ["scene_id", "target_view", "mode", "views", "steps", "scale", "psnr", "perceptual", "embed_sim"]
        w = csv.DictWriter(fh, keys, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    plot_eval(summary, out / "eval.png")
    for s in summary:
        fid = "n/a" if s["fid"] is None else f"{s['fid']:.4f}"
        mp = "inf" if s["mean_psnr"] is None else f"{s['mean_psnr']:.2f}"
        print(f"{s['mode']:>6}: PSNR {mp} dB, perceptual {s['mean_perceptual']:.4f}, "
              f"embed-sim {s['mean_embed_sim']:.4f}, FID {fid}, beats gray {s['frac_beats_gray']:.0%}")
    return 0


def default_probe_scene() -> SceneSpec:
    faces = ((0.9, 0.2, 0.2), (0.2, 0.8, 0.3), (0.2, 0.3, 0.9), (0.9, 0.8, 0.2), (0.8, 0.3, 0.8), (0.2, 0.8, 0.8))
    return SceneSpec("cube", faces, light=(0.4, 0.8, 0.45), background=(0.9, 0.9, 0.9), size=0.4, yaw=0.3)


def cmd_diagnose(args, cfg: RunConfig) -> int:
    model, cfg = _model(args, cfg)
    res = model.resolution
    scene = default_probe_scene()
    target = CameraPose(2.0, math.pi / 2, 0.3)
    cond = [CameraPose(2.0, 0.25 + 0.7 * i, 0.2) for i in range(model.views)]
    imgs = np.stack([render(scene, p, res)[0] for p in cond])[None]
    poses = np.array([[relative_pose(p, target) for p in cond]], dtype=np.float32)
    ctx = model.context(imgs, poses)
    attn = model.unet.transformer.cross_attn
    report = check_degeneracy(attn, ctx, trials=args.trials, seed=cfg.seed)
    hidden = np.random.default_rng([cfg.seed, 6]).standard_normal((1, 16, attn.to_q.weight.shape[0]))
    entropy = attention_entropy(attn, ctx, hidden)
    data = report.to_dict()
    data.update(mode=model.mode, views=model.views, trials=report.trials,
                mean_entropy=float(entropy.mean()), max_entropy=math.log(report.L))
    text = json.dumps(data, indent=2)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "diagnose.json").write_text(text + "\n")
    print(text)
    return 0


HANDLERS = {
    "render-dataset": cmd_render_dataset,
    "train": cmd_train,
    "sample": cmd_sample,
    "sweep": cmd_sweep,
    "evaluate": cmd_evaluate,
    "diagnose": cmd_diagnose,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        return HANDLERS[args.command](args, cfg)
    except ViewDiffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
