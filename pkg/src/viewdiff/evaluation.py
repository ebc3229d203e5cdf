"""Sampling sweeps and held-out evaluation built on a trained model."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autograd import no_grad
from .config import RunConfig
from .diffusion import NoiseSchedule, sample_ddim
from .errors import TooFewSamples
from .metrics import cosine, embed, fid_from_features, perceptual_distance, psnr
from .model import ViewDiffusionModel
from .scenes import MultiViewDataset, relative_pose, save_png

EVAL_CHUNK = 32


def condition_inputs(dataset: MultiViewDataset, scene: int, cond_views: Sequence[int], target_view: int):
    """``[1, N, 3, H, W]`` images and ``[1, N, 4]`` relative poses for one target."""
    tpose = dataset.poses[scene][target_view]
    imgs = dataset.images[scene, list(cond_views)][None]
    poses = np.array([[relative_pose(dataset.poses[scene][v], tpose) for v in cond_views]], dtype=np.float32)
    return imgs, poses


def eval_condition_order(cfg: RunConfig, scene: int, target_view: int) -> list[int]:
    """Training views in a seeded order; a model with N views takes the first N.

    The order depends only on the seed, scene and target, so models with
    different view counts share their leading condition view.
    """
    pool = cfg.dataset.train_views
    perm = np.random.default_rng([cfg.seed, 5, scene, target_view]).permutation(len(pool))
    return [pool[i] for i in perm]


def sweep_condition_views(cfg: RunConfig, views: int) -> list[int]:
    """``sample.condition_views`` padded with further training views up to ``views``."""
    chosen = list(cfg.sample.condition_views[:views])
    for v in cfg.dataset.train_views:
        if len(chosen) >= views:
            break
        if v not in chosen and v != cfg.sample.target_view:
            chosen.append(v)
    return chosen


@dataclass
class SweepCell:
    steps: int
    scale: float
    image: Optional[np.ndarray] = None
    seconds: float = math.nan
    error: Optional[str] = None


def run_sweep(model: ViewDiffusionModel, schedule: NoiseSchedule, cond_images, rel_poses,
              steps: Sequence[int], scales: Sequence[float], seed) -> list[SweepCell]:
    """Sample every (steps, scale) cell from the same initial noise.

    A failing cell is recorded with its error instead of aborting the grid.
    """
    with no_grad():
        context = model.conditioned(cond_images, rel_poses)
    cells = []
    for s in steps:
        for g in scales:
            cell = SweepCell(int(s), float(g))
            try:
                t0 = time.perf_counter()
                cell.image = sample_ddim(model, context, schedule, int(s), float(g), seed)[0]
                cell.seconds = time.perf_counter() - t0
            except Exception as exc:  # noqa: BLE001 - a cell failure is reported, not fatal
                cell.error = f"{type(exc).__name__}: {exc}"
            cells.append(cell)
    return cells


@dataclass
class Generated:
    label: str
    mode: str
    views: int
    images: np.ndarray  # [n, 3, H, W]
    condition_views: list[list[int]] = field(default_factory=list)


def eval_targets(cfg: RunConfig, n_scenes: int) -> list[tuple[int, int]]:
    return [(s, v) for s in range(n_scenes) for v in cfg.dataset.holdout_views]


def generate_heldout(model: ViewDiffusionModel, dataset: MultiViewDataset, cfg: RunConfig,
                     schedule: NoiseSchedule, targets: Sequence[tuple[int, int]], label: str) -> Generated:
    """Sample every held-out target with ``sample.eval_steps`` / ``eval_scale``.

    Initial noise depends only on the seed and chunk index, so models
    evaluated on the same targets start from identical noise.
    """
    out, used = [], []
    for c0 in range(0, len(targets), EVAL_CHUNK):
        chunk = targets[c0 : c0 + EVAL_CHUNK]
        imgs, poses = [], []
        for scene, tv in chunk:
            views = eval_condition_order(cfg, scene, tv)[: model.views]
            used.append(views)
            i, p = condition_inputs(dataset, scene, views, tv)
            imgs.append(i[0])
            poses.append(p[0])
        with no_grad():
            ctx = model.conditioned(np.stack(imgs), np.stack(poses))
            out.append(sample_ddim(model, ctx, schedule, cfg.sample.eval_steps, cfg.sample.eval_scale,
                                   [cfg.seed, 2, c0 // EVAL_CHUNK]))
    return Generated(label, model.mode, model.views, np.concatenate(out), used)


def baseline_images(dataset: MultiViewDataset, cfg: RunConfig, targets) -> dict[str, Generated]:
    """Copy-condition (first condition view as the prediction) and constant mid-grey."""
    copies, used = [], []
    for scene, tv in targets:
        v = eval_condition_order(cfg, scene, tv)[0]
        copies.append(dataset.images[scene, v])
        used.append([v])
    shape = (len(targets),) + dataset.images.shape[2:]
    return {
        "copy": Generated("copy", "copy", 1, np.stack(copies), used),
        "gray": Generated("gray", "gray", 0, np.full(shape, 0.5, dtype=np.float32), [[] for _ in targets]),
    }


def score_predictions(preds: np.ndarray, truths: np.ndarray, encoder) -> dict:
    """Per-pair PSNR / perceptual / embedding similarity plus set-level FID."""
    fp, ft = embed(preds, encoder), embed(truths, encoder)
    try:
        fid_value, fid_error = fid_from_features(fp, ft), None
    except TooFewSamples as exc:
        fid_value, fid_error = None, str(exc)
    return {
        "psnr": [psnr(p, t) for p, t in zip(preds, truths)],
        "perceptual": [float(x) for x in np.atleast_1d(perceptual_distance(preds, truths, encoder))],
        "embed_sim": [cosine(a, b) for a, b in zip(fp, ft)],
        "fid": fid_value,
        "fid_error": fid_error,
    }


def _finite_or_none(x: float):
    return x if math.isfinite(x) else None


def report_rows(gen: Generated, scores: dict, dataset: MultiViewDataset, targets, steps, scale) -> list[dict]:
    rows = []
    for k, (scene, tv) in enumerate(targets):
        p = scores["psnr"][k]
        rows.append({
            "scene_id": dataset.scene_ids[scene],
            "target_view": tv,
            "mode": gen.label,
            "views": gen.views,
            "condition_views": gen.condition_views[k],
            "steps": steps,
            "scale": scale,
            "psnr": _finite_or_none(p),
            "psnr_infinite": math.isinf(p),
            "perceptual": scores["perceptual"][k],
            "embed_sim": scores["embed_sim"][k],
        })
    return rows


def aggregate_row(gen: Generated, scores: dict, gray_psnr: Sequence[float]) -> dict:
    ps = np.array(scores["psnr"])
    finite = ps[np.isfinite(ps)]
    beats = float(np.mean(ps > np.asarray(gray_psnr)))
    return {
        "mode": gen.label,
        "aggregate": True,
        "n": int(len(ps)),
        "fid": scores["fid"],
        "fid_error": scores["fid_error"],
        "mean_psnr": float(finite.mean()) if len(finite) else None,
        "mean_perceptual": float(np.mean(scores["perceptual"])),
        "mean_embed_sim": float(np.mean(scores["embed_sim"])),
        "frac_beats_gray": beats,
    }


def save_cells(cells: Sequence[SweepCell], root: Path) -> dict[tuple[int, float], str]:
    root.mkdir(parents=True, exist_ok=True)
    files = {}
    for c in cells:
        if c.image is not None:
            name = f"steps{c.steps}_scale{c.scale:g}.png"
            save_png(c.image, root / name)
            files[(c.steps, c.scale)] = name
    return files
