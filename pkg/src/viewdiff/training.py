"""Optimizer, batch sampling and the training loop.

Randomness is counter-based: the batch for step ``s`` depends only on the run
seed and ``s``, so a resumed run replays exactly what an uninterrupted run
would have seen.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from . import autograd as ag
from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .config import RunConfig
from .diffusion import MultiViewSample, build_schedule, loss_step
from .errors import CheckpointError, CheckpointMismatch, ConfigError
from .model import ViewDiffusionModel
from .scenes import MultiViewDataset, relative_pose

log = logging.getLogger(__name__)


class Adam:
    def __init__(self, named_params, lr: float = 1e-3, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.params = list(named_params)
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.params:
            g = p.grad
            m = self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            p.assign(p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps))

    def state(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{n}": a for n, a in self.m.items()}
        out.update({f"opt.v.{n}": a for n, a in self.v.items()})
        return out

    def load(self, tensors: dict[str, np.ndarray], t: int) -> None:
        for name, p in self.params:
            for key, store in (("m", self.m), ("v", self.v)):
                arr = tensors.get(f"opt.{key}.{name}")
                if arr is None or arr.shape != p.shape:
                    raise CheckpointMismatch(f"optimizer state for {name} missing or misshapen")
                store[name] = arr.astype(p.dtype)
        self.t = t


def make_batch(dataset: MultiViewDataset, cfg: RunConfig, step: int) -> MultiViewSample:
    """Batch for ``step``: scenes are visited in a fresh permutation each epoch and
    every sample draws ``views + 1`` distinct training views (conditions first,
    target last)."""
    n, b, views = dataset.n_scenes, cfg.train.batch_size, cfg.model.views
    pool = cfg.dataset.train_views
    targets, conds, poses = [], [], []
    for idx in range(step * b, (step + 1) * b):
        epoch, pos = divmod(idx, n)
        scene = int(np.random.default_rng([cfg.seed, 1, epoch]).permutation(n)[pos])
        pick = np.random.default_rng([cfg.seed, 1, epoch, scene]).choice(len(pool), views + 1, replace=False)
        ids = [pool[i] for i in pick]
        tgt = ids[-1]
        targets.append(dataset.images[scene, tgt])
        conds.append(dataset.images[scene, ids[:-1]])
        tpose = dataset.poses[scene][tgt]
        poses.append([relative_pose(dataset.poses[scene][v], tpose) for v in ids[:-1]])
    return MultiViewSample(np.stack(targets), np.stack(conds), np.asarray(poses, dtype=np.float32))


@dataclass
class TrainState:
    model: ViewDiffusionModel
    optimizer: Adam
    step: int = 0
    ema: Optional[float] = None
    history: list[tuple[int, float, float]] = field(default_factory=list)

    @classmethod
    def fresh(cls, cfg: RunConfig) -> "TrainState":
        model = ViewDiffusionModel.from_config(cfg)
        return cls(model, Adam(model.named_parameters(), lr=cfg.train.lr))

    def save(self, path: Union[str, Path], cfg: RunConfig) -> None:
        meta = {
            "format": 1,
            "config": cfg.to_dict(),
            "step": self.step,
            "ema": self.ema,
            "adam_t": self.optimizer.t,
            "rng": {"kind": "counter", "seed": cfg.seed, "next_step": self.step},
        }
        tensors = self.model.state_dict()
        tensors.update(self.optimizer.state())
        save_checkpoint(path, tensors, meta)


def saved_config(meta: dict) -> RunConfig:
    try:
        return RunConfig.from_dict(meta["config"])
    except (KeyError, ConfigError) as exc:
        raise CheckpointError(f"checkpoint metadata holds no usable config: {exc}") from exc


def merge_config(saved: RunConfig, cfg: RunConfig, check_model: bool = True) -> RunConfig:
    """Model shape and noise schedule from ``saved``; everything else from ``cfg``."""
    key = lambda c: (c.model, c.dataset.resolution, c.schedule)  # noqa: E731
    if check_model and key(cfg) != key(saved):
        raise CheckpointMismatch("checkpoint was trained with a different model configuration")
    dataset = dataclasses.replace(cfg.dataset, resolution=saved.dataset.resolution)
    return cfg.replace(model=saved.model, schedule=saved.schedule, dataset=dataset)


def load_model(path: Union[str, Path]) -> tuple[ViewDiffusionModel, RunConfig, dict, dict]:
    """Model rebuilt from a checkpoint's config echo, with its weights loaded."""
    meta, tensors = load_checkpoint(path)
    saved = saved_config(meta)
    model = ViewDiffusionModel.from_config(saved)
    load_into(model, {k: v for k, v in tensors.items() if not k.startswith("opt.")})
    return model, saved, meta, tensors


def restore(path: Union[str, Path], cfg: Optional[RunConfig] = None,
            check_model: bool = True) -> tuple[TrainState, RunConfig]:
    """Rebuild a training state from a checkpoint.

    The model is built from the checkpoint's config echo. ``cfg`` (when given)
    supplies the training, sampling and output settings; with ``check_model``
    it must also agree on the model shape.
    """
    model, saved, meta, tensors = load_model(path)
    if cfg is not None:
        # the seed stays with the run so resumed batches continue the same streams
        saved = merge_config(saved, cfg, check_model).replace(seed=saved.seed)
    opt = Adam(model.named_parameters(), lr=saved.train.lr)
    if any(k.startswith("opt.") for k in tensors):
        opt.load(tensors, int(meta.get("adam_t", 0)))
    return TrainState(model, opt, int(meta.get("step", 0)), meta.get("ema")), saved


def train(
    cfg: RunConfig,
    dataset: MultiViewDataset,
    state: Optional[TrainState] = None,
    checkpoint_path: Optional[Union[str, Path]] = None,
    on_step: Optional[Callable[[int, float, float], None]] = None,
) -> TrainState:
    """Run until ``state.step == cfg.train.steps``, checkpointing every ``checkpoint_every`` steps."""
    state = state or TrainState.fresh(cfg)
    schedule = build_schedule(cfg.schedule.timesteps, cfg.schedule.beta_start, cfg.schedule.beta_end,
                              cfg.schedule.kind)
    params = state.model.parameters()
    decay = cfg.train.ema
    while state.step < cfg.train.steps:
        batch = make_batch(dataset, cfg, state.step)
        rng = np.random.default_rng([cfg.seed, 4, state.step])
        loss = loss_step(state.model, batch, schedule, cfg.train.p_uncond, rng)
        ag.backward(loss, params)
        state.optimizer.step()
        value = loss.item()
        if not math.isfinite(value):
            raise FloatingPointError(f"loss became {value} at step {state.step}")
        state.ema = value if state.ema is None else decay * state.ema + (1.0 - decay) * value
        state.step += 1
        state.history.append((state.step, value, state.ema))
        if on_step:
            on_step(state.step, value, state.ema)
        if checkpoint_path and state.step % cfg.train.checkpoint_every == 0:
            state.save(checkpoint_path, cfg)
    if checkpoint_path:
        state.save(checkpoint_path, cfg)
    return state


def write_loss_csv(path: Union[str, Path], rows, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with path.open("w" if new else "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["step", "loss", "ema"])
        for step, loss, ema in rows:
            w.writerow([step, repr(float(loss)), repr(float(ema))])


def read_loss_csv(path: Union[str, Path]) -> list[tuple[int, float, float]]:
    with Path(path).open(newline="") as fh:
        return [(int(r["step"]), float(r["loss"]), float(r["ema"])) for r in csv.DictReader(fh)]
