"""Toy training: synthetic images, group masks, Adam and a plateau scheduler."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import numcore as nc
from .geometry import MaskMap, gen_group_mask
from .network import StageConfig
from .pipeline import LAMBDAS, Model, RDLossReport, forward_train

PATIENCE = 10
FACTOR = 0.3
THRESHOLD = 1e-4  # relative improvement needed to reset patience

# small widths so a few hundred taped steps fit in minutes on one core
TOY_CONFIG = dict(depths=(1, 1, 1, 1), channels=8, latent=32, head_dim=8)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    lr: float = 1e-4
    best_loss: float = math.inf
    epochs_since_improvement: int = 0
    history: List[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


def plateau_schedule(state: TrainState, epoch_loss: float, patience: int = PATIENCE,
                     factor: float = FACTOR, threshold: float = THRESHOLD) -> TrainState:
    """Multiply lr by ``factor`` after ``patience`` epochs without relative improvement.

    The first loss always counts as an improvement.  A reduction resets the
    counter.
    """
    state.epoch += 1
    state.history.append(float(epoch_loss))
    if epoch_loss < state.best_loss * (1.0 - threshold):
        state.best_loss = float(epoch_loss)
        state.epochs_since_improvement = 0
    else:
        state.epochs_since_improvement += 1
        if state.epochs_since_improvement >= patience:
            state.lr *= factor
            state.epochs_since_improvement = 0
    return state


# ---------------------------------------------------------------------------
# data


def synthetic_image(rng: np.random.Generator, height: int = 64, width: int = 64) -> np.ndarray:
    """Smooth colour gradient plus a few flat rectangles and discs, values in [0, 1]."""
    yy, xx = np.mgrid[0:height, 0:width] / max(height, width)
    base = rng.uniform(0.2, 0.8, 3)
    slope = rng.uniform(-0.4, 0.4, (2, 3))
    img = base + yy[..., None] * slope[0] + xx[..., None] * slope[1]
    for _ in range(rng.integers(1, 4)):
        y0, x0 = rng.integers(0, height - 8), rng.integers(0, width - 8)
        h, w = rng.integers(8, height // 2 + 1), rng.integers(8, width // 2 + 1)
        img[y0:y0 + h, x0:x0 + w] = rng.uniform(0, 1, 3)
    py, px = np.mgrid[0:height, 0:width]
    for _ in range(rng.integers(0, 3)):
        cy, cx, r = rng.uniform(0, height), rng.uniform(0, width), rng.uniform(4, 16)
        img[(py - cy) ** 2 + (px - cx) ** 2 < r * r] = rng.uniform(0, 1, 3)
    return np.clip(img, 0.0, 1.0)


def synthetic_images(n: int, seed: int, height: int = 64, width: int = 64) -> List[np.ndarray]:
    rng = nc.make_rng(seed)
    return [synthetic_image(rng, height, width) for _ in range(n)]


def training_masks(n: int, height: int, width: int, seed: int,
                   ratios: Sequence[float] = (0.5, 0.75, 1.0)) -> List[MaskMap]:
    """One group mask per image; visible ratio cycles through ``ratios``."""
    return [gen_group_mask(height, width, ratios[i % len(ratios)], seed * 1000 + i) for i in range(n)]


# ---------------------------------------------------------------------------
# steps


def train_step(images, masks, model: Model, lam: float, state: TrainState,
               optimizer: nc.Adam, rng: np.random.Generator) -> RDLossReport:
    """One Adam step on the batch-mean loss; returns the mean report."""
    if not any(math.isclose(lam, l) for l in LAMBDAS):
        raise ValueError(f"lambda {lam} not in the configured set {LAMBDAS}")
    reports = []
    with nc.Tape() as tape:
        try:
            for img, m in zip(images, masks):
                reports.append(forward_train(model, img, m, lam, rng))
        except nc.NonFiniteError as exc:
            raise TrainingError(f"non-finite value at step {state.step}: {exc}") from exc
        loss = reports[0].total_tensor
        for r in reports[1:]:
            loss = nc.add(loss, r.total_tensor)
        loss = nc.mul(loss, 1.0 / len(reports))
    if not np.isfinite(loss.data):
        raise TrainingError(f"non-finite loss at step {state.step}")
    grads = nc.backward(tape, loss, model.params)
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise TrainingError(f"non-finite gradient at step {state.step} for {bad[:3]}")
    optimizer.lr = state.lr
    optimizer.step(model.params, grads)
    state.step += 1
    n = len(reports)
    return RDLossReport(sum(r.bpp for r in reports) / n, sum(r.distortion for r in reports) / n,
                        lam, float(loss.data))


def evaluate(model: Model, images, masks, lam: float, seed: int = 12345) -> float:
    """Mean noisy-quantized loss with a fixed noise stream (no tape)."""
    rng = nc.make_rng(seed)
    return float(np.mean([forward_train(model, x, m, lam, rng).total for x, m in zip(images, masks)]))


@dataclass
class TrainResult:
    initial_loss: float
    final_loss: float
    state: TrainState
    seconds: float
    model: Model

    @property
    def ratio(self) -> float:
        return self.final_loss / self.initial_loss


def train(images, masks, steps: int = 200, batch: int = 4, lam: float = 0.01, seed: int = 0,
          lr: float = 1e-4, cfg: Optional[StageConfig] = None,
          log: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Run ``steps`` Adam steps over shuffled epochs; lr follows the plateau rule per epoch."""
    t0 = time.perf_counter()
    cfg = cfg or StageConfig(**TOY_CONFIG)
    model = Model.init(cfg, seed)
    opt = nc.Adam(lr)
    state = TrainState(lr=lr)
    rng = nc.make_rng(seed + 1)
    initial = evaluate(model, images, masks, lam)
    n = len(images)
    epoch_losses: List[float] = []
    order = rng.permutation(n)
    pos = 0
    while state.step < steps:
        if pos >= n:
            plateau_schedule(state, float(np.mean(epoch_losses)))
            epoch_losses = []
            order, pos = rng.permutation(n), 0
        idx = order[pos:pos + batch]
        pos += batch
        rep = train_step([images[i] for i in idx], [masks[i] for i in idx], model, lam, state, opt, rng)
        epoch_losses.append(rep.total)
        if log and (state.step % 20 == 0 or state.step == steps):
            log(f"step={state.step} loss={rep.total:.4f} bpp={rep.bpp:.4f} lr={state.lr:.2e}")
    # the parameter file stores float32; keep memory and file identical
    model.params.narrow()
    final = evaluate(model, images, masks, lam)
    return TrainResult(initial, final, state, time.perf_counter() - t0, model)
