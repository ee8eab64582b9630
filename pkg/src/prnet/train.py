"""Progressive loss, Adam, learning-rate schedule and the training loop."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import metrics
from . import tensor as tn
from .data import ShadowSample, random_crop_pair
from .model import IterationTrace, ModelConfig, ModelParams, forward
from .tensor import Gradients, NonFiniteError, Tensor

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    T: int = 8
    gamma: float = 0.8
    lr0: float = 2e-4
    epochs: int = 300
    decay_start_epoch: int = 50
    batch_size: int = 4
    crop: int = 256
    seed: int = 0
    shared_update: bool = True
    residual_output: bool = False
    loss_all_iterations: bool = True
    hflip: bool = False
    checkpoint_every: int = 10
    max_steps: int | None = None

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.epochs < 1 or not 0 <= self.decay_start_epoch < self.epochs:
            raise ValueError(
                f"need 0 <= decay_start_epoch < epochs, got {self.decay_start_epoch}, {self.epochs}")
        if self.batch_size < 1 or self.crop < 1 or self.lr0 <= 0:
            raise ValueError("batch_size, crop and lr0 must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown train config keys: {', '.join(unknown)}")
        return cls(**d)

    def model_config(self, base: ModelConfig) -> ModelConfig:
        """``base`` with the flags this config controls applied."""
        return dataclasses.replace(base, shared_update=self.shared_update,
                                   residual_output=self.residual_output, iterations=self.T)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def loss_weights(T: int, gamma):
    """gamma^(T-i) for i = 1..T; works with sympy symbols too."""
    return [gamma ** (T - i) for i in range(1, T + 1)]


def progressive_loss(trace: IterationTrace, target: Tensor, gamma: float = 0.8,
                     all_iterations: bool = True) -> Tensor:
    """Geometrically weighted sum of per-iteration L1 losses, later iterations weighted more."""
    preds = trace.predictions
    if not preds:
        raise ValueError("empty trace")
    if not all_iterations:
        return tn.l1_loss(preds[-1], target)
    total = None
    for w, pred in zip(loss_weights(len(preds), gamma), preds):
        term = tn.scalar_mul(tn.l1_loss(pred, target), w)
        total = term if total is None else tn.add(total, term)
    return total


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: ModelParams, grads: Gradients, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update of every parameter, in place."""
    named = params.named_parameters()
    gs = {}
    for name, p in named:
        g = grads[p]
        if g.shape != p.shape:
            raise tn.DimensionError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        if not np.isfinite(g).all():
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise NonFiniteError(f"gradient of {name} has {bad} non-finite entries "
                                 f"at step {state.step + 1}")
        gs[name] = g
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, p in named:
        g = gs[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Constant lr0, then linear decay reaching zero at epoch == cfg.epochs."""
    if epoch < cfg.decay_start_epoch:
        return cfg.lr0
    return cfg.lr0 * (cfg.epochs - epoch) / (cfg.epochs - cfg.decay_start_epoch)


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def collate(samples: Sequence[ShadowSample]) -> tuple[Tensor, Tensor, Tensor]:
    cat = lambda xs: Tensor(np.concatenate([x.data for x in xs], axis=0))  # noqa: E731
    return (cat([s.shadow for s in samples]), cat([s.free for s in samples]),
            cat([s.mask for s in samples]))


def train_step(params: ModelParams, batch: Sequence[ShadowSample], cfg: TrainConfig,
               adam: AdamState, lr: float) -> float:
    shadow, free, mask = collate(batch)
    with tn.Tape() as tape:
        trace = forward(shadow, mask, params, cfg.T)
        loss = progressive_loss(trace, free, cfg.gamma, cfg.loss_all_iterations)
        grads = tn.backward(tape, loss)
    adam_step(params, grads, adam, lr)
    return loss.item()


def predict(params: ModelParams, sample: ShadowSample, T: int) -> IterationTrace:
    return forward(sample.shadow, sample.mask, params, T)


def validate(params: ModelParams, samples: Sequence[ShadowSample], T: int) -> dict[str, float]:
    """Mean whole-image PSNR and LAB error plus shadow-region LAB error of I_T."""
    ps, rm, rs = [], [], []
    for s in samples:
        rep = metrics.evaluate(predict(params, s, T).final, s.free, s.mask)
        ps.append(rep["all"].psnr)
        rm.append(rep["all"].rmse_lab)
        if "shadow" in rep:
            rs.append(rep["shadow"].rmse_lab)
    return {"psnr": float(np.mean(ps)), "rmse": float(np.mean(rm)),
            "rmse_shadow": float(np.mean(rs)) if rs else math.nan}


@dataclass
class TrainResult:
    params: ModelParams
    adam: AdamState
    epoch: int
    steps: int
    history: list[dict] = field(default_factory=list)
    best_rmse: float = math.inf


def train_loop(dataset: Sequence[ShadowSample], cfg: TrainConfig, params: ModelParams,
               val_set: Sequence[ShadowSample] = (), out_dir: str | Path | None = None,
               adam: AdamState | None = None, start_epoch: int = 0,
               on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train for ``cfg.epochs`` epochs (or ``cfg.max_steps`` steps).

    Batch order and crop offsets for epoch e come from a generator seeded with
    (cfg.seed, e), so resuming at an epoch boundary continues the exact
    sequence of an uninterrupted run. Checkpoints go to ``out_dir``:
    ``epoch_XXXX.prnc`` every ``cfg.checkpoint_every`` epochs, ``best.prnc``
    on best validation LAB error, and ``final.prnc``.
    """
    from .checkpoint import save_checkpoint

    if not dataset:
        raise ValueError("empty training set")
    if params.config.shared_update != cfg.shared_update or \
            params.config.residual_output != cfg.residual_output:
        raise ValueError("model config disagrees with training config on shared_update/residual_output")
    adam = adam or AdamState()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = TrainResult(params, adam, start_epoch, adam.step)
    best_path = out / "best.prnc" if out is not None else None

    for epoch in range(start_epoch, cfg.epochs):
        if cfg.max_steps is not None and result.steps >= cfg.max_steps:
            break
        rng = np.random.default_rng([cfg.seed, epoch])
        lr = lr_schedule(epoch, cfg)
        t0 = time.perf_counter()
        losses = []
        for idx in batches(len(dataset), cfg.batch_size, rng):
            if cfg.max_steps is not None and result.steps >= cfg.max_steps:
                break
            batch = [random_crop_pair(dataset[i], cfg.crop, rng, cfg.hflip) for i in idx]
            try:
                losses.append(train_step(params, batch, cfg, adam, lr))
            except NonFiniteError as err:
                if out is not None:
                    save_checkpoint(out / "aborted.prnc", params, adam, epoch, cfg)
                raise TrainingAborted(f"epoch {epoch}, step {result.steps + 1}: {err}") from err
            result.steps += 1
        result.epoch = epoch + 1
        rec = {"epoch": epoch + 1, "steps": result.steps, "lr": lr,
               "loss": float(np.mean(losses)) if losses else math.nan,
               "seconds": time.perf_counter() - t0}
        if val_set:
            rec.update({f"val_{k}": v for k, v in validate(params, val_set, cfg.T).items()})
            if out is not None and rec["val_rmse"] < result.best_rmse:
                result.best_rmse = rec["val_rmse"]
                save_checkpoint(best_path, params, adam, result.epoch, cfg)
        result.history.append(rec)
        log.info("epoch %(epoch)d steps %(steps)d loss %(loss).5f", rec)
        if on_epoch is not None:
            on_epoch(rec)
        if out is not None and cfg.checkpoint_every and result.epoch % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"epoch_{result.epoch:04d}.prnc", params, adam, result.epoch, cfg)

    if out is not None:
        save_checkpoint(out / "final.prnc", params, adam, result.epoch, cfg)
    return result
