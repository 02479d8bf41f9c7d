"""AdamW + cosine schedule training loop with early stopping."""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .config import AugmentConfig, ModelConfig, TrainConfig
from .data import augment, resize_with_pad, stream, to_input
from .losses import combined_loss
from .metrics import dsc
from .model import build_model
from .tensor import Tensor, backward, no_grad, reset_tape

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "lr", "train_loss", "val_loss", "val_mdsc", "stopped_early"]


class TrainingDiverged(RuntimeError):
    pass


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * epoch / cfg.epochs))


@dataclass
class EarlyStopping:
    """Stop after ``patience`` consecutive evaluations without a min_delta gain."""

    patience: int = 6
    min_delta: float = 1e-4
    best: float = math.inf
    bad: int = 0
    nan_seen: bool = False

    def update(self, val_loss: float) -> str:
        if math.isnan(val_loss):
            self.nan_seen = True
            log.warning("validation loss is NaN; counted as no improvement")
            improved = False
        else:
            improved = val_loss < self.best - self.min_delta
        if improved:
            self.best = val_loss
            self.bad = 0
        else:
            self.bad += 1
        return "stop" if self.bad >= self.patience else "continue"


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(params: dict, state: OptimState, lr: float, cfg: TrainConfig) -> None:
    """One decoupled-weight-decay Adam update, in place.

    ``params`` maps names to leaf tensors; tensors whose ``grad`` is None are
    left alone.  Tensors flagged ``decay=False`` (biases, BN affine terms)
    skip the weight decay.  A non-finite gradient aborts the whole step
    before anything is modified.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in {name}; step aborted")
    b1, b2 = cfg.betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        data = p.data
        if p.decay and cfg.weight_decay:
            data = data * (1.0 - lr * cfg.weight_decay)
        p.data = (data - lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(p.data.dtype)


def _batches(ids, size):
    for i in range(0, len(ids), size):
        yield ids[i : i + size]


def prepare_eval(samples, size: int) -> list:
    """Pad-resize every sample to ``size`` without augmentation."""
    out = []
    for s in samples:
        r = resize_with_pad(s.image, s.mask, size)
        r.meta = {**s.meta, **r.meta}
        out.append(r)
    return out


def evaluate(model, samples, num_classes: int, batch_size: int = 8) -> tuple:
    """Eval-mode (loss, mDSC) over prepared samples.

    The loss is the per-batch combined loss weighted by batch size; mDSC is
    the mean over samples of the foreground-class DSC mean.
    """
    if not samples:
        return float("nan"), float("nan")
    was = model.training
    model.eval()
    total, scores = 0.0, []
    with no_grad():
        for chunk in _batches(list(range(len(samples))), batch_size):
            batch = [samples[i] for i in chunk]
            target = np.stack([s.mask for s in batch])
            logits = model(Tensor(to_input([s.image for s in batch])))
            total += combined_loss(logits, target).item() * len(batch)
            pred = logits.data.argmax(axis=1)
            for p, t in zip(pred, target):
                scores.append(np.mean([dsc(p, t, k) for k in range(1, num_classes)]))
    model.train(was)
    return total / len(samples), float(np.mean(scores))


@dataclass
class TrainResult:
    history: list
    best_val_loss: float
    best_epoch: int
    stopped_early: bool
    model: object = None


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_history(path, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in HISTORY_COLUMNS])


def _num_workers() -> int:
    try:
        return max(1, int(os.environ.get("GCA_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, train_samples: list, val_samples: list,
          augment_cfg: AugmentConfig | None = None, out_dir=None, run_meta: dict | None = None,
          progress=None, image_size: int | None = None) -> TrainResult:
    """Run the full protocol; writes ``history.csv`` and ``best.ckpt`` under ``out_dir``.

    Randomness: model init from ``seed``, the epoch shuffle from stream
    (seed, 1, epoch), and the augmentation of sample i in epoch e from
    stream (seed, 2, e, i), so results do not depend on worker count.
    Samples are pad-resized to ``image_size`` (default: the first training
    mask's height) before augmentation.
    """
    if not train_samples or not val_samples:
        raise ValueError("training needs non-empty train and val splits")
    augment_cfg = augment_cfg or AugmentConfig()
    seed = train_cfg.seed
    size = image_size or train_samples[0].mask.shape[0]
    train_samples = [s if s.mask.shape == (size, size) else
                     resize_with_pad(s.image, s.mask, size, augment_cfg.image_pad, augment_cfg.mask_pad)
                     for s in train_samples]
    model = build_model(model_cfg, seed)
    model.train()
    params = dict(model.named_parameters())
    opt = OptimState()
    stopper = EarlyStopping(train_cfg.patience, train_cfg.min_delta)
    val_prepared = prepare_eval(val_samples, size)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    history, best_val, best_epoch, stopped = [], math.inf, 0, False
    workers = _num_workers()
    pool = ThreadPoolExecutor(workers) if workers > 1 else None

    def sample_for(epoch, i):
        s = train_samples[i]
        if train_cfg.augment:
            return augment(s, stream(seed, 2, epoch, i), augment_cfg)
        return s

    try:
        for epoch in range(train_cfg.epochs):
            lr = cosine_lr(epoch, train_cfg)
            order = stream(seed, 1, epoch).permutation(len(train_samples))
            running = 0.0
            for chunk in _batches(order, train_cfg.batch_size):
                jobs = [(epoch, int(i)) for i in chunk]
                batch = list(pool.map(lambda a: sample_for(*a), jobs)) if pool else \
                    [sample_for(*a) for a in jobs]
                reset_tape()
                model.zero_grad()
                loss = combined_loss(model(Tensor(to_input([b.image for b in batch]))),
                                     np.stack([b.mask for b in batch]))
                value = loss.item()
                if not math.isfinite(value):
                    reset_tape()
                    raise TrainingDiverged(f"non-finite training loss at epoch {epoch + 1}")
                backward(loss)
                adamw_step(params, opt, lr, train_cfg)
                running += value * len(batch)
            row = {"epoch": epoch + 1, "lr": lr, "train_loss": running / len(train_samples)}
            last = epoch == train_cfg.epochs - 1
            if (epoch + 1) % train_cfg.eval_every == 0 or last:
                val_loss, val_mdsc = evaluate(model, val_prepared, model_cfg.num_classes,
                                              train_cfg.batch_size)
                row.update(val_loss=val_loss, val_mdsc=val_mdsc)
                if val_loss < best_val:
                    best_val, best_epoch = val_loss, epoch + 1
                    if out_dir is not None:
                        meta = {"epoch": epoch + 1, "val_loss": val_loss, "val_mdsc": val_mdsc,
                                "image_size": size, **(run_meta or {})}
                        save_checkpoint(out_dir / "best.ckpt", model, meta)
                if stopper.update(val_loss) == "stop":
                    stopped = True
            row["stopped_early"] = int(stopped)
            history.append(row)
            if progress:
                progress(row)
            if stopped:
                break
    finally:
        if pool:
            pool.shutdown()
        if out_dir is not None:
            write_history(out_dir / "history.csv", history)
    return TrainResult(history, best_val, best_epoch, stopped, model)
