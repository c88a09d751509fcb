"""SGD training with momentum, step learning-rate schedule, evaluation and reports."""

from __future__ import annotations

import csv
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import BatchPlan, Dataset, batches
from .models import Model, save_checkpoint
from .odeint import DivergenceError, SolverConfig

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "test_error_pct", "sec_per_iter")


class TrainingDivergedError(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 160
    batch_size: int = 128
    lr0: float = 0.1
    lr_drop_epochs: list[int] = field(default_factory=lambda: [60, 100, 140])
    lr_drop_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    eval_batch_size: int = 1000
    precision: str = "f32"
    crop_pad: int = 4

    def validate(self) -> None:
        drops = list(self.lr_drop_epochs)
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ValueError(f"lr_drop_epochs must be strictly increasing, got {drops}")
        if self.epochs > 0 and drops and drops[-1] >= self.epochs:
            raise ValueError(f"lr_drop_epochs {drops} must be < epochs={self.epochs}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch sizes >= 1")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_error_pct: float
    sec_per_iter: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_test_error_pct: float | None = None
    checkpoint: Path | None = None

    def rows(self, timing: bool = True) -> list[list]:
        out = []
        for r in self.epochs:
            row = [r.epoch, f"{r.lr:.10g}", f"{r.train_loss:.10g}", f"{r.train_acc:.10g}", f"{r.test_error_pct:.10g}"]
            if timing:
                row.append(f"{r.sec_per_iter:.6g}")
            out.append(row)
        return out

    def to_csv(self, path, timing: bool = True) -> None:
        cols = REPORT_COLUMNS if timing else REPORT_COLUMNS[:-1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            w.writerows(self.rows(timing))


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    drops = sum(1 for e in cfg.lr_drop_epochs if e <= epoch)
    return cfg.lr0 / cfg.lr_drop_factor**drops


def cross_entropy(logits: ad.Tensor, labels) -> ad.Tensor:
    """Mean negative log-likelihood under the softmax link."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    logp = ad.log_softmax(logits, axis=1)
    picked = ad.getitem(logp, (np.arange(n), labels))
    return ad.neg(ad.reduce_mean(picked))


def ridge_penalty(params) -> ad.Tensor:
    """``0.5 * sum(w**2)`` over ``params``; its gradient is the weight-decay term ``w``."""
    total = None
    for p in params:
        term = ad.scale(ad.reduce_sum(ad.mul(p, p)), 0.5)
        total = term if total is None else ad.add(total, term)
    return total


class SGD:
    """Momentum SGD with coupled weight decay: ``v <- m v + g + wd w; w <- w - lr v``."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new_w, self.velocity = sgd_momentum_step(
            [p.data for p in self.params], grads, self.velocity, lr, self.momentum, self.weight_decay
        )
        for p, w in zip(self.params, new_w):
            p.data = w

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_momentum_step(params, grads, state, lr, momentum, weight_decay=0.0):
    """Return ``(new_params, new_state)`` as lists of arrays."""
    new_params, new_state = [], []
    for w, g, v in zip(params, grads, state):
        if not (w.shape == g.shape == v.shape):
            raise ValueError(f"shape mismatch: param {w.shape}, grad {g.shape}, state {v.shape}")
        v = momentum * v + g
        if weight_decay:
            v = v + weight_decay * w
        new_state.append(v.astype(w.dtype, copy=False))
        new_params.append((w - lr * v).astype(w.dtype, copy=False))
    return new_params, new_state


def predict(model: Model, images: np.ndarray, batch_size: int = 1000, solver: SolverConfig | None = None) -> np.ndarray:
    preds = []
    with ad.no_grad():
        for start in range(0, len(images), batch_size):
            logits = model(ad.Tensor(images[start : start + batch_size]), solver=solver).data
            preds.append(np.argmax(logits, axis=1))  # argmax breaks ties toward the lowest index
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model: Model, ds: Dataset, batch_size: int = 1000, solver: SolverConfig | None = None) -> float:
    """Test error in percent."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = int((predict(model, ds.images, batch_size, solver) == ds.labels).sum())
    return 100.0 * (1.0 - correct / len(ds))


def train(
    model: Model,
    train_ds: Dataset,
    test_ds: Dataset,
    cfg: TrainConfig,
    out_dir=None,
    on_epoch=None,
) -> TrainReport:
    """Train in place; with ``out_dir`` the best-accuracy checkpoint is kept there.

    ``on_epoch(record)`` is called after every epoch.
    """
    cfg.validate()
    if train_ds.images.shape[1] != model.spec.in_channels:
        raise ValueError(
            f"dataset has {train_ds.images.shape[1]} channels, model expects {model.spec.in_channels}"
        )
    report = TrainReport()
    ckpt = Path(out_dir) / "checkpoint.gode" if out_dir is not None else None
    if ckpt is not None:
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, ckpt, extra={"epoch": -1})
        report.checkpoint = ckpt
    params = model.parameters()
    opt = SGD(params, cfg.momentum, cfg.weight_decay)
    plan = BatchPlan(cfg.batch_size, cfg.seed)
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        losses, correct, seen, times = [], 0, 0, []
        for it, (x, y) in enumerate(batches(train_ds, plan, epoch, cfg.crop_pad)):
            start = time.perf_counter()
            opt.zero_grad()
            try:
                logits = model(ad.Tensor(x))
                loss = cross_entropy(logits, y)
                ad.backward(loss)
            except (ad.NonFiniteError, DivergenceError) as exc:
                raise TrainingDivergedError(f"non-finite values at epoch {epoch}, iteration {it}: {exc}") from exc
            value = float(loss.data)
            opt.step(lr)
            times.append(time.perf_counter() - start)
            losses.append(value * len(y))
            correct += int((np.argmax(logits.data, axis=1) == y).sum())
            seen += len(y)
        test_err = evaluate(model, test_ds, cfg.eval_batch_size)
        rec = EpochRecord(
            epoch=epoch,
            lr=lr,
            train_loss=sum(losses) / seen,
            train_acc=correct / seen,
            test_error_pct=test_err,
            sec_per_iter=statistics.median(times),
        )
        report.epochs.append(rec)
        log.info(
            "epoch %d lr %.4g loss %.4f acc %.4f test_err %.2f%% %.3fs/iter",
            epoch, lr, rec.train_loss, rec.train_acc, test_err, rec.sec_per_iter,
        )
        if report.best_test_error_pct is None or test_err < report.best_test_error_pct:
            report.best_test_error_pct = test_err
            if ckpt is not None:
                save_checkpoint(model, ckpt, extra={"epoch": epoch})
        if on_epoch is not None:
            on_epoch(rec)
    return report
