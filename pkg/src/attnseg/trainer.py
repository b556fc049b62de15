"""Optimization loop: Adam, plateau LR reduction, early stopping, ablations.

The schedule follows the training recipe exactly: Adam at lr 0.001, lr
multiplied by 0.25 after 4 consecutive epochs without validation improvement,
early stop after a configurable patience (default 10), 20% of the training
samples held out for validation, batch size 10, no augmentation. Monitoring
uses the combined validation loss; "improvement" means dropping below the best
by more than ``min_delta``.
"""

from __future__ import annotations

import csv
import enum
import os
from dataclasses import dataclass, field

import numpy as np

from attnseg.losses import combined_loss
from attnseg.metrics import MetricReport, confusion_counts, compute_metrics, mean_report
from attnseg.model import ModelConfig, SegmentationModel, build_model
from attnseg.tensor import Tensor, no_grad


class MissingGradError(RuntimeError):
    """adam_step found a parameter without a populated gradient."""


class NumericalAbort(RuntimeError):
    """Training hit a non-finite loss; message carries epoch/batch/lr."""


class Adam:
    """Adam optimizer with bias-corrected first/second moments."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params: list[Tensor] = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        """One update: theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)."""
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise MissingGradError(f"parameter {i} has no gradient (shape {p.shape})")
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


class Action(enum.Enum):
    CONTINUE = "continue"
    REDUCE_LR = "reduce_lr"
    STOP = "stop"


@dataclass
class PlateauSchedule:
    """Plateau LR reduction plus early stopping, keyed on validation loss."""

    plateau_patience: int = 4
    factor: float = 0.25
    early_stop_patience: int = 10
    min_delta: float = 1e-5
    best_loss: float = field(default=np.inf)
    epochs_since_improve: int = 0
    plateau_counter: int = 0

    def update(self, val_loss: float) -> Action:
        """Consume one epoch's validation loss and emit the schedule action."""
        if val_loss < self.best_loss - self.min_delta:
            self.best_loss = val_loss
            self.epochs_since_improve = 0
            self.plateau_counter = 0
            return Action.CONTINUE
        self.epochs_since_improve += 1
        self.plateau_counter += 1
        if self.epochs_since_improve >= self.early_stop_patience:
            return Action.STOP
        if self.plateau_counter >= self.plateau_patience:
            self.plateau_counter = 0
            return Action.REDUCE_LR
        return Action.CONTINUE


def split_train_val(samples, fraction: float = 0.2, seed: int = 0):
    """Deterministic shuffled split; floor(n * fraction) goes to validation."""
    if len(samples) < 5:
        raise ValueError(f"need at least 5 samples to split, got {len(samples)}")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_val = int(len(samples) * fraction)
    val_idx = set(order[:n_val].tolist())
    train = [samples[i] for i in order[n_val:]]
    val = [samples[i] for i in order[:n_val]]
    assert len(train) + len(val) == len(samples)
    return train, val


@dataclass
class TrainConfig:
    """Run hyperparameters (model structure lives in ModelConfig)."""

    batch_size: int = 10
    lr: float = 1e-3
    max_epochs: int = 100
    val_fraction: float = 0.2
    plateau_patience: int = 4
    lr_factor: float = 0.25
    early_stop_patience: int = 10
    min_delta: float = 1e-5
    seed: int = 0
    jaccard_smooth: float = 1.0


@dataclass
class TrainState:
    """History and bookkeeping of one training run."""

    history: list[dict] = field(default_factory=list)
    best_val_loss: float = np.inf
    best_epoch: int = -1
    checkpoint_path: str | None = None
    stopped_early: bool = False
    seed: int = 0


HISTORY_FIELDS = (
    "epoch", "lr", "train_loss", "val_loss", "val_jaccard", "val_dice",
    "val_sensitivity", "val_accuracy", "val_precision", "val_specificity",
)


def to_batch(samples, in_channels: int) -> tuple[Tensor, Tensor]:
    """Stack samples into (images, masks) tensors, replicating gray to RGB."""
    imgs = np.stack([s.image for s in samples])
    if imgs.shape[1] == 1 and in_channels == 3:
        imgs = np.repeat(imgs, 3, axis=1)
    masks = np.stack([s.mask for s in samples])
    return Tensor(imgs), Tensor(masks)


def _batches(items, size):
    for start in range(0, len(items), size):
        yield items[start : start + size]


def evaluate(model: SegmentationModel, samples, batch_size: int = 10,
             threshold: float | None = None, jaccard_smooth: float = 1.0):
    """Mean combined loss plus per-image-mean metrics on frozen weights."""
    model.eval()
    tau = model.cfg.threshold if threshold is None else threshold
    total_loss = 0.0
    reports: list[MetricReport] = []
    with no_grad():
        for chunk in _batches(samples, batch_size):
            x, y = to_batch(chunk, model.in_channels)
            probs = model(x)
            loss = combined_loss(probs, y, smooth=jaccard_smooth)
            total_loss += float(loss.data) * len(chunk)
            pred = (probs.data >= tau).astype(np.float64)
            for i in range(len(chunk)):
                reports.append(compute_metrics(confusion_counts(pred[i], y.data[i])))
    return total_loss / len(samples), mean_report(reports)


def train(model: SegmentationModel, samples, cfg: TrainConfig,
          out_dir: str | None = None) -> TrainState:
    """Run the full schedule on `samples`; returns history and best-epoch info.

    Writes ``history.csv`` and the best checkpoint (plus its config JSON) into
    `out_dir` when given. Identical seeds and configs reproduce the history
    byte for byte.
    """
    if not samples:
        raise ValueError("empty dataset")
    train_set, val_set = split_train_val(samples, cfg.val_fraction, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)  # epoch shuffling stream
    optimizer = Adam(model.parameters(), lr=cfg.lr)
    schedule = PlateauSchedule(
        plateau_patience=cfg.plateau_patience,
        factor=cfg.lr_factor,
        early_stop_patience=cfg.early_stop_patience,
        min_delta=cfg.min_delta,
    )
    state = TrainState(seed=cfg.seed)
    ckpt_path = os.path.join(out_dir, "best.ckpt") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    for epoch in range(cfg.max_epochs):
        model.train()
        order = rng.permutation(len(train_set))
        shuffled = [train_set[i] for i in order]
        epoch_loss = 0.0
        for b, chunk in enumerate(_batches(shuffled, cfg.batch_size)):
            x, y = to_batch(chunk, model.in_channels)
            optimizer.zero_grad()
            loss = combined_loss(model(x), y, smooth=cfg.jaccard_smooth)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericalAbort(
                    f"non-finite loss at epoch {epoch} batch {b} lr {optimizer.lr!r}"
                )
            loss.backward()
            optimizer.step()
            epoch_loss += value * len(chunk)
        train_loss = epoch_loss / len(train_set)

        val_loss, val_metrics = evaluate(
            model, val_set, cfg.batch_size, jaccard_smooth=cfg.jaccard_smooth
        )
        state.history.append({
            "epoch": epoch,
            "lr": optimizer.lr,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "val_jaccard": val_metrics.jaccard,
            "val_dice": val_metrics.dice,
            "val_sensitivity": val_metrics.sensitivity,
            "val_accuracy": val_metrics.accuracy,
            "val_precision": val_metrics.precision,
            "val_specificity": val_metrics.specificity,
        })
        if val_loss < state.best_val_loss:
            state.best_val_loss = val_loss
            state.best_epoch = epoch
            if ckpt_path:
                model.save(ckpt_path, os.path.join(out_dir, "best_config.json"))
                state.checkpoint_path = ckpt_path

        action = schedule.update(val_loss)
        if action is Action.REDUCE_LR:
            optimizer.lr *= cfg.lr_factor
        elif action is Action.STOP:
            state.stopped_early = True
            break

    if out_dir:
        write_history_csv(os.path.join(out_dir, "history.csv"), state.history)
    return state


def write_history_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_FIELDS)
        for row in history:
            writer.writerow([repr(row[k]) if k != "epoch" else row[k] for k in HISTORY_FIELDS])


ABLATION_STEPS = (
    ("baseline", dict(use_convblock=False, use_sfeb=False, use_tam=False)),
    ("+convblock", dict(use_convblock=True, use_sfeb=False, use_tam=False)),
    ("+convblock+sfeb", dict(use_convblock=True, use_sfeb=True, use_tam=False)),
    ("+convblock+sfeb+tam", dict(use_convblock=True, use_sfeb=True, use_tam=True)),
)

ABLATION_FIELDS = (
    "config", "param_count", "jaccard", "dice", "sensitivity", "accuracy",
    "precision", "specificity",
)


def ablation_run(train_samples, test_samples, base_cfg: ModelConfig,
                 train_cfg: TrainConfig, out_dir: str | None = None) -> list[dict]:
    """Train the four stacked configurations under one seed; evaluate on test.

    Emits one row per configuration in stacking order; parameter counts
    increase strictly down the rows.
    """
    rows = []
    for name, toggles in ABLATION_STEPS:
        cfg = ModelConfig(**{
            **{k: getattr(base_cfg, k) for k in (
                "preset", "input_size", "decoder_widths", "tam_heads", "gsa_scale",
                "gsa_use_pe", "sfeb_in_decoder", "threshold", "seed",
            )},
            **toggles,
        })
        model = build_model(cfg)
        run_dir = os.path.join(out_dir, name.replace("+", "p")) if out_dir else None
        train(model, train_samples, train_cfg, out_dir=run_dir)
        _, report = evaluate(model, test_samples, train_cfg.batch_size,
                             jaccard_smooth=train_cfg.jaccard_smooth)
        row = {"config": name, "param_count": model.param_count()}
        row.update({k: getattr(report, k) for k in ABLATION_FIELDS[2:]})
        rows.append(row)
    if out_dir:
        with open(os.path.join(out_dir, "ablation.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(ABLATION_FIELDS)
            for row in rows:
                writer.writerow([row["config"], row["param_count"]]
                                + [repr(row[k]) for k in ABLATION_FIELDS[2:]])
    return rows
