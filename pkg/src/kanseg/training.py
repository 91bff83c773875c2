"""Loss, optimizer, scheduler, augmentation, metrics and the training loop."""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numerics as nm
from .data import Sample
from .errors import ConfigurationError, DimensionError, NumericalError
from .models import Model, save_checkpoint
from .numerics import Tensor

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "train_loss", "val_iou", "val_f1", "val_prec", "val_rec", "lr"]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    epochs: int = 30
    plateau_factor: float = 0.2
    plateau_patience: int = 5
    flip_prob: float = 0.5
    seed: int = 0
    loss_eps: float = 1e-6
    weight_decay: float = 1e-2
    float32: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.learning_rate < 0 or self.loss_eps <= 0 or self.weight_decay < 0:
            raise ConfigurationError("learning_rate, loss_eps and weight_decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 1 or self.plateau_patience < 1:
            raise ConfigurationError("batch_size, epochs and plateau_patience must be >= 1")
        if not 0 < self.plateau_factor < 1:
            raise ConfigurationError("plateau_factor must be in (0, 1)")
        if not 0 <= self.flip_prob <= 1:
            raise ConfigurationError("flip_prob must be in [0, 1]")

    @classmethod
    def paper_protocol(cls, **overrides) -> "TrainConfig":
        base = dict(learning_rate=1e-4, batch_size=16, epochs=60, plateau_factor=0.2, plateau_patience=5)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    iou: float
    f1: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    tn: int

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, tn: int = 0) -> "MetricsReport":
        tp, fp, fn, tn = int(tp), int(fp), int(fn), int(tn)
        if tp + fp + fn == 0:
            # nothing predicted, nothing to find
            return cls(1.0, 1.0, 1.0, 1.0, tp, fp, fn, tn)
        iou = tp / (tp + fp + fn)
        f1 = 2 * tp / (2 * tp + fp + fn)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        return cls(iou, f1, prec, rec, tp, fp, fn, tn)

    @classmethod
    def from_masks(cls, pred, truth) -> "MetricsReport":
        pred = np.asarray(pred).astype(bool)
        truth = np.asarray(truth).astype(bool)
        if pred.shape != truth.shape:
            raise DimensionError(f"prediction shape {pred.shape} != ground-truth shape {truth.shape}")
        return cls.from_counts(*confusion_counts(pred, truth))

    def to_dict(self) -> dict:
        return asdict(self)

    def scores(self) -> dict[str, float]:
        return {"iou": self.iou, "f1": self.f1, "precision": self.precision, "recall": self.recall}


def confusion_counts(pred, truth) -> tuple[int, int, int, int]:
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    tn = int(pred.size - tp - fp - fn)
    return tp, fp, fn, tn


def _predict_batch(model: Model, images: np.ndarray) -> np.ndarray:
    return model.predict_proba(images)[:, 0]


def predict(model: Model, samples, threads: int = 1, batch_size: int = 16) -> list[np.ndarray]:
    """Sigmoid probabilities [H, W] per sample, in input order."""
    samples = list(samples)
    for s in samples:
        if model.config is not None and s.channels != model.config.in_channels:
            raise DimensionError(
                f"sample {s.id!r} has {s.channels} channels, model expects {model.config.in_channels}"
            )
    chunks = [samples[i : i + batch_size] for i in range(0, len(samples), batch_size)]

    def run(chunk):
        return _predict_batch(model, np.stack([s.image for s in chunk]).astype(np.float64))

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(run, chunks))
    else:
        outs = [run(c) for c in chunks]
    return [p for out in outs for p in out]


def evaluate(model: Model, samples, threshold: float = 0.5, threads: int = 1) -> MetricsReport:
    """Micro-averaged positive-class metrics over every pixel of ``samples``."""
    totals = np.zeros(4, dtype=np.int64)
    for s, prob in zip(samples, predict(model, samples, threads)):
        totals += confusion_counts(prob > threshold, s.mask)
    return MetricsReport.from_counts(*totals)


# ---------------------------------------------------------------------------
# loss


def generalized_dice_loss(logits, target, eps: float = 1e-6) -> Tensor:
    """Two-class generalized dice with weights 1/(class volume + eps)^2."""
    logits = nm.as_tensor(logits)
    target = np.asarray(target)
    if logits.ndim == 4:
        if logits.shape[1] != 1:
            raise DimensionError(f"logits must have one channel on axis 1, got {logits.shape}")
        if target.shape != (logits.shape[0],) + logits.shape[2:]:
            raise DimensionError(f"target shape {target.shape} != logits {logits.shape} without axis 1")
        target = target[:, None]
    elif target.shape != logits.shape:
        raise DimensionError(f"target shape {target.shape} != logits shape {logits.shape}")
    if not np.isin(target, (0, 1)).all():
        raise ValueError("target must be binary")
    g1 = target.astype(logits.data.dtype)
    g0 = 1.0 - g1
    w1 = 1.0 / (g1.sum() + eps) ** 2
    w0 = 1.0 / (g0.sum() + eps) ** 2
    p1 = nm.sigmoid(logits)
    p0 = nm.sub(1.0, p1)
    num = nm.add(
        nm.scale(nm.tsum(nm.mul(p1, Tensor(g1))), w1),
        nm.scale(nm.tsum(nm.mul(p0, Tensor(g0))), w0),
    )
    den = nm.add(
        nm.scale(nm.add(nm.tsum(p1), float(g1.sum())), w1),
        nm.scale(nm.add(nm.tsum(p0), float(g0.sum())), w0),
    )
    ratio = nm.div(nm.add(num, eps), nm.add(den, eps))
    return nm.sub(1.0, nm.scale(ratio, 2.0))


# ---------------------------------------------------------------------------
# optimizer and scheduler


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 1e-2) -> AdamWState:
    """In-place AdamW update; decay multiplies the weights before the moment step."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w)
        if g.shape != w.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {w.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(w)
            v = np.zeros_like(w)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        w *= 1.0 - lr * weight_decay
        w -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


@dataclass
class PlateauState:
    lr: float
    factor: float = 0.2
    patience: int = 5
    threshold: float = 1e-8
    best: float = -np.inf
    bad_epochs: int = 0
    reductions: int = 0


def reduce_on_plateau(state: PlateauState, val_metric: float) -> float:
    """Higher-is-better plateau rule; the ``patience``-th stagnant epoch cuts the rate."""
    if val_metric > state.best + state.threshold:
        state.best = val_metric
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
        if state.bad_epochs >= state.patience:
            state.lr *= state.factor
            state.reductions += 1
            state.bad_epochs = 0
    return state.lr


# ---------------------------------------------------------------------------
# augmentation


def augment_flip(sample: Sample, rng, flip_prob: float = 0.5) -> Sample:
    image, mask = sample.image, sample.mask
    cloud = sample.cloud_mask
    if rng.random() < flip_prob:
        image, mask = image[:, :, ::-1], mask[:, ::-1]
        cloud = None if cloud is None else cloud[:, ::-1]
    if rng.random() < flip_prob:
        image, mask = image[:, ::-1, :], mask[::-1, :]
        cloud = None if cloud is None else cloud[::-1, :]
    return Sample(np.ascontiguousarray(image), np.ascontiguousarray(mask), sample.id,
                  None if cloud is None else np.ascontiguousarray(cloud))


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    history: list[dict]
    best_model: Model
    final_model: Model
    best_epoch: int
    best_val_iou: float


def write_history(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])


def train(model: Model, train_set, val_set, config: TrainConfig, out_dir=None, threads: int = 1,
          log_every: int = 0) -> TrainResult:
    """Train ``model`` in place; return history and the best-validation-IoU copy."""
    train_set, val_set = list(train_set), list(val_set)
    if not train_set or not val_set:
        raise ValueError("train: training and validation splits must be non-empty")
    dtype = np.float32 if config.float32 else np.float64
    if config.float32:
        model.params = {k: v.astype(np.float32) for k, v in model.params.items()}
    rng = np.random.default_rng(config.seed)
    opt = AdamWState()
    sched = PlateauState(config.learning_rate, config.plateau_factor, config.plateau_patience)
    history: list[dict] = []
    best_model, best_iou, best_epoch = model.copy(), -np.inf, 0
    batch_index = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [augment_flip(train_set[i], rng, config.flip_prob) for i in order[start : start + config.batch_size]]
            images = np.stack([s.image for s in batch]).astype(dtype)
            masks = np.stack([s.mask for s in batch])
            params = model.parameter_tensors(requires_grad=True)
            try:
                loss = generalized_dice_loss(model.forward(Tensor(images), params), masks, config.loss_eps)
            except NumericalError as exc:
                raise NumericalError(f"non-finite values at epoch {epoch}, batch {batch_index}: {exc}") from None
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericalError(f"NaN loss at epoch {epoch}, batch {batch_index}")
            nm.backward(loss)
            grads = {k: t.grad for k, t in params.items()}
            adamw_step(model.params, grads, opt, sched.lr, weight_decay=config.weight_decay)
            losses.append(value * len(batch))
            batch_index += 1
        metrics = evaluate(model, val_set, threads=threads)
        lr_used = sched.lr
        row = {
            "epoch": epoch,
            "train_loss": float(np.sum(losses) / len(train_set)),
            "val_iou": metrics.iou,
            "val_f1": metrics.f1,
            "val_prec": metrics.precision,
            "val_rec": metrics.recall,
            "lr": lr_used,
        }
        history.append(row)
        if log_every and epoch % log_every == 0:
            logger.info("epoch %d loss %.4f val_iou %.4f lr %.2e", epoch, row["train_loss"], metrics.iou, lr_used)
        if metrics.iou > best_iou:
            best_iou, best_epoch, best_model = metrics.iou, epoch, model.copy()
        reduce_on_plateau(sched, metrics.iou)
    if config.float32:
        for m in (model, best_model):
            m.params = {k: v.astype(np.float64) for k, v in m.params.items()}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_history(history, os.path.join(out_dir, "history.csv"))
        save_checkpoint(best_model, os.path.join(out_dir, "best.ckpt"))
    return TrainResult(history, best_model, model, best_epoch, float(best_iou))
