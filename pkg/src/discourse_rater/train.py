"""Optimization loop: AdamW, plateau halving, early stopping, padded batches.

One training run is single-threaded and fully determined by its seed: the
per-epoch shuffle, dropout masks, and parameter init all flow from it.  The
run monitors the total multi-task validation loss, halves the learning rate
after five epochs without improvement, stops after fifteen, and restores the
best parameters before returning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import Example, SegmentFeatures
from .errors import NumericsError, TrainingError, UsageError
from .model import FusionModel, forward
from .objective import (RATINGS, class_weights, l1_loss, multitask_total,
                        oll_loss, rating_to_index, round_to_rating,
                        weighted_ce_loss)
from .tensor import Tensor


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    max_epochs: int = 200
    plateau_patience: int = 5
    early_stop_patience: int = 15
    val_fraction: float = 0.2
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float | None = None
    seed: int = 0


class AdamW:
    """Adam with decoupled weight decay applied separately from the update."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4,
                 weight_decay: float = 0.01, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NumericsError(f"non-finite gradient for parameter {name!r}")
            m = self._m[name] = self.beta1 * self._m[name] + (1.0 - self.beta1) * g
            v = self._v[name] = self.beta2 * self._v[name] + (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - self.lr * self.weight_decay * p.data - self.lr * update


class PlateauScheduler:
    """Halve the learning rate after ``patience`` epochs without improvement.

    The patience counter resets both on improvement (strict decrease of the
    best seen loss) and on each halving.
    """

    def __init__(self, optimizer: AdamW, patience: int = 5, factor: float = 0.5):
        self.optimizer = optimizer
        self.patience = patience
        self.factor = factor
        self.best = math.inf
        self.stale = 0

    def update(self, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best = val_loss
            self.stale = 0
            return False
        self.stale += 1
        if self.stale >= self.patience:
            self.optimizer.lr *= self.factor
            self.stale = 0
            return True
        return False


class EarlyStopper:
    """Signal a stop after ``patience`` consecutive epochs without improvement."""

    def __init__(self, patience: int = 15):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, val_loss: float, epoch: int) -> bool:
        """Returns True when this epoch improved the best loss."""
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.stale = 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


@dataclass
class TrainHistory:
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    best_val_loss: float = math.inf

    def table(self) -> str:
        lines = [f"{'epoch':>5s}  {'train_loss':>12s}  {'val_loss':>12s}  {'lr':>10s}"]
        for i, (tr, va, lr) in enumerate(zip(self.train_losses, self.val_losses, self.lrs), 1):
            lines.append(f"{i:>5d}  {tr:>12.6f}  {va:>12.6f}  {lr:>10.2e}")
        lines.append(f"stopped at epoch {self.stopped_epoch}; "
                     f"best epoch {self.best_epoch} (val loss {self.best_val_loss:.6f})")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "train_losses": self.train_losses,
            "val_losses": self.val_losses,
            "lrs": self.lrs,
            "stopped_epoch": self.stopped_epoch,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
        }


# -- batching -----------------------------------------------------------------


def pad_example(example: Example, lengths: Mapping[str, int]) -> tuple[SegmentFeatures, dict[str, np.ndarray]]:
    """Zero-pad each modality to the requested length; masks mark real rows."""
    feats = example.features
    padded = {}
    masks = {}
    for modality in ("text", "audio", "video"):
        arr = feats.modality(modality)
        target = lengths.get(modality, arr.shape[0])
        if target < arr.shape[0]:
            raise UsageError(f"cannot pad {modality} below its length")
        pad_rows = target - arr.shape[0]
        if pad_rows and arr.shape[0] > 0:
            arr = np.concatenate([arr, np.zeros((pad_rows, arr.shape[1]), dtype=arr.dtype)])
        padded[modality] = arr
        masks[modality] = np.arange(arr.shape[0]) < (target - pad_rows) \
            if arr.shape[0] else np.ones(0, dtype=bool)
    seg = SegmentFeatures(segment_id=feats.segment_id, teacher_id=feats.teacher_id,
                          lesson_id=feats.lesson_id, text=padded["text"],
                          audio=padded["audio"], video=padded["video"],
                          duration_s=feats.duration_s)
    return seg, masks


def collate_batch(examples: Sequence[Example]) -> list[tuple[SegmentFeatures, dict[str, np.ndarray], dict[str, float]]]:
    """Pad every modality to the batch maximum and attach validity masks."""
    lengths = {
        modality: max(ex.features.modality(modality).shape[0] for ex in examples)
        for modality in ("text", "audio", "video")
    }
    out = []
    for ex in examples:
        seg, masks = pad_example(ex, lengths)
        out.append((seg, masks, ex.labels))
    return out


# -- loss assembly ---------------------------------------------------------------


def batch_loss(model: FusionModel, batch, weights: Mapping[str, np.ndarray] | None,
               training: bool, rng: np.random.Generator | None) -> Tensor:
    """Total multi-task loss for one padded batch (averaged over samples)."""
    config = model.config
    rows: dict[str, list[Tensor]] = {c: [] for c in config.head_components}
    labels: dict[str, list[float]] = {c: [] for c in config.head_components}
    for seg, masks, seg_labels in batch:
        outputs = forward(model, seg, training=training, rng=rng, masks=masks)
        for component, out in outputs.items():
            rows[component].append(out.reshape((1, out.shape[0])))
            labels[component].append(seg_labels[component])
    losses: dict[str, Tensor] = {}
    for component in config.head_components:
        stacked = T.concat(rows[component], axis=0)
        w = None if weights is None else weights.get(component)
        if config.loss == "oll":
            indices = [rating_to_index(r) for r in labels[component]]
            losses[component] = oll_loss(stacked, indices, w)
        elif config.loss == "ce":
            indices = [rating_to_index(r) for r in labels[component]]
            losses[component] = weighted_ce_loss(stacked, indices, w)
        else:
            preds = stacked.reshape((stacked.shape[0],))
            losses[component] = l1_loss(preds, labels[component], w)
    return multitask_total(losses)


def evaluation_loss(model: FusionModel, examples: Sequence[Example],
                    weights: Mapping[str, np.ndarray] | None) -> float:
    with T.no_grad():
        batch = [(ex.features, None, ex.labels) for ex in examples]
        return float(batch_loss(model, batch, weights, training=False, rng=None).data)


def _check_teacher_disjoint(train_examples: Sequence[Example],
                            val_examples: Sequence[Example]) -> None:
    train_teachers = {ex.features.teacher_id for ex in train_examples}
    val_teachers = {ex.features.teacher_id for ex in val_examples}
    overlap = train_teachers & val_teachers
    if overlap:
        raise UsageError(f"train/val teacher overlap: {sorted(overlap)}")


def component_weights(examples: Sequence[Example],
                      components: Sequence[str]) -> dict[str, np.ndarray]:
    return {
        c: class_weights([ex.labels[c] for ex in examples]) for c in components
    }


def train(model: FusionModel, train_examples: Sequence[Example],
          val_examples: Sequence[Example], config: TrainConfig,
          weights: Mapping[str, np.ndarray] | None = None) -> TrainHistory:
    """Optimize ``model`` in place and return the epoch history.

    Class weights default to inverse frequencies of the training labels.
    The best-validation parameters are restored before returning.
    """
    if not train_examples or not val_examples:
        raise UsageError("train and validation sets must both be nonempty")
    _check_teacher_disjoint(train_examples, val_examples)
    if weights is None:
        weights = component_weights(train_examples, model.config.head_components)

    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    optimizer = AdamW(params, lr=config.lr, weight_decay=config.weight_decay,
                      betas=config.betas, eps=config.eps)
    scheduler = PlateauScheduler(optimizer, patience=config.plateau_patience)
    stopper = EarlyStopper(patience=config.early_stop_patience)
    history = TrainHistory()
    best_state: dict[str, np.ndarray] | None = None

    n = len(train_examples)
    try:
        for epoch in range(1, config.max_epochs + 1):
            order = rng.permutation(n)
            epoch_losses = []
            for start in range(0, n, config.batch_size):
                chunk = [train_examples[i] for i in order[start:start + config.batch_size]]
                batch = collate_batch(chunk)
                optimizer.zero_grad()
                loss = batch_loss(model, batch, weights, training=True, rng=rng)
                loss.backward()
                if config.grad_clip is not None:
                    _clip_gradients(params, config.grad_clip)
                optimizer.step()
                epoch_losses.append(float(loss.data))
            train_loss = float(np.mean(epoch_losses))
            val_loss = evaluation_loss(model, val_examples, weights)

            history.train_losses.append(train_loss)
            history.val_losses.append(val_loss)
            history.lrs.append(optimizer.lr)
            history.stopped_epoch = epoch

            if stopper.update(val_loss, epoch):
                best_state = {name: p.data.copy() for name, p in params.items()}
            scheduler.update(val_loss)
            if stopper.should_stop:
                break
    except NumericsError as exc:
        raise TrainingError(f"aborted at epoch {len(history.train_losses) + 1}: {exc}") from exc

    if best_state is not None:
        for name, p in params.items():
            p.data = best_state[name]
    history.best_epoch = stopper.best_epoch
    history.best_val_loss = stopper.best
    return history


def _clip_gradients(params: Mapping[str, Tensor], max_norm: float) -> None:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale


def predict(model: FusionModel, examples: Sequence[Example]) -> dict[str, dict[str, float]]:
    """Per-segment predicted ratings (argmax for classification, rounded for regression)."""
    out: dict[str, dict[str, float]] = {}
    with T.no_grad():
        for ex in examples:
            outputs = forward(model, ex.features, training=False)
            ratings = {}
            for component, value in outputs.items():
                if model.config.head_mode == "classify":
                    ratings[component] = RATINGS[int(np.argmax(value.data))]
                else:
                    ratings[component] = round_to_rating(float(value.data[0]))
            out[ex.features.segment_id] = ratings
    return out
