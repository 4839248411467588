"""Mini-batch training of the level-weight network."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import EmptyDataset, ShapeMismatch, ValidationError
from ..pyramid import PatchStack
from .model import BranchSpec, WeightModel, prepare_stack

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WeigherHyper:
    learning_rate: float = 1e-4
    batch_size: int = 128
    max_epochs: int = 100
    patience: int = 5
    val_fraction: float = 0.1
    seed: int = 0
    optimizer: str = "adam"  # or "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ValidationError("batch_size/patience must be >= 1 and max_epochs >= 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValidationError("val_fraction must lie in [0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainingRecord:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False


class _Adam:
    def __init__(self, params: list[list[np.ndarray]], hyper: WeigherHyper):
        self.h = hyper
        self.m = [[np.zeros_like(p) for p in b] for b in params]
        self.v = [[np.zeros_like(p) for p in b] for b in params]
        self.t = 0

    def step(self, params: list[list[np.ndarray]], grads: list[list[np.ndarray]]) -> None:
        h = self.h
        self.t += 1
        c1 = 1.0 - h.beta1**self.t
        c2 = 1.0 - h.beta2**self.t
        for pb, gb, mb, vb in zip(params, grads, self.m, self.v):
            for p, g, m, v in zip(pb, gb, mb, vb):
                m *= h.beta1
                m += (1.0 - h.beta1) * g
                v *= h.beta2
                v += (1.0 - h.beta2) * g * g
                p -= h.learning_rate * (m / c1) / (np.sqrt(v / c2) + h.eps)


def _sgd_step(params, grads, lr: float) -> None:
    for pb, gb in zip(params, grads):
        for p, g in zip(pb, gb):
            p -= lr * g


Sample = tuple[PatchStack | np.ndarray, np.ndarray, np.ndarray]


def train_weigher(
    dataset: Sequence[Sample],
    hyper: WeigherHyper = WeigherHyper(),
    spec: BranchSpec = BranchSpec(),
    init: WeightModel | None = None,
) -> tuple[WeightModel, TrainingRecord]:
    """Fit a :class:`WeightModel` on ``(stack, P, gt)`` triples.

    Stacks may be :class:`PatchStack` objects or already prepared
    ``(levels, C, H, W)`` arrays. A seeded ``val_fraction`` split drives
    early stopping; the parameters of the best validation epoch are
    returned (the last epoch when there is no validation split).
    """
    hyper.validate()
    if not dataset:
        raise EmptyDataset("train_weigher needs at least one sample")
    first_stack = dataset[0][0]
    levels = len(first_stack)
    model = init.copy() if init is not None else WeightModel.init(levels, spec, hyper.seed)
    size = model.spec.input_size

    x = np.empty((len(dataset), levels, model.spec.in_channels, size, size), dtype=np.float32)
    P = np.empty((len(dataset), levels, np.asarray(dataset[0][1]).shape[-1]))
    gt = np.empty((len(dataset), P.shape[2]))
    for i, (stack, p, g) in enumerate(dataset):
        xi = prepare_stack(stack, size) if isinstance(stack, PatchStack) else np.asarray(stack)
        p, g = np.asarray(p, dtype=np.float64), np.asarray(g, dtype=np.float64)
        if xi.shape != x.shape[1:] or p.shape != P.shape[1:] or g.shape != gt.shape[1:]:
            raise ShapeMismatch(f"sample {i} shapes {xi.shape}/{p.shape}/{g.shape} inconsistent with sample 0")
        x[i], P[i], gt[i] = xi, p, g

    rng = np.random.default_rng(hyper.seed)
    order = rng.permutation(len(dataset))
    n_val = int(round(hyper.val_fraction * len(dataset))) if len(dataset) > 1 else 0
    val_idx, train_idx = np.sort(order[:n_val]), order[n_val:]

    def batch_loss(idx: np.ndarray) -> float:
        total = 0.0
        for start in range(0, len(idx), hyper.batch_size):
            chunk = idx[start : start + hyper.batch_size]
            loss, _, _ = model.loss_and_grads(x[chunk].astype(np.float64), P[chunk], gt[chunk])
            total += loss * len(chunk)
        return total / len(idx)

    record = TrainingRecord()
    adam = _Adam(model.params, hyper) if hyper.optimizer == "adam" else None
    best_val, best_params, stale = np.inf, None, 0
    for epoch in range(hyper.max_epochs):
        perm = train_idx[rng.permutation(len(train_idx))]
        losses = []
        for start in range(0, len(perm), hyper.batch_size):
            chunk = np.sort(perm[start : start + hyper.batch_size])
            loss, grads, _ = model.loss_and_grads(x[chunk].astype(np.float64), P[chunk], gt[chunk])
            losses.append(loss * len(chunk))
            if hyper.learning_rate:
                if adam is not None:
                    adam.step(model.params, grads)
                else:
                    _sgd_step(model.params, grads, hyper.learning_rate)
        record.train_loss.append(float(np.sum(losses) / len(perm)))
        if n_val:
            val = batch_loss(val_idx)
            record.val_loss.append(val)
            log.debug("epoch %d train %.5f val %.5f", epoch, record.train_loss[-1], val)
            if val < best_val:
                best_val, stale, record.best_epoch = val, 0, epoch
                best_params = [[p.copy() for p in b] for b in model.params]
            else:
                stale += 1
                if stale >= hyper.patience:
                    record.stopped_early = True
                    break
        else:
            record.best_epoch = epoch
    if best_params is not None:
        model.params = best_params
    return model, record
