"""Patch classifiers ("experts").

Any object with a ``classes`` tuple and a ``classify_pixels`` /
``classify(patch)`` method can act as an expert. Two are provided:

* :class:`FeatureExpert` - linear softmax over colour-histogram features,
  trained by mini-batch gradient descent.
* :class:`OracleExpert` - returns the one-hot of a known label per quad;
  used to test the pipeline plumbing.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .batch_gen import BatchGenerator
from .classes import TissueClass
from .errors import IoFailure, MissingClass, ParseError, ShapeMismatch, UntrainedExpert
from .pyramid import Patch, QuadKey

LOG_EPS = 1e-12


class Expert(Protocol):
    classes: tuple[str, ...]

    def classify(self, patch: Patch) -> np.ndarray: ...


# --------------------------------------------------------------------------
# features


def feature_dim(bins: int = 8) -> int:
    return 3 * bins + 6


def extract_features(patch: Patch | np.ndarray, bins: int = 8) -> np.ndarray:
    """Per-channel histogram fractions, then channel means and stds in [0, 1].

    Values are scaled to [0, 1] before the moments are taken; the std is
    doubled because its largest possible value on [0, 1] is 0.5.
    """
    pixels = patch.pixels if isinstance(patch, Patch) else np.asarray(patch)
    return extract_features_batch(pixels[None], bins)[0]


def extract_features_batch(pixels: np.ndarray, bins: int = 8) -> np.ndarray:
    """Features for a ``(n, h, w, 3)`` uint8 batch."""
    pixels = np.asarray(pixels)
    n = pixels.shape[0]
    flat = pixels.reshape(n, -1, 3)
    count = flat.shape[1]
    binned = flat.astype(np.int64) * bins // 256
    hist = np.empty((n, 3, bins))
    offsets = np.arange(n)[:, None] * bins
    for c in range(3):
        hist[:, c] = np.bincount((binned[:, :, c] + offsets).ravel(), minlength=n * bins).reshape(n, bins)
    hist /= count
    scaled = flat / 255.0
    mean = scaled.mean(axis=1)
    std = np.clip(2.0 * scaled.std(axis=1), 0.0, 1.0)
    return np.concatenate([hist.reshape(n, 3 * bins), mean, std], axis=1)


# --------------------------------------------------------------------------
# linear softmax


def softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, onehot: np.ndarray) -> float:
    return float(-np.mean(np.sum(onehot * np.log(np.maximum(probs, LOG_EPS)), axis=-1)))


def linear_softmax_loss_grad(
    weights: np.ndarray, bias: np.ndarray, x: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy of ``softmax(x W^T + b)`` and its gradients."""
    probs = softmax_rows(x @ weights.T + bias)
    loss = cross_entropy(probs, y)
    delta = (probs - y) / x.shape[0]
    return loss, delta.T @ x, delta.sum(axis=0)


@dataclass(frozen=True)
class ExpertHyper:
    learning_rate: float = 0.5
    batch_size: int = 32
    epochs: int = 20
    steps_per_epoch: int = 50
    seed: int = 0


@dataclass
class FeatureExpert:
    classes: tuple[str, ...]
    bins: int = 8
    weights: np.ndarray | None = field(default=None, repr=False)
    bias: np.ndarray | None = field(default=None, repr=False)
    hyper: ExpertHyper = ExpertHyper()
    loss_history: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        self.classes = tuple(self.classes)
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            self.bias = np.zeros(len(self.classes)) if self.bias is None else np.asarray(self.bias, dtype=np.float64)
            if self.weights.shape != (len(self.classes), feature_dim(self.bins)) or self.bias.shape != (len(self.classes),):
                raise ShapeMismatch(
                    f"weights {self.weights.shape} / bias {self.bias.shape} do not match "
                    f"{len(self.classes)} classes x {feature_dim(self.bins)} features"
                )

    @classmethod
    def zeros(cls, classes: Sequence[str], bins: int = 8, hyper: ExpertHyper = ExpertHyper()) -> "FeatureExpert":
        return cls(tuple(classes), bins, np.zeros((len(classes), feature_dim(bins))), np.zeros(len(classes)), hyper)

    @property
    def trained(self) -> bool:
        return self.weights is not None

    def classify_features(self, feats: np.ndarray) -> np.ndarray:
        if not self.trained:
            raise UntrainedExpert("expert has no weights")
        return softmax_rows(np.atleast_2d(feats) @ self.weights.T + self.bias)

    def classify_pixels(self, pixels: np.ndarray) -> np.ndarray:
        """Distributions for a ``(n, h, w, 3)`` batch."""
        return self.classify_features(extract_features_batch(pixels, self.bins))

    def classify(self, patch: Patch) -> np.ndarray:
        return self.classify_pixels(patch.pixels[None])[0]

    def classify_patches(self, patches: Sequence[Patch]) -> np.ndarray:
        return self.classify_pixels(np.stack([p.pixels for p in patches]))


def classify(expert: Expert, patch: Patch) -> np.ndarray:
    return expert.classify(patch)


@dataclass
class OracleExpert:
    """Returns the one-hot of the known label of ``patch.source_quad``."""

    classes: tuple[str, ...]
    labels: Mapping[QuadKey, TissueClass]
    label_map: Mapping[TissueClass, str] | None = None

    def classify(self, patch: Patch) -> np.ndarray:
        label = self.labels[patch.source_quad]
        token = self.label_map[label] if self.label_map is not None else label.token
        out = np.zeros(len(self.classes))
        if token in self.classes:
            out[self.classes.index(token)] = 1.0
        else:
            out[:] = 1.0 / len(self.classes)
        return out

    def classify_patches(self, patches: Sequence[Patch]) -> np.ndarray:
        return np.stack([self.classify(p) for p in patches])


# --------------------------------------------------------------------------
# training


def fit_linear_softmax(
    x: np.ndarray,
    y: np.ndarray,
    learning_rate: float,
    epochs: int,
    weights: np.ndarray | None = None,
    bias: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Full-batch gradient descent; returns weights, bias and per-epoch loss."""
    w = np.zeros((y.shape[1], x.shape[1])) if weights is None else weights.copy()
    b = np.zeros(y.shape[1]) if bias is None else bias.copy()
    losses = []
    for _ in range(epochs):
        loss, gw, gb = linear_softmax_loss_grad(w, b, x, y)
        losses.append(loss)
        w -= learning_rate * gw
        b -= learning_rate * gb
    return w, b, losses


def train_feature_expert(
    generator: BatchGenerator,
    hyper: ExpertHyper = ExpertHyper(),
    bins: int = 8,
    init: FeatureExpert | None = None,
) -> FeatureExpert:
    """Mini-batch gradient descent on mean cross-entropy.

    The expert's class order is the generator's. Per-epoch loss is the mean
    of the mini-batch losses seen in that epoch.
    """
    classes = tuple(generator.params.classes)
    if init is not None and tuple(init.classes) != classes:
        raise MissingClass(f"generator classes {classes} do not match expert classes {init.classes}")
    dim = feature_dim(bins)
    w = np.zeros((len(classes), dim)) if init is None else init.weights.copy()
    b = np.zeros(len(classes)) if init is None else init.bias.copy()
    history = []
    for _ in range(hyper.epochs):
        losses = []
        for _ in range(hyper.steps_per_epoch):
            batch = generator.next_batch()
            x = extract_features_batch(batch.pixels(), bins)
            loss, gw, gb = linear_softmax_loss_grad(w, b, x, batch.labels)
            losses.append(loss)
            if hyper.learning_rate:
                w -= hyper.learning_rate * gw
                b -= hyper.learning_rate * gb
        history.append(float(np.mean(losses)) if losses else float("nan"))
    return FeatureExpert(classes, bins, w, b, replace(hyper, batch_size=generator.params.batch_size), history)


# --------------------------------------------------------------------------
# checkpoints

_MAGIC = "wsifuse-expert 1"


def save_expert(expert: FeatureExpert, path: str | Path) -> None:
    if not expert.trained:
        raise UntrainedExpert("cannot save an untrained expert")
    h = expert.hyper
    lines = [
        _MAGIC,
        "classes " + ",".join(expert.classes),
        f"bins {expert.bins}",
        f"hyper {h.learning_rate!r} {h.batch_size} {h.epochs} {h.steps_per_epoch} {h.seed}",
        "bias " + " ".join(repr(float(v)) for v in expert.bias),
    ]
    for row in expert.weights:
        lines.append("row " + " ".join(repr(float(v)) for v in row))
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc


def load_expert(path: str | Path) -> FeatureExpert:
    try:
        lines = Path(path).read_text(encoding="ascii").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    if not lines or lines[0] != _MAGIC:
        raise ParseError(f"{path}: not an expert checkpoint")
    try:
        fields = {}
        rows = []
        for line in lines[1:]:
            key, _, rest = line.partition(" ")
            if key == "row":
                rows.append([float(v) for v in rest.split()])
            else:
                fields[key] = rest
        classes = tuple(fields["classes"].split(","))
        bins = int(fields["bins"])
        lr, bs, ep, spe, seed = fields["hyper"].split()
        hyper = ExpertHyper(float(lr), int(bs), int(ep), int(spe), int(seed))
        bias = np.array([float(v) for v in fields["bias"].split()])
    except (KeyError, ValueError) as exc:
        raise ParseError(f"{path}: malformed checkpoint") from exc
    return FeatureExpert(classes, bins, np.array(rows), bias, hyper)
