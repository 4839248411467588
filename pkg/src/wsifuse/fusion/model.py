"""The level-weight network.

One independent branch per magnification level. Each branch is a stack of
stride-2 ``k x k`` convolutions with ReLU, global average pooling and an
affine map to one scalar ``s_l``; the level weights are ``softmax(s)``.
The weights fuse the multi-class expert's per-level predictions (see
:mod:`wsifuse.fusion.ops`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import IoFailure, ParseError, ShapeMismatch
from ..pyramid import PatchStack
from . import layers
from .ops import fusion_loss, fusion_loss_backward, softmax, softmax_backward, weighted_fuse, weighted_fuse_backward


@dataclass(frozen=True)
class BranchSpec:
    widths: tuple[int, ...] = (8, 16, 32, 64)
    kernel: int = 3
    input_size: int = 64
    in_channels: int = 3

    def validate(self) -> None:
        size = self.input_size
        for _ in self.widths:
            size = layers.conv_output_size(size, self.kernel)
            if size < 1:
                raise ShapeMismatch(f"input {self.input_size} too small for {len(self.widths)} stride-2 convs")


@dataclass
class WeightModel:
    """``params[l]`` is the flat list ``[W1, b1, ..., Wk, bk, a, c]`` of branch ``l``."""

    spec: BranchSpec
    params: list[list[np.ndarray]] = field(repr=False)
    seed: int = 0

    @property
    def levels(self) -> int:
        return len(self.params)

    @classmethod
    def init(cls, levels: int = 6, spec: BranchSpec = BranchSpec(), seed: int = 0, init_scale: float = 0.05) -> "WeightModel":
        """Conv kernels ~ U(-init_scale, init_scale); biases and heads zero.

        Zero heads make every branch output 0, so an untrained model fuses
        by plain averaging.
        """
        spec.validate()
        rng = np.random.default_rng(seed)
        params = []
        for _ in range(levels):
            branch = []
            c_in = spec.in_channels
            for width in spec.widths:
                branch.append(rng.uniform(-init_scale, init_scale, size=(width, c_in, spec.kernel, spec.kernel)))
                branch.append(np.zeros(width))
                c_in = width
            branch.append(np.zeros(c_in))
            branch.append(np.zeros(1))
            params.append(branch)
        return cls(spec, params, seed)

    def copy(self) -> "WeightModel":
        return WeightModel(self.spec, [[p.copy() for p in b] for b in self.params], self.seed)

    # ---------------------------------------------------------------- forward

    def branch_forward(self, l: int, x: np.ndarray) -> tuple[np.ndarray, list]:
        branch = self.params[l]
        n_conv = len(self.spec.widths)
        cache = []
        h = x
        for i in range(n_conv):
            z, cols = layers.conv_forward(h, branch[2 * i], branch[2 * i + 1])
            cache.append((h.shape, cols, z))
            h = layers.relu_forward(z)
        feat = layers.gap_forward(h)
        s = layers.affine_forward(feat, branch[-2], branch[-1])
        cache.append((h.shape, feat))
        return s, cache

    def branch_backward(self, l: int, ds: np.ndarray, cache: list) -> list[np.ndarray]:
        branch = self.params[l]
        n_conv = len(self.spec.widths)
        h_shape, feat = cache[-1]
        dfeat, da, dc = layers.affine_backward(ds, feat, branch[-2])
        dh = layers.gap_backward(dfeat, h_shape)
        grads: list[np.ndarray] = [None] * len(branch)  # type: ignore[list-item]
        grads[-2], grads[-1] = da, dc
        for i in reversed(range(n_conv)):
            x_shape, cols, z = cache[i]
            dz = layers.relu_backward(dh, z)
            dh, grads[2 * i], grads[2 * i + 1] = layers.conv_backward(dz, cols, x_shape, branch[2 * i])
        return grads

    def scores(self, inputs: np.ndarray) -> np.ndarray:
        """Branch scalars for ``inputs`` of shape ``(batch, levels, C, H, W)``."""
        self._check_inputs(inputs)
        return np.stack([self.branch_forward(l, inputs[:, l])[0] for l in range(self.levels)], axis=1)

    def weights(self, inputs: np.ndarray) -> np.ndarray:
        return softmax(self.scores(inputs))

    def predict(self, stack: PatchStack) -> np.ndarray:
        return self.weights(prepare_stack(stack, self.spec.input_size)[None])[0]

    def _check_inputs(self, inputs: np.ndarray) -> None:
        s = self.spec
        expect = (self.levels, s.in_channels, s.input_size, s.input_size)
        if inputs.ndim != 5 or inputs.shape[1:] != expect:
            raise ShapeMismatch(f"inputs {inputs.shape[1:]} != expected {expect}")

    # --------------------------------------------------------------- backward

    def loss_and_grads(
        self, inputs: np.ndarray, P: np.ndarray, gt: np.ndarray
    ) -> tuple[float, list[list[np.ndarray]], dict]:
        """Mean fusion loss over the batch and its exact parameter gradients."""
        self._check_inputs(inputs)
        b = inputs.shape[0]
        if P.shape[:2] != (b, self.levels) or gt.shape != (b, P.shape[2]):
            raise ShapeMismatch(f"P {P.shape} / gt {gt.shape} do not match {b} samples x {self.levels} levels")
        outs = [self.branch_forward(l, inputs[:, l]) for l in range(self.levels)]
        s = np.stack([o[0] for o in outs], axis=1)
        w = softmax(s)
        fused = weighted_fuse(w, P)
        losses = fusion_loss(fused.w_softmax, gt)
        d_soft = fusion_loss_backward(fused.w_softmax, gt) / b
        d_sum = softmax_backward(fused.w_softmax, d_soft)
        d_w, _ = weighted_fuse_backward(w, P, d_sum)
        d_s = softmax_backward(w, d_w)
        grads = [self.branch_backward(l, d_s[:, l], outs[l][1]) for l in range(self.levels)]
        info = {"weights": w, "w_sum": fused.w_sum, "w_softmax": fused.w_softmax, "d_scores": d_s}
        return float(np.mean(losses)), grads, info


# --------------------------------------------------------------------------
# inputs


def prepare_pixels(pixels: np.ndarray, size: int) -> np.ndarray:
    """``(n, t, t, 3)`` uint8 patches -> ``(n, 3, size, size)`` floats in [0, 1].

    Box-averages when ``t`` is a multiple of ``size``, otherwise nearest
    neighbour.
    """
    pixels = np.asarray(pixels)
    n, h, w, _ = pixels.shape
    x = pixels.astype(np.float64) / 255.0
    if h == size and w == size:
        pass
    elif h % size == 0 and w % size == 0:
        fy, fx = h // size, w // size
        x = x.reshape(n, size, fy, size, fx, 3).mean(axis=(2, 4))
    else:
        rows = np.minimum((np.arange(size) + 0.5) * h / size, h - 1).astype(np.int64)
        cols = np.minimum((np.arange(size) + 0.5) * w / size, w - 1).astype(np.int64)
        x = x[:, rows][:, :, cols]
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def prepare_stack(stack: PatchStack, size: int) -> np.ndarray:
    """``(levels, 3, size, size)`` network input for one context stack."""
    return prepare_pixels(np.stack([p.pixels for p in stack.patches]), size)


def prepare_stacks(stacks: Sequence[PatchStack], size: int) -> np.ndarray:
    return np.stack([prepare_stack(s, size) for s in stacks])


# --------------------------------------------------------------------------
# public operations


@dataclass(frozen=True)
class FixedWeights:
    """A weigher that ignores its input and returns a constant weight vector."""

    w: tuple[float, ...]

    @property
    def levels(self) -> int:
        return len(self.w)

    def predict(self, stack: PatchStack) -> np.ndarray:
        if len(stack) != len(self.w):
            raise ShapeMismatch(f"stack of {len(stack)} levels for {len(self.w)} weights")
        return np.asarray(self.w, dtype=np.float64)

    @classmethod
    def one_hot(cls, levels: int, k: int) -> "FixedWeights":
        w = [0.0] * levels
        w[k] = 1.0
        return cls(tuple(w))


def predict_weights(model: WeightModel | FixedWeights, stack: PatchStack) -> np.ndarray:
    if len(stack) != model.levels:
        raise ShapeMismatch(f"stack of {len(stack)} patches for a {model.levels}-level model")
    return model.predict(stack)


def loss_gradient(model: WeightModel, stack: PatchStack | np.ndarray, P: np.ndarray, gt: np.ndarray) -> list[list[np.ndarray]]:
    """Gradients of the single-sample fusion loss w.r.t. every branch parameter."""
    x = prepare_stack(stack, model.spec.input_size) if isinstance(stack, PatchStack) else np.asarray(stack, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if x.shape[0] != model.levels or P.shape[0] != model.levels:
        raise ShapeMismatch(f"stack/P levels {x.shape[0]}/{P.shape[0]} vs model {model.levels}")
    _, grads, _ = model.loss_and_grads(x[None], P[None], gt[None])
    return grads


def sample_loss(model: WeightModel, x: np.ndarray, P: np.ndarray, gt: np.ndarray) -> float:
    """Forward-only fusion loss of one prepared sample (used by gradient checks)."""
    w = model.weights(np.asarray(x, dtype=np.float64)[None])[0]
    return fusion_loss(weighted_fuse(w, P).w_softmax, gt)


# --------------------------------------------------------------------------
# checkpoints

_MAGIC = "wsifuse-weigher 1"


def save_weight_model(model: WeightModel, path: str | Path) -> None:
    s = model.spec
    lines = [
        _MAGIC,
        f"levels {model.levels}",
        "widths " + ",".join(map(str, s.widths)),
        f"kernel {s.kernel}",
        f"input_size {s.input_size}",
        f"in_channels {s.in_channels}",
        f"seed {model.seed}",
    ]
    for l, branch in enumerate(model.params):
        for i, p in enumerate(branch):
            lines.append(f"param {l} {i} " + ",".join(map(str, p.shape)))
            lines.append(" ".join(repr(float(v)) for v in p.ravel()))
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc


def load_weight_model(path: str | Path) -> WeightModel:
    try:
        lines = Path(path).read_text(encoding="ascii").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    if not lines or lines[0] != _MAGIC:
        raise ParseError(f"{path}: not a weight-model checkpoint")
    try:
        head = dict(line.split(" ", 1) for line in lines[1:7])
        levels = int(head["levels"])
        spec = BranchSpec(
            tuple(int(v) for v in head["widths"].split(",") if v),
            int(head["kernel"]),
            int(head["input_size"]),
            int(head["in_channels"]),
        )
        seed = int(head["seed"])
        params: list[list[np.ndarray]] = [[] for _ in range(levels)]
        body = lines[7:]
        for j in range(0, len(body), 2):
            _, l, i, shape = body[j].split(" ")
            dims = tuple(int(v) for v in shape.split(",") if v)
            values = np.array([float(v) for v in body[j + 1].split()]) if body[j + 1] else np.array([])
            if int(i) != len(params[int(l)]):
                raise ValueError("parameters out of order")
            params[int(l)].append(values.reshape(dims))
    except (KeyError, ValueError, IndexError) as exc:
        raise ParseError(f"{path}: malformed checkpoint") from exc
    return WeightModel(spec, params, seed)
