"""Central finite-difference checks for the fusion operators and model."""

from __future__ import annotations

import numpy as np

from wsifuse.fusion import layers
from wsifuse.fusion.model import BranchSpec, WeightModel
from wsifuse.fusion.ops import (
    fusion_loss,
    fusion_loss_backward,
    softmax,
    softmax_backward,
    weighted_fuse,
    weighted_fuse_backward,
)

STEP = 1e-5
REL_TOL = 1e-4
ABS_FLOOR = 1e-8


def numeric_grad(f, arr: np.ndarray) -> np.ndarray:
    grad = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + STEP
        up = f()
        arr[idx] = old - STEP
        down = f()
        arr[idx] = old
        grad[idx] = (up - down) / (2 * STEP)
    return grad


def worst_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest relative error over entries whose absolute error exceeds the floor."""
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.where(diff <= ABS_FLOOR, 0.0, diff / np.maximum(scale, 1e-300))
    return float(rel.max()) if rel.size else 0.0


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def check_conv(rng) -> float:
    b, c, o, k = (int(v) for v in rng.integers(1, 4, 4))
    k = 3
    h, w = (int(v) for v in rng.integers(3, 10, 2))
    x, W, bias = rng.normal(size=(b, c, h, w)), rng.normal(size=(o, c, k, k)), rng.normal(size=o)
    out, cols = layers.conv_forward(x, W, bias)
    r = rng.normal(size=out.shape)
    dx, dW, db = layers.conv_backward(r, cols, x.shape, W)

    def f():
        return float(np.sum(layers.conv_forward(x, W, bias)[0] * r))

    return max(worst_error(dx, numeric_grad(f, x)), worst_error(dW, numeric_grad(f, W)), worst_error(db, numeric_grad(f, bias)))


def check_relu(rng) -> float:
    x = _away_from_zero(rng, (2, 3, 4, 4))
    r = rng.normal(size=x.shape)
    return worst_error(layers.relu_backward(r, x), numeric_grad(lambda: float(np.sum(layers.relu_forward(x) * r)), x))


def check_gap(rng) -> float:
    x = rng.normal(size=(2, int(rng.integers(1, 5)), int(rng.integers(1, 6)), int(rng.integers(1, 6))))
    r = rng.normal(size=x.shape[:2])
    return worst_error(layers.gap_backward(r, x.shape), numeric_grad(lambda: float(np.sum(layers.gap_forward(x) * r)), x))


def check_affine(rng) -> float:
    n, d = int(rng.integers(1, 5)), int(rng.integers(1, 8))
    feat, a, c = rng.normal(size=(n, d)), rng.normal(size=d), rng.normal(size=1)
    r = rng.normal(size=n)
    dfeat, da, dc = layers.affine_backward(r, feat, a)

    def f():
        return float(np.sum(layers.affine_forward(feat, a, c) * r))

    return max(worst_error(dfeat, numeric_grad(f, feat)), worst_error(da, numeric_grad(f, a)), worst_error(dc, numeric_grad(f, c)))


def check_softmax(rng) -> float:
    z = rng.normal(size=(3, int(rng.integers(2, 7))))
    r = rng.normal(size=z.shape)
    return worst_error(softmax_backward(softmax(z), r), numeric_grad(lambda: float(np.sum(softmax(z) * r)), z))


def check_fuse(rng) -> float:
    L, N = int(rng.integers(2, 7)), int(rng.integers(2, 5))
    w = softmax(rng.normal(size=L))
    P = softmax(rng.normal(size=(L, N)))
    r = rng.normal(size=N)
    dw, dP = weighted_fuse_backward(w, P, r)

    def f():
        return float(np.sum(weighted_fuse(w, P).w_sum * r))

    return max(worst_error(dw, numeric_grad(f, w)), worst_error(dP, numeric_grad(f, P)))


def check_cross_entropy(rng) -> float:
    n = int(rng.integers(2, 5))
    y = softmax(rng.normal(size=n))
    gt = np.eye(n)[int(rng.integers(n))]
    return worst_error(fusion_loss_backward(y, gt), numeric_grad(lambda: fusion_loss(y, gt), y))


def random_model(rng, seed: int) -> tuple[WeightModel, np.ndarray, np.ndarray, np.ndarray]:
    """A small random model with random (non-zero) heads plus a batch of inputs."""
    n_conv = int(rng.integers(1, 3))
    size = int(rng.integers(4, 10)) if n_conv == 1 else int(rng.integers(7, 12))
    widths = tuple(int(v) for v in rng.integers(1, 4, n_conv))
    spec = BranchSpec(widths=widths, kernel=3, input_size=size, in_channels=int(rng.integers(1, 4)))
    levels = int(rng.integers(2, 5))
    model = WeightModel.init(levels, spec, seed, init_scale=0.5)
    for branch in model.params:
        for p in branch:
            p += rng.normal(scale=0.3, size=p.shape)
    batch, classes = int(rng.integers(1, 4)), int(rng.integers(2, 5))
    x = rng.normal(size=(batch, levels, spec.in_channels, size, size))
    P = softmax(rng.normal(size=(batch, levels, classes)))
    gt = np.eye(classes)[rng.integers(0, classes, batch)]
    return model, x, P, gt


def check_model(rng, seed: int, kinds=("conv", "affine")) -> float:
    """Every parameter gradient of a random model vs central differences."""
    model, x, P, gt = random_model(rng, seed)
    _, grads, _ = model.loss_and_grads(x, P, gt)
    n_conv = len(model.spec.widths)
    worst = 0.0
    for l, branch in enumerate(model.params):
        for i, p in enumerate(branch):
            kind = "conv" if i < 2 * n_conv else "affine"
            if kind not in kinds:
                continue
            num = numeric_grad(lambda: model.loss_and_grads(x, P, gt)[0], p)
            worst = max(worst, worst_error(grads[l][i], num))
    return worst


LAYER_CHECKS = {
    "conv": check_conv,
    "relu": check_relu,
    "gap": check_gap,
    "affine": check_affine,
    "softmax": check_softmax,
    "fuse": check_fuse,
    "cross_entropy": check_cross_entropy,
}
