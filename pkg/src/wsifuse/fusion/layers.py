"""Forward and reverse-mode passes of the weight-network layers.

Tensors are ``(batch, channels, height, width)`` float64. Convolutions use
stride 2 and no padding, so an ``H``-pixel input gives ``(H - k) // 2 + 1``
outputs.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatch

STRIDE = 2


def conv_output_size(size: int, kernel: int) -> int:
    return (size - kernel) // STRIDE + 1


def _im2col(x: np.ndarray, k: int) -> tuple[np.ndarray, int, int]:
    b, c, h, w = x.shape
    ho, wo = conv_output_size(h, k), conv_output_size(w, k)
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"input {h}x{w} too small for kernel {k}")
    cols = np.empty((b, c, k, k, ho, wo))
    for p in range(k):
        for q in range(k):
            cols[:, :, p, q] = x[:, :, p : p + STRIDE * (ho - 1) + 1 : STRIDE, q : q + STRIDE * (wo - 1) + 1 : STRIDE]
    return cols.reshape(b, c * k * k, ho * wo), ho, wo


def conv_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns the output and the column buffer needed by the backward pass."""
    o, c, k, _ = weight.shape
    if x.shape[1] != c:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, kernel expects {c}")
    cols, ho, wo = _im2col(x, k)
    out = np.matmul(weight.reshape(o, -1), cols) + bias[None, :, None]
    return out.reshape(x.shape[0], o, ho, wo), cols


def conv_backward(
    dout: np.ndarray, cols: np.ndarray, x_shape: tuple[int, ...], weight: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients w.r.t. input, weight and bias."""
    b, o, ho, wo = dout.shape
    _, c, k, _ = weight.shape
    d2 = dout.reshape(b, o, ho * wo)
    dweight = np.tensordot(d2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
    dbias = d2.sum(axis=(0, 2))
    dcols = np.matmul(weight.reshape(o, -1).T, d2).reshape(b, c, k, k, ho, wo)
    dx = np.zeros(x_shape)
    for p in range(k):
        for q in range(k):
            dx[:, :, p : p + STRIDE * (ho - 1) + 1 : STRIDE, q : q + STRIDE * (wo - 1) + 1 : STRIDE] += dcols[:, :, p, q]
    return dx, dweight, dbias


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def gap_forward(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3))


def gap_backward(dout: np.ndarray, x_shape: tuple[int, ...]) -> np.ndarray:
    h, w = x_shape[2], x_shape[3]
    return np.broadcast_to(dout[:, :, None, None] / (h * w), x_shape).copy()


def affine_forward(feat: np.ndarray, a: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Scalar head: ``feat @ a + c`` per sample."""
    return feat @ a + c[0]


def affine_backward(dout: np.ndarray, feat: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return dout[:, None] * a[None, :], feat.T @ dout, np.array([dout.sum()])
