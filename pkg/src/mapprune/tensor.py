"""Dense float64 layer kernels with explicit forward/backward pairs.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in row-major
(C) order; image batches use the ``(N, C, H, W)`` layout. Every backward
function takes the cached forward input explicitly, so callers own caches.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, UsageError

DTYPE = np.float64


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


@dataclass
class Parameter:
    """A trainable tensor with its gradient and SGD momentum buffer."""

    value: np.ndarray
    gradient: np.ndarray = field(default=None)
    momentum_buffer: np.ndarray = field(default=None)

    def __post_init__(self):
        self.value = as_tensor(self.value)
        if self.gradient is None:
            self.gradient = np.zeros_like(self.value)
        if self.momentum_buffer is None:
            self.momentum_buffer = np.zeros_like(self.value)
        if not (self.value.shape == self.gradient.shape == self.momentum_buffer.shape):
            raise ShapeError(
                f"parameter shapes differ: value {self.value.shape}, "
                f"gradient {self.gradient.shape}, momentum {self.momentum_buffer.shape}"
            )

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self):
        self.gradient.fill(0.0)

    def copy(self) -> "Parameter":
        return Parameter(self.value.copy(), self.gradient.copy(), self.momentum_buffer.copy())


# ---------------------------------------------------------------------------
# convolution


def _im2col(x, k, padding):
    """Columns ``(N, C*K*K, H'*W')`` of every KxK window, built from K^2 slice copies."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, c, h, w = x.shape
    ho, wo = h - k + 1, w - k + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {k}x{k} larger than padded input {(h, w)}")
    cols = np.empty((n, c, k, k, ho, wo), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = x[:, :, i:i + ho, j:j + wo]
    return cols.reshape(n, c * k * k, ho * wo), (ho, wo)


def _correlate(x, w, padding):
    """Stride-1 cross-correlation with symmetric zero padding, no bias."""
    cols, (ho, wo) = _im2col(x, w.shape[2], padding)
    out = np.matmul(w.reshape(w.shape[0], -1), cols)
    return out.reshape(x.shape[0], w.shape[0], ho, wo)


def _check_conv(x, weights, bias, padding):
    if x.ndim != 4 or weights.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weights, got {x.shape} and {weights.shape}")
    c_out, c_in, kh, kw = weights.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"input has {x.shape[1]} channels but weights expect {c_in}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {kh}x{kw}")
    if padding not in (0, (kh - 1) // 2):
        raise ShapeError(f"padding must be 0 or {(kh - 1) // 2} for a {kh}x{kh} kernel")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} does not match {c_out} output channels")


def conv2d_forward(x, weights, bias, padding: int = 0) -> np.ndarray:
    """Stride-1 2-d convolution (cross-correlation) of an ``(N, C_in, H, W)`` batch.

    ``output[n, k, y, x] = bias[k] + sum_{c,i,j} input[n, c, y+i-p, x+j-p] * weights[k, c, i, j]``
    with out-of-range input read as zero.
    """
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    _check_conv(x, weights, bias, padding)
    out = _correlate(x, weights, padding)
    out += bias[None, :, None, None]
    return out


def conv2d_backward(grad_out, x, weights, padding: int = 0, input_grad: bool = True):
    """Gradients of a scalar loss through :func:`conv2d_forward`.

    Returns ``(grad_input, grad_weights, grad_bias)``; ``grad_input`` is None
    when ``input_grad`` is false.
    """
    if x is None:
        raise UsageError("conv2d_backward called without a cached forward input")
    grad_out = as_tensor(grad_out)
    k = weights.shape[2]
    h_out = x.shape[2] + 2 * padding - k + 1
    w_out = x.shape[3] + 2 * padding - k + 1
    expected = (x.shape[0], weights.shape[0], h_out, w_out)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward output {expected}")

    grad_bias = grad_out.sum(axis=(0, 2, 3))
    cols, _ = _im2col(x, k, padding)
    g = grad_out.reshape(grad_out.shape[0], grad_out.shape[1], -1)
    grad_weights = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(weights.shape)
    if not input_grad:
        return None, grad_weights, grad_bias
    # full correlation with the spatially flipped, channel-transposed kernel
    flipped = np.ascontiguousarray(weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    grad_input = _correlate(grad_out, flipped, k - 1 - padding)
    return grad_input, grad_weights, grad_bias


# ---------------------------------------------------------------------------
# pointwise / pooling / dense


def relu_forward(x) -> np.ndarray:
    x = as_tensor(x)
    return np.maximum(x, 0.0)


def relu_backward(grad_out, x) -> np.ndarray:
    """Subgradient at exactly zero is taken as 0."""
    if x is None:
        raise UsageError("relu_backward called without a cached forward input")
    return np.where(x > 0.0, grad_out, 0.0)


def maxpool2x2_forward(x):
    """2x2 max pooling with stride 2.

    Returns ``(y, argmax)`` where ``argmax`` holds the row-major position
    (0..3) of the selected element inside each window; ties pick the first.
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, idx


def maxpool2x2_backward(grad_out, argmax) -> np.ndarray:
    if argmax is None:
        raise UsageError("maxpool2x2_backward called without cached argmax indices")
    n, c, h2, w2 = argmax.shape
    win = np.zeros((n, c, h2, w2, 4), dtype=DTYPE)
    np.put_along_axis(win, argmax[..., None], np.asarray(grad_out, dtype=DTYPE)[..., None], axis=-1)
    return np.ascontiguousarray(
        win.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    )


def dense_forward(x, weights, bias) -> np.ndarray:
    """``y = x @ weights.T + bias`` for ``x`` of shape ``(N, I)`` and weights ``(O, I)``."""
    x, weights = as_tensor(x), as_tensor(weights)
    if x.ndim != 2 or x.shape[1] != weights.shape[1]:
        raise ShapeError(f"dense input {x.shape} incompatible with weights {weights.shape}")
    return x @ weights.T + bias


def dense_backward(grad_out, x, weights):
    if x is None:
        raise UsageError("dense_backward called without a cached forward input")
    return grad_out @ weights, grad_out.T @ x, grad_out.sum(axis=0)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    Returns ``(loss, grad_logits)``; the gradient is that of the batch mean.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ShapeError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    per_example = -log_p[np.arange(n), labels]
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return float(per_example.mean()), grad


def per_example_cross_entropy(logits, labels) -> np.ndarray:
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    return log_z - shifted[np.arange(len(labels)), labels]


def sgd_step(params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
    """One heavy-ball SGD step, in place, followed by zeroing the gradients.

    ``buf <- momentum * buf + grad + weight_decay * value``;
    ``value <- value - lr * buf``.
    """
    for p in params:
        buf = p.momentum_buffer
        buf *= momentum
        buf += p.gradient
        if weight_decay:
            buf += weight_decay * p.value
        p.value -= lr * buf
        p.zero_grad()
