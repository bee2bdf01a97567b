"""Rank-4 tensor layer primitives with explicit forward and backward passes.

Tensors are plain numpy arrays laid out as (batch, channel, height, width) in
C order, so the flat buffer runs width-fastest. Every function here is pure and
preserves the floating dtype of its inputs: training runs in float32, gradient
checks run the same code in float64.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError

LOG_CLAMP = 1e-12


def as_tensor4(x, name="x"):
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (n, c, h, w), got shape {x.shape}")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float32)
    return x


@dataclass
class ConvParams:
    """Weights (out_c, in_c, kh, kw), bias (out_c,), stride and zero padding."""

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"weights must be rank 4, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match weights {self.weights.shape}")
        if self.stride < 1 or self.pad < 0:
            raise ValidationError(f"bad stride/pad {self.stride}/{self.pad}")

    @property
    def out_channels(self):
        return self.weights.shape[0]

    @property
    def in_channels(self):
        return self.weights.shape[1]

    @property
    def kernel(self):
        return self.weights.shape[2:]


@dataclass
class LayerGrad:
    input_grad: np.ndarray
    param_grads: dict = field(default_factory=dict)


def _conv_out_dims(x_shape, p):
    n, c, h, w = x_shape
    kh, kw = p.kernel
    if c != p.in_channels:
        raise ShapeError(
            f"input shape {x_shape} has {c} channels but weights {p.weights.shape} expect {p.in_channels}")
    span_h = h + 2 * p.pad - kh
    span_w = w + 2 * p.pad - kw
    if span_h < 0 or span_w < 0 or span_h % p.stride or span_w % p.stride:
        raise ShapeError(
            f"input shape {x_shape} and weights {p.weights.shape} (stride {p.stride}, pad {p.pad}) "
            "do not give integral output dims")
    return span_h // p.stride + 1, span_w // p.stride + 1


def _im2col(x, p, ho, wo):
    # cols[(c, i, j), (n, y, x)] = xpad[n, c, y*s + i, x*s + j]
    n, c = x.shape[:2]
    kh, kw = p.kernel
    s = p.stride
    xp = np.pad(x, ((0, 0), (0, 0), (p.pad, p.pad), (p.pad, p.pad))) if p.pad else x
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d_forward(x, p):
    """Cross-correlate ``x`` with ``p.weights`` (no kernel flip), zero padded."""
    x = as_tensor4(x)
    ho, wo = _conv_out_dims(x.shape, p)
    n = x.shape[0]
    cols = _im2col(x, p, ho, wo)
    w2 = p.weights.reshape(p.out_channels, -1).astype(x.dtype, copy=False)
    out = (w2 @ cols).reshape(p.out_channels, n, ho, wo).transpose(1, 0, 2, 3)
    out = out + p.bias.astype(x.dtype, copy=False)[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(x, p, out_grad):
    x = as_tensor4(x)
    ho, wo = _conv_out_dims(x.shape, p)
    n, c, h, w = x.shape
    expected = (n, p.out_channels, ho, wo)
    if out_grad.shape != expected:
        raise ShapeError(f"out_grad shape {out_grad.shape} does not match forward output {expected}")
    kh, kw = p.kernel
    s = p.stride
    cols = _im2col(x, p, ho, wo)
    g2 = out_grad.transpose(1, 0, 2, 3).reshape(p.out_channels, -1)
    w_grad = (g2 @ cols.T).reshape(p.weights.shape)
    b_grad = g2.sum(axis=1)

    dcols = (p.weights.reshape(p.out_channels, -1).astype(x.dtype, copy=False).T @ g2)
    dcols = dcols.reshape(c, kh, kw, n, ho, wo)
    dxp = np.zeros((n, c, h + 2 * p.pad, w + 2 * p.pad), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                dcols[:, i, j].transpose(1, 0, 2, 3)
    dx = dxp[:, :, p.pad:p.pad + h, p.pad:p.pad + w] if p.pad else dxp
    return LayerGrad(np.ascontiguousarray(dx), {"weights": w_grad, "bias": b_grad})


def maxpool2_forward(x):
    """2x2 max pooling with stride 2.

    Returns the pooled tensor and an integer map holding, per window, the
    row-major index (0..3) of the winning element. Ties go to the first
    element in scan order.
    """
    x = as_tensor4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even h and w, got shape {x.shape}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    argmax_map = np.argmax(win, axis=-1).astype(np.int8)
    out = np.take_along_axis(win, argmax_map[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, argmax_map


def maxpool2_backward(argmax_map, out_grad):
    if argmax_map.shape != out_grad.shape:
        raise ShapeError(
            f"argmax map shape {argmax_map.shape} does not match out_grad shape {out_grad.shape}")
    n, c, h2, w2 = out_grad.shape
    onehot = np.arange(4) == argmax_map[..., None]
    win = onehot * out_grad[..., None]
    grad = win.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    return np.ascontiguousarray(grad, dtype=out_grad.dtype)


def _check_deconv(x, p):
    x = as_tensor4(x)
    if p.kernel != (2, 2) or p.stride != 2 or p.pad != 0:
        raise ShapeError(
            f"deconv2 needs a 2x2 kernel with stride 2 and no padding, got {p.weights.shape} "
            f"stride {p.stride} pad {p.pad}")
    if x.shape[1] != p.in_channels:
        raise ShapeError(
            f"input shape {x.shape} has {x.shape[1]} channels but weights {p.weights.shape} expect {p.in_channels}")
    return x


def deconv2_forward(x, p):
    """Transposed 2x2 stride-2 convolution, i.e. the adjoint of a stride-2 conv.

    ``out[n, o, 2i + a, 2j + b] = sum_c x[n, c, i, j] * W[o, c, a, b] + bias[o]``
    """
    x = _check_deconv(x, p)
    n, _, h, w = x.shape
    wt = p.weights.astype(x.dtype, copy=False)
    y = np.tensordot(x, wt, axes=([1], [1]))  # n, h, w, o, a, b
    y = y.transpose(0, 3, 1, 4, 2, 5).reshape(n, p.out_channels, 2 * h, 2 * w)
    y = y + p.bias.astype(x.dtype, copy=False)[None, :, None, None]
    return np.ascontiguousarray(y)


def deconv2_backward(x, p, out_grad):
    x = _check_deconv(x, p)
    n, c, h, w = x.shape
    expected = (n, p.out_channels, 2 * h, 2 * w)
    if out_grad.shape != expected:
        raise ShapeError(f"out_grad shape {out_grad.shape} does not match forward output {expected}")
    g = out_grad.reshape(n, p.out_channels, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5)  # n, h, w, o, a, b
    wt = p.weights.astype(x.dtype, copy=False)
    dx = np.tensordot(g, wt, axes=([3, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
    w_grad = np.tensordot(x, g, axes=([0, 2, 3], [0, 1, 2])).transpose(1, 0, 2, 3)
    b_grad = out_grad.sum(axis=(0, 2, 3))
    return LayerGrad(np.ascontiguousarray(dx), {"weights": w_grad, "bias": b_grad})


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, out_grad):
    x = np.asarray(x)
    if x.shape != np.shape(out_grad):
        raise ShapeError(f"relu input {x.shape} and out_grad {np.shape(out_grad)} differ")
    return np.where(x > 0, out_grad, 0).astype(np.result_type(out_grad), copy=False)


def softmax_channels(x):
    x = as_tensor4(x)
    if x.shape[1] < 2:
        raise ShapeError(f"softmax over channels needs c >= 2, got shape {x.shape}")
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_loss(p, g):
    """Summed pixelwise cross-entropy between probabilities ``p`` and one-hot ``g``.

    The loss is ``-sum(g * log(max(p, 1e-12)))`` over every pixel and channel,
    a sum rather than a mean. The second return value is the gradient with
    respect to the logits that produced ``p`` through ``softmax_channels``,
    which collapses to ``p - g``.
    """
    p = as_tensor4(p, "p")
    g = np.asarray(g)
    if p.shape != g.shape:
        raise ShapeError(f"probability shape {p.shape} does not match ground truth shape {g.shape}")
    if not (np.all((g == 0) | (g == 1)) and np.all(g.sum(axis=1) == 1)):
        raise ValidationError("ground truth must be one-hot over the channel axis")
    loss = -float(np.sum(g * np.log(np.maximum(p, LOG_CLAMP))))
    grad = (p - g).astype(p.dtype, copy=False)
    return loss, grad


def one_hot(labels, n_classes=2, dtype=np.float32):
    """(n, h, w) integer labels -> (n, n_classes, h, w) one-hot tensor."""
    labels = np.asarray(labels)
    return (labels[:, None] == np.arange(n_classes)[None, :, None, None]).astype(dtype)


def concat_channels(a, b):
    a = as_tensor4(a, "a")
    b = as_tensor4(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate shapes {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=1)


def concat_backward(out_grad, a_channels):
    """Split a concatenated gradient back into the (a, b) channel spans."""
    if not 0 <= a_channels <= out_grad.shape[1]:
        raise ShapeError(f"split point {a_channels} outside channel range of {out_grad.shape}")
    return out_grad[:, :a_channels], out_grad[:, a_channels:]
