"""A minimal dense-tensor CNN engine on numpy.

Tensors are plain (batch, channels, height, width) float arrays.
Convolution is cross-correlation (no kernel flip); weights for both conv
and transposed conv are shaped (out_depth, in_depth, k, k).  All forward
and backward maps are pure functions; layer classes below add parameter
storage and caching for use in a Sequential stack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch


def conv_out_size(i: int, k: int, stride: int, pad: int) -> int:
    """o = floor((i + 2p - k) / s) + 1."""
    return (i + 2 * pad - k) // stride + 1


def deconv_out_size(i: int, k: int, stride: int, pad: int) -> int:
    """o = (i - 1) * s - 2p + k."""
    return (i - 1) * stride - 2 * pad + k


@dataclass(frozen=True)
class LayerSpec:
    """One row of the architecture table."""

    name: str
    kind: str  # conv | maxpool | deconv | relu | merge
    in_depth: int = 0
    out_depth: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    activation: str = "none"  # relu | none

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(f"bad geometry in layer {self.name}")


@dataclass
class SgdConfig:
    """Plain SGD with L2 weight decay and a step learning-rate schedule."""

    base_lr: float
    lr_gamma: float = 0.7
    lr_step: int = 500
    weight_decay: float = 5e-4
    batch_size: int = 5
    iterations: int = 22000

    def __post_init__(self):
        if self.base_lr <= 0 or not 0 < self.lr_gamma <= 1 or self.batch_size < 1:
            raise ValueError("bad SGD configuration")

    def learning_rate(self, iteration: int) -> float:
        return self.base_lr * self.lr_gamma ** (iteration // self.lr_step)


def _check4d(x: np.ndarray, what: str) -> np.ndarray:
    if x.ndim != 4:
        raise ShapeMismatch(f"{what} must be 4D (n, c, h, w), got {x.shape}")
    return x


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """Patch matrix of shape (n * oh * ow, c * k * k)."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = conv_out_size(h, k, stride, pad)
    ow = conv_out_size(w, k, stride, pad)
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)
    return np.ascontiguousarray(cols)


def _col2im(
    cols: np.ndarray, x_shape: tuple, k: int, stride: int, pad: int
) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch rows back into an image."""
    n, c, h, w = x_shape
    oh = conv_out_size(h, k, stride, pad)
    ow = conv_out_size(w, k, stride, pad)
    patches = cols.reshape(n, oh, ow, c, k, k)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += (
                patches[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            )
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return out


def conv2d_forward(
    x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 0
) -> np.ndarray:
    """Cross-correlation with bias; w is (out_depth, in_depth, k, k)."""
    _check4d(x, "input")
    o, i, k, _ = w.shape
    n, c, h, wd = x.shape
    if c != i:
        raise ShapeMismatch(f"input has {c} channels, weights expect {i}")
    if h + 2 * pad < k or wd + 2 * pad < k:
        raise ShapeMismatch("spatial dims + 2*pad smaller than kernel")
    oh = conv_out_size(h, k, stride, pad)
    ow = conv_out_size(wd, k, stride, pad)
    cols = _im2col(x, k, stride, pad)
    y = cols @ w.reshape(o, -1).T + b
    return y.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)


def conv2d_backward(
    x: np.ndarray, w: np.ndarray, grad_out: np.ndarray, stride: int = 1, pad: int = 0
):
    """Gradients of conv2d_forward; returns (grad_x, grad_w, grad_b)."""
    _check4d(grad_out, "grad_out")
    o, i, k, _ = w.shape
    n = x.shape[0]
    if grad_out.shape[1] != o or grad_out.shape[0] != n:
        raise ShapeMismatch("grad_out inconsistent with forward shapes")
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, o)
    cols = _im2col(x, k, stride, pad)
    grad_w = (g.T @ cols).reshape(w.shape)
    grad_b = g.sum(axis=0)
    grad_cols = g @ w.reshape(o, -1)
    grad_x = _col2im(grad_cols, x.shape, k, stride, pad)
    return grad_x, grad_w, grad_b


def maxpool_forward(x: np.ndarray, k: int, stride: int):
    """Window max with argmax capture; returns (output, flat argmax).

    argmax holds row-major flat indices into each (h, w) plane; ties take
    the first index.
    """
    _check4d(x, "input")
    n, c, h, w = x.shape
    if h < k or w < k:
        raise ShapeMismatch(f"spatial dims {h}x{w} smaller than pool window {k}")
    oh = conv_out_size(h, k, stride, 0)
    ow = conv_out_size(w, k, stride, 0)
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    windows = np.ascontiguousarray(windows[:, :, ::stride, ::stride])
    flat = windows.reshape(n, c, oh, ow, k * k)
    local = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    rows = (np.arange(oh) * stride)[None, None, :, None] + local // k
    cols = (np.arange(ow) * stride)[None, None, None, :] + local % k
    argmax = rows * w + cols
    return y, argmax


def maxpool_backward(
    argmax: np.ndarray, grad_out: np.ndarray, in_shape: tuple
) -> np.ndarray:
    """Route each grad_out value to its recorded argmax location."""
    if argmax.shape != grad_out.shape:
        raise ShapeMismatch("argmax and grad_out shapes differ")
    n, c, h, w = in_shape
    grad_x = np.zeros((n, c, h * w), dtype=grad_out.dtype)
    flat_idx = argmax.reshape(n, c, -1)
    np.add.at(
        grad_x,
        (np.arange(n)[:, None, None], np.arange(c)[None, :, None], flat_idx),
        grad_out.reshape(n, c, -1),
    )
    return grad_x.reshape(in_shape)


def deconv2d_forward(
    x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 0
) -> np.ndarray:
    """Transposed convolution; w is (out_depth, in_depth, k, k)."""
    _check4d(x, "input")
    o, i, k, _ = w.shape
    n, c, h, wd = x.shape
    if c != i:
        raise ShapeMismatch(f"input has {c} channels, weights expect {i}")
    oh = deconv_out_size(h, k, stride, pad)
    ow = deconv_out_size(wd, k, stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeMismatch("deconv output size would be empty")
    # adjoint of a conv taking (n, o, oh, ow) -> (n, i, h, wd)
    w_conv = w.transpose(1, 0, 2, 3).reshape(i, -1)
    g = x.transpose(0, 2, 3, 1).reshape(-1, i)
    grad_cols = g @ w_conv
    y = _col2im(grad_cols, (n, o, oh, ow), k, stride, pad)
    return y + b[None, :, None, None]


def deconv2d_backward(
    x: np.ndarray, w: np.ndarray, grad_out: np.ndarray, stride: int = 1, pad: int = 0
):
    """Gradients of deconv2d_forward; grad_x is an ordinary convolution."""
    _check4d(grad_out, "grad_out")
    o, i, k, _ = w.shape
    n = x.shape[0]
    if grad_out.shape[1] != o or grad_out.shape[0] != n:
        raise ShapeMismatch("grad_out inconsistent with forward shapes")
    cols = _im2col(grad_out, k, stride, pad)
    xr = x.transpose(0, 2, 3, 1).reshape(-1, i)
    grad_w = (xr.T @ cols).reshape(i, o, k, k).transpose(1, 0, 2, 3)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_x = (cols @ w.transpose(1, 0, 2, 3).reshape(i, -1).T).reshape(
        n, x.shape[2], x.shape[3], i
    ).transpose(0, 3, 1, 2)
    return grad_x, grad_w, grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Masks gradient where x <= 0 (derivative at 0 defined as 0)."""
    if x.shape != grad_out.shape:
        raise ShapeMismatch("relu grad shape differs from input")
    return np.where(x > 0, grad_out, 0.0)


def euclidean_loss(pred: np.ndarray, target: np.ndarray):
    """Half mean squared error per batch item, averaged over the batch.

    loss = sum((pred - target)^2) / (2 * per_item_count * batch);
    returns (loss, grad) with grad = (pred - target) / (count * batch).
    """
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    batch = pred.shape[0] if pred.ndim == 4 else 1
    per_item = pred.size // batch
    diff = pred - target
    loss = float(np.sum(diff * diff) / (2.0 * per_item * batch))
    grad = diff / (per_item * batch)
    return loss, grad


def sgd_step(params, grads, cfg: SgdConfig, iteration: int):
    """In-place SGD update: p -= lr(t) * (g + weight_decay * p)."""
    lr = cfg.learning_rate(iteration)
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeMismatch(f"param {p.shape} vs grad {g.shape}")
        p -= lr * (g + cfg.weight_decay * p)
    return params


def he_uniform(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """He-style uniform init on [-sqrt(6/fan_in), sqrt(6/fan_in)]."""
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    """Base class: forward/backward with cached activations, no params."""

    name = "layer"

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self):
        return []


class Conv2d(Layer):
    def __init__(self, spec: LayerSpec, rng: np.random.Generator, dtype=np.float64):
        self.spec = spec
        self.name = spec.name
        fan_in = spec.in_depth * spec.kernel * spec.kernel
        self.w = he_uniform(
            (spec.out_depth, spec.in_depth, spec.kernel, spec.kernel), fan_in, rng
        ).astype(dtype)
        self.b = np.zeros(spec.out_depth, dtype=dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._x = None

    def forward(self, x):
        self._x = x
        return conv2d_forward(x, self.w, self.b, self.spec.stride, self.spec.padding)

    def backward(self, grad_out):
        gx, self.gw, self.gb = conv2d_backward(
            self._x, self.w, grad_out, self.spec.stride, self.spec.padding
        )
        return gx

    def params(self):
        return [(f"{self.name}.weight", self.w, self.gw), (f"{self.name}.bias", self.b, self.gb)]


class Deconv2d(Layer):
    def __init__(self, spec: LayerSpec, rng: np.random.Generator, dtype=np.float64):
        self.spec = spec
        self.name = spec.name
        fan_in = spec.in_depth * spec.kernel * spec.kernel
        self.w = he_uniform(
            (spec.out_depth, spec.in_depth, spec.kernel, spec.kernel), fan_in, rng
        ).astype(dtype)
        self.b = np.zeros(spec.out_depth, dtype=dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._x = None

    def forward(self, x):
        self._x = x
        return deconv2d_forward(x, self.w, self.b, self.spec.stride, self.spec.padding)

    def backward(self, grad_out):
        gx, self.gw, self.gb = deconv2d_backward(
            self._x, self.w, grad_out, self.spec.stride, self.spec.padding
        )
        return gx

    def params(self):
        return [(f"{self.name}.weight", self.w, self.gw), (f"{self.name}.bias", self.b, self.gb)]


class MaxPool2d(Layer):
    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self.name = spec.name
        self._argmax = None
        self._in_shape = None

    def forward(self, x):
        self._in_shape = x.shape
        y, self._argmax = maxpool_forward(x, self.spec.kernel, self.spec.stride)
        return y

    def backward(self, grad_out):
        return maxpool_backward(self._argmax, grad_out, self._in_shape)


class ReLU(Layer):
    def __init__(self, name: str = "relu"):
        self.name = name
        self._x = None

    def forward(self, x):
        self._x = x
        return relu(x)

    def backward(self, grad_out):
        return relu_backward(self._x, grad_out)


class BilinearResize(Layer):
    """Differentiable resize to a target spatial shape (exact adjoint).

    Uses half-pixel sample alignment; the row/column interpolation
    matrices are cached per (in, out) size pair.
    """

    def __init__(self, name: str = "resize"):
        self.name = name
        self._cache: dict = {}
        self._last = None

    @staticmethod
    def _matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
        m = np.zeros((n_out, n_in), dtype=dtype)
        if n_in == n_out:
            np.fill_diagonal(m, 1.0)
            return m
        scale = n_in / n_out
        src = (np.arange(n_out) + 0.5) * scale - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        t = src - i0
        m[np.arange(n_out), i0] += 1.0 - t
        m[np.arange(n_out), i1] += t
        return m

    def _matrices(self, in_hw, out_hw, dtype):
        key = (in_hw, out_hw)
        if key not in self._cache:
            self._cache[key] = (
                self._matrix(in_hw[0], out_hw[0], dtype),
                self._matrix(in_hw[1], out_hw[1], dtype),
            )
        return self._cache[key]

    def forward(self, x, out_hw=None):
        if out_hw is None:
            raise ValueError("resize target not set")
        n, c, h, w = x.shape
        rows, cols = self._matrices((h, w), tuple(out_hw), x.dtype)
        y = np.einsum("oh,nchw,pw->ncop", rows, x, cols, optimize=True)
        self._last = (x.shape, rows, cols)
        return y

    def backward(self, grad_out):
        x_shape, rows, cols = self._last
        return np.einsum("oh,ncop,pw->nchw", rows, grad_out, cols, optimize=True)


class Sequential:
    """A straight stack of layers with reverse-order backprop."""

    def __init__(self, layers: list[Layer]):
        self.layers = layers

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out


def gradient_check(
    net,
    x: np.ndarray,
    target: np.ndarray,
    epsilon: float = 1e-6,
    samples_per_tensor: int = 6,
    seed: int = 0,
) -> float:
    """Central-difference check of analytic parameter gradients.

    ``net`` needs forward(x) -> pred, backward(grad), params().  Returns
    the worst relative error over sampled parameter entries, with the
    denominator floored at 1e-6 to keep near-zero gradients meaningful.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    rng = np.random.default_rng(seed)

    def loss_of():
        loss, _ = euclidean_loss(net.forward(x), target)
        return loss

    _, grad = euclidean_loss(net.forward(x), target)
    net.backward(grad)
    worst = 0.0
    for _, p, g in net.params():
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        k = min(samples_per_tensor, flat_p.size)
        for idx in rng.choice(flat_p.size, size=k, replace=False):
            orig = flat_p[idx]
            flat_p[idx] = orig + epsilon
            hi = loss_of()
            flat_p[idx] = orig - epsilon
            lo = loss_of()
            flat_p[idx] = orig
            fd = (hi - lo) / (2.0 * epsilon)
            err = abs(fd - flat_g[idx]) / max(abs(fd), abs(flat_g[idx]), 1e-6)
            worst = max(worst, err)
    return worst
