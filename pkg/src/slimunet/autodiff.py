"""Dense NCHW tensor ops with hand-written reverse-mode gradients.

Every op comes as a pure ``*_forward`` / ``*_backward`` pair operating on
numpy arrays of shape ``(n, c, h, w)``. The layer classes at the bottom wrap
those pairs, hold parameters and cache whatever the backward pass needs.

Conventions fixed here:

* convolution is cross-correlation (no kernel flip), weights laid out as
  ``(k, k, c_in, c_out)``, zero "same" padding of ``k // 2``;
* max-pool ties go to the first element of the 2x2 window in row-major order;
* batch norm uses the biased batch variance, ``eps=1e-3`` and moving
  statistics updated as ``m <- momentum * m + (1 - momentum) * batch``;
* dropout is inverted (kept units scaled by ``1 / (1 - rate)``).

Ops preserve the dtype of their inputs, so the same code runs training in
float32 and gradient checks in float64.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

BN_EPSILON = 1e-3
BN_MOMENTUM = 0.99


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an op."""


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Return a PCG64 generator derived from ``seed`` and optional keys.

    Keys may be ints or strings; strings are reduced with CRC-32 so the
    derived stream does not depend on Python's salted ``hash``. PCG64 seeded
    through ``SeedSequence`` produces the same stream on every platform.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            entropy.append(zlib.crc32(key.encode("utf-8")))
        else:
            entropy.append(int(key) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def _check_4d(x: np.ndarray, name: str = "x") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (n, c, h, w), got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Gather (n*h*w, k*k*c) patch rows; column order matches (k, k, c_in)."""
    n, c, h, w = x.shape
    p = k // 2
    xt = x.transpose(0, 2, 3, 1)
    if p:
        xt = np.pad(xt, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = np.empty((n, h, w, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xt[:, i:i + h, j:j + w, :]
    return cols.reshape(n * h * w, k * k * c)


def _col2im(dcols: np.ndarray, shape: tuple, k: int) -> np.ndarray:
    n, c, h, w = shape
    p = k // 2
    dcols = dcols.reshape(n, h, w, k, k, c)
    dxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, p:p + h, p:p + w, :] if p else dxp
    return np.ascontiguousarray(dx.transpose(0, 3, 1, 2))


def _check_conv(x: np.ndarray, weights: np.ndarray) -> int:
    _check_4d(x)
    if weights.ndim != 4 or weights.shape[0] != weights.shape[1]:
        raise ShapeError(f"weights must be (k, k, c_in, c_out), got {weights.shape}")
    k = weights.shape[0]
    if k not in (1, 3):
        raise ShapeError(f"kernel size must be 1 or 3, got {k}")
    if x.shape[1] != weights.shape[2]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but weights expect c_in={weights.shape[2]}"
        )
    return k


def conv_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-padded stride-1 convolution, output shape ``(n, c_out, h, w)``."""
    k = _check_conv(x, weights)
    n, _, h, w = x.shape
    c_out = weights.shape[3]
    if bias.shape != (c_out,):
        raise ShapeError(f"bias must have shape ({c_out},), got {bias.shape}")
    out = _im2col(x, k) @ weights.reshape(-1, c_out)
    out += bias
    return np.ascontiguousarray(out.reshape(n, h, w, c_out).transpose(0, 3, 1, 2))


def conv_backward(x: np.ndarray, weights: np.ndarray, grad_out: np.ndarray):
    """Return ``(grad_x, grad_w, grad_b)`` for :func:`conv_forward`."""
    k = _check_conv(x, weights)
    n, _, h, w = x.shape
    c_out = weights.shape[3]
    if grad_out.shape != (n, c_out, h, w):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match output {(n, c_out, h, w)}"
        )
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, c_out)
    cols = _im2col(x, k)
    grad_w = (cols.T @ g).reshape(weights.shape)
    grad_b = g.sum(axis=0)
    del cols
    dcols = g @ weights.reshape(-1, c_out).T
    grad_x = _col2im(dcols, x.shape, k)
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# batch normalization


def batchnorm_forward(x, gamma, beta, mode, moving_mean, moving_var,
                      eps=BN_EPSILON, momentum=BN_MOMENTUM):
    """Per-channel normalization over (n, h, w).

    In ``"train"`` mode the batch statistics are used and ``moving_mean`` /
    ``moving_var`` are updated in place; in ``"infer"`` mode the moving
    statistics are used. Returns ``(out, cache)``.
    """
    _check_4d(x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    if mode == "train":
        if x.shape[0] * x.shape[2] * x.shape[3] < 2:
            raise ShapeError("train-mode batch norm needs at least 2 values per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        moving_mean *= momentum
        moving_mean += (1 - momentum) * mean
        moving_var *= momentum
        moving_var += (1 - momentum) * var
    elif mode == "infer":
        mean, var = moving_mean, moving_var
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - mean.astype(x.dtype)[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out, (xhat, inv_std, gamma, mode)


def batchnorm_backward(grad_out, cache):
    """Return ``(grad_x, grad_gamma, grad_beta)``."""
    xhat, inv_std, gamma, mode = cache
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    scale = (gamma * inv_std)[None, :, None, None]
    if mode == "infer":
        return grad_out * scale, grad_gamma, grad_beta
    m = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
    grad_x = scale / m * (
        m * grad_out
        - grad_beta[None, :, None, None]
        - xhat * grad_gamma[None, :, None, None]
    )
    return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# pooling / resampling


def maxpool_forward(x: np.ndarray):
    """2x2 max pooling; returns ``(out, argmax)`` with argmax in 0..3."""
    _check_4d(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max pooling needs even spatial size, got {h}x{w}")
    windows = (
        x.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    idx = windows.argmax(axis=-1)  # first occurrence wins ties
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool_backward(grad_out: np.ndarray, idx: np.ndarray) -> np.ndarray:
    n, c, h2, w2 = grad_out.shape
    windows = np.zeros((n, c, h2, w2, 4), dtype=grad_out.dtype)
    np.put_along_axis(windows, idx[..., None], grad_out[..., None], axis=-1)
    return (
        windows.reshape(n, c, h2, w2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, 2 * h2, 2 * w2)
    )


def upsample_forward(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour 2x upsampling in both spatial axes."""
    _check_4d(x)
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample_backward(grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = grad_out.shape
    return grad_out.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# ---------------------------------------------------------------------------
# elementwise


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return grad_out * (x > 0)


def sigmoid_forward(x):
    return expit(x)


def sigmoid_backward(out, grad_out):
    return grad_out * out * (1 - out)


def dropout_mask(shape, rate: float, rng: np.random.Generator, dtype) -> np.ndarray:
    """Inverted-dropout multiplier: 0 for dropped units, ``1/(1-rate)`` for kept."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / dtype.type(1 - rate)


def dropout_forward(x, rate: float, rng: np.random.Generator | None, mode: str):
    """Returns ``(out, mask)``; mask is None when dropout is a no-op."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    mask = dropout_mask(x.shape, rate, rng, x.dtype)
    return x * mask, mask


def dropout_backward(grad_out, mask):
    return grad_out if mask is None else grad_out * mask


def concat_forward(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stack channels of ``a`` then ``b``."""
    _check_4d(a, "a")
    _check_4d(b, "b")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=1)


def concat_backward(grad_out: np.ndarray, c_a: int):
    return grad_out[:, :c_a], grad_out[:, c_a:]


# ---------------------------------------------------------------------------
# layers


@dataclass
class Param:
    """A trainable array with its gradient buffer."""

    name: str
    data: np.ndarray
    grad: np.ndarray | None = field(default=None, repr=False)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


class Layer:
    """Base class; subclasses cache forward state for one backward call."""

    kind = "identity"

    def __init__(self, name: str):
        self.name = name
        self._cache = None

    def params(self) -> list[Param]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable state that belongs in a checkpoint."""
        return {}

    def forward(self, x, mode="train"):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward called without a forward pass")
        cache, self._cache = self._cache, None
        return cache


class Conv2D(Layer):
    def __init__(self, name, c_in, c_out, k=3, dtype=np.float32):
        super().__init__(name)
        self.kind = f"conv{k}x{k}"
        self.weight = Param(f"{name}/kernel", np.zeros((k, k, c_in, c_out), dtype))
        self.bias = Param(f"{name}/bias", np.zeros(c_out, dtype))

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, mode="train"):
        self._cache = x
        return conv_forward(x, self.weight.data, self.bias.data)

    def backward(self, grad):
        x = self._take_cache()
        gx, gw, gb = conv_backward(x, self.weight.data, grad)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, name, channels, dtype=np.float32):
        super().__init__(name)
        self.gamma = Param(f"{name}/gamma", np.ones(channels, dtype))
        self.beta = Param(f"{name}/beta", np.zeros(channels, dtype))
        self.moving_mean = np.zeros(channels, dtype)
        self.moving_var = np.ones(channels, dtype)

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {
            f"{self.name}/moving_mean": self.moving_mean,
            f"{self.name}/moving_variance": self.moving_var,
        }

    def forward(self, x, mode="train"):
        out, self._cache = batchnorm_forward(
            x, self.gamma.data, self.beta.data, mode, self.moving_mean, self.moving_var
        )
        return out

    def backward(self, grad):
        gx, gg, gb = batchnorm_backward(grad, self._take_cache())
        self.gamma.grad += gg
        self.beta.grad += gb
        return gx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, mode="train"):
        self._cache = x
        return relu_forward(x)

    def backward(self, grad):
        return relu_backward(self._take_cache(), grad)


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, mode="train"):
        out = sigmoid_forward(x)
        self._cache = out
        return out

    def backward(self, grad):
        return sigmoid_backward(self._take_cache(), grad)


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, name, rate, rng=None):
        super().__init__(name)
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng

    def forward(self, x, mode="train"):
        out, mask = dropout_forward(x, self.rate, self.rng, mode)
        self._cache = (mask,)
        return out

    def backward(self, grad):
        (mask,) = self._take_cache()
        return dropout_backward(grad, mask)


class MaxPool(Layer):
    kind = "maxpool2x2"

    def forward(self, x, mode="train"):
        out, idx = maxpool_forward(x)
        self._cache = idx
        return out

    def backward(self, grad):
        return maxpool_backward(grad, self._take_cache())


class Upsample(Layer):
    kind = "upsample2x2"

    def forward(self, x, mode="train"):
        self._cache = True
        return upsample_forward(x)

    def backward(self, grad):
        self._take_cache()
        return upsample_backward(grad)


class Concat(Layer):
    """Concatenates a stored skip tensor (first) with the running tensor."""

    kind = "concat_channels"

    def forward(self, skip, x, mode="train"):
        self._cache = skip.shape[1]
        return concat_forward(skip, x)

    def backward(self, grad):
        return concat_backward(grad, self._take_cache())
