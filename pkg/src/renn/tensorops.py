"""1D multi-channel tensor operations with analytic backward passes.

A series is a float64 array of shape ``(channels, length)``. Every forward
function is pure apart from batch-norm's running statistics, which train mode
updates in place on the ``LayerParams`` it is given.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, PreconditionError, UsageError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
LOG_EPS = 1e-12
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class LayerParams:
    """Parameters of one layer. Unused fields stay ``None``."""

    kernels: Optional[np.ndarray] = None
    biases: Optional[np.ndarray] = None
    bn_gamma: Optional[np.ndarray] = None
    bn_beta: Optional[np.ndarray] = None
    bn_running_mean: Optional[np.ndarray] = None
    bn_running_var: Optional[np.ndarray] = None

    @classmethod
    def conv(cls, kernels, biases=None):
        kernels = np.asarray(kernels, dtype=np.float64)
        if kernels.ndim == 1:
            kernels = kernels[None, None, :]
        if kernels.shape[2] not in (1, 2, 3):
            raise ConfigError(f"kernel width must be 1, 2 or 3, got {kernels.shape[2]}")
        if biases is None:
            biases = np.zeros(kernels.shape[0])
        return cls(kernels=kernels, biases=np.atleast_1d(np.asarray(biases, dtype=np.float64)))

    @classmethod
    def batchnorm(cls, channels, gamma=1.0, beta=0.0):
        return cls(
            bn_gamma=np.full(channels, gamma, dtype=np.float64),
            bn_beta=np.full(channels, beta, dtype=np.float64),
            bn_running_mean=np.zeros(channels),
            bn_running_var=np.ones(channels),
        )

    def trainable(self) -> dict[str, np.ndarray]:
        names = ("kernels", "biases", "bn_gamma", "bn_beta")
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}


def as_series(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise PreconditionError(f"series must be 2-D (channels, length), got shape {x.shape}")
    return x


# -- convolution ---------------------------------------------------------------

def _conv_columns(x: np.ndarray, width: int) -> np.ndarray:
    pad = width // 2
    length = x.shape[1]
    xp = np.pad(x, ((0, 0), (pad, pad))) if pad else x
    cols = np.stack([xp[:, j:j + length] for j in range(width)], axis=1)
    return cols.reshape(x.shape[0] * width, length)


def conv1d_forward(x, p: LayerParams) -> np.ndarray:
    """Same-length cross-correlation with zero padding (width 3) or a 1x1 conv."""
    out, _ = _conv1d(as_series(x), p)
    return out


def _conv1d(x, p):
    n_out, n_in, width = p.kernels.shape
    if x.shape[0] != n_in:
        raise ConfigError(f"conv expects {n_in} input channels, got {x.shape[0]}")
    if width not in (1, 3):
        raise ConfigError(f"conv kernel width must be 1 or 3, got {width}")
    cols = _conv_columns(x, width)
    out = p.kernels.reshape(n_out, n_in * width) @ cols + p.biases[:, None]
    return out, {"cols": cols, "shape": x.shape}


def _conv1d_backward(cache, p, grad):
    n_out, n_in, width = p.kernels.shape
    cols = cache["cols"]
    length = cache["shape"][1]
    d_kernels = (grad @ cols.T).reshape(p.kernels.shape)
    d_biases = grad.sum(axis=1)
    d_cols = (p.kernels.reshape(n_out, n_in * width).T @ grad).reshape(n_in, width, length)
    pad = width // 2
    dxp = np.zeros((n_in, length + 2 * pad))
    for j in range(width):
        dxp[:, j:j + length] += d_cols[:, j, :]
    dx = dxp[:, pad:pad + length] if pad else dxp
    return dx, {"kernels": d_kernels, "biases": d_biases}


# -- activations and pooling ----------------------------------------------------

def relu(x) -> np.ndarray:
    return np.maximum(as_series(x), 0.0)


def maxpool2_forward(x) -> tuple[np.ndarray, np.ndarray]:
    """Pool pairs of samples. Returns the pooled series and the within-pair argmax (0 or 1)."""
    x = as_series(x)
    if x.shape[1] % 2:
        raise PreconditionError(f"maxpool2 needs an even length, got {x.shape[1]}")
    pairs = x.reshape(x.shape[0], -1, 2)
    idx = np.argmax(pairs, axis=2)  # ties -> earlier sample
    out = np.take_along_axis(pairs, idx[..., None], axis=2)[..., 0]
    return out, idx


def _maxpool2_backward(cache, grad):
    idx = cache["argmax"]
    d_pairs = np.zeros(idx.shape + (2,))
    np.put_along_axis(d_pairs, idx[..., None], grad[..., None], axis=2)
    return d_pairs.reshape(idx.shape[0], -1), {}


# -- transposed convolution -----------------------------------------------------

def deconv2_forward(x, p: LayerParams) -> np.ndarray:
    """Stride-2, width-2 transposed convolution: doubles the length."""
    out, _ = _deconv2(as_series(x), p)
    return out


def _deconv2(x, p):
    n_out, n_in, width = p.kernels.shape
    if width != 2:
        raise ConfigError(f"deconv kernel width must be 2, got {width}")
    if x.shape[0] != n_in:
        raise ConfigError(f"deconv expects {n_in} input channels, got {x.shape[0]}")
    out = np.empty((n_out, 2 * x.shape[1]))
    out[:, 0::2] = p.kernels[:, :, 0] @ x
    out[:, 1::2] = p.kernels[:, :, 1] @ x
    out += p.biases[:, None]
    return out, {"x": x}


def _deconv2_backward(cache, p, grad):
    x = cache["x"]
    g_even, g_odd = grad[:, 0::2], grad[:, 1::2]
    d_kernels = np.stack([g_even @ x.T, g_odd @ x.T], axis=2)
    dx = p.kernels[:, :, 0].T @ g_even + p.kernels[:, :, 1].T @ g_odd
    return dx, {"kernels": d_kernels, "biases": grad.sum(axis=1)}


# -- batch normalization --------------------------------------------------------

def batchnorm_forward(x, p: LayerParams, mode: str = "train") -> np.ndarray:
    out, _ = _batchnorm(as_series(x), p, mode)
    return out


def _batchnorm(x, p, mode):
    if mode == "train":
        mean = x.mean(axis=1)
        var = x.var(axis=1)
        p.bn_running_mean[:] = BN_MOMENTUM * p.bn_running_mean + (1 - BN_MOMENTUM) * mean
        p.bn_running_var[:] = BN_MOMENTUM * p.bn_running_var + (1 - BN_MOMENTUM) * var
    elif mode == "infer":
        mean, var = p.bn_running_mean, p.bn_running_var
    else:
        raise ConfigError(f"unknown batch-norm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean[:, None]) * inv_std[:, None]
    out = p.bn_gamma[:, None] * xhat + p.bn_beta[:, None]
    return out, {"xhat": xhat, "inv_std": inv_std, "mode": mode}


def _batchnorm_backward(cache, p, grad):
    xhat, inv_std = cache["xhat"], cache["inv_std"]
    d_gamma = (grad * xhat).sum(axis=1)
    d_beta = grad.sum(axis=1)
    dxhat = grad * p.bn_gamma[:, None]
    if cache["mode"] == "infer":
        dx = dxhat * inv_std[:, None]
    else:
        n = grad.shape[1]
        dx = (inv_std[:, None] / n) * (
            n * dxhat
            - dxhat.sum(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
        )
    return dx, {"bn_gamma": d_gamma, "bn_beta": d_beta}


# -- output head ----------------------------------------------------------------

def softmax_channels(x) -> np.ndarray:
    """Softmax across the channel axis at each time point (overflow-safe)."""
    x = as_series(x)
    if x.shape[0] != 2:
        raise PreconditionError(f"softmax_channels expects 2 channels, got {x.shape[0]}")
    z = np.exp(x - x.max(axis=0, keepdims=True))
    return z / z.sum(axis=0, keepdims=True)


def weighted_cross_entropy(pred, labels, w_pos: float) -> float:
    """Mean over time of -[w_pos*y*ln p_pos + (1-y)*ln p_neg].

    ``pred`` is a 2-channel probability map ordered (background, peak).
    """
    pred = as_series(pred)
    y = np.asarray(labels, dtype=np.float64)
    p = np.clip(pred, LOG_EPS, 1.0 - LOG_EPS)
    terms = w_pos * y * np.log(p[1]) + (1.0 - y) * np.log(p[0])
    return float(-terms.sum() / y.size)


def softmax_cross_entropy_backward(pred, labels, w_pos: float) -> np.ndarray:
    """Gradient of ``weighted_cross_entropy`` with respect to the pre-softmax logits."""
    pred = as_series(pred)
    y = np.asarray(labels, dtype=np.float64)
    weight = np.where(y > 0, w_pos, 1.0)
    target = np.stack([1.0 - y, y])
    grad = weight * (pred - target) / y.size
    # a clamped log has zero slope
    p_true = np.where(y > 0, pred[1], pred[0])
    clamped = (p_true < LOG_EPS) | (p_true > 1.0 - LOG_EPS)
    grad[:, clamped] = 0.0
    return grad


# -- generic layer interface ----------------------------------------------------

def forward(kind: str, x, p: Optional[LayerParams] = None, mode: str = "train"):
    """Run one layer and return ``(output, cache)`` for ``backward``."""
    x = as_series(x)
    if kind == "conv":
        return _conv1d(x, p)
    if kind == "relu":
        return np.maximum(x, 0.0), {"mask": x > 0}
    if kind == "pool":
        out, idx = maxpool2_forward(x)
        return out, {"argmax": idx}
    if kind == "deconv":
        return _deconv2(x, p)
    if kind == "bn":
        return _batchnorm(x, p, mode)
    raise ConfigError(f"unknown layer kind {kind!r}")


def backward(kind: str, cache, grad_out, p: Optional[LayerParams] = None):
    """Return ``(grad_in, param_grads)`` for a layer run through ``forward``."""
    if cache is None:
        raise UsageError(f"{kind} backward called without a cached forward pass")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if kind == "conv":
        return _conv1d_backward(cache, p, grad_out)
    if kind == "relu":
        return grad_out * cache["mask"], {}
    if kind == "pool":
        return _maxpool2_backward(cache, grad_out)
    if kind == "deconv":
        return _deconv2_backward(cache, p, grad_out)
    if kind == "bn":
        return _batchnorm_backward(cache, p, grad_out)
    raise ConfigError(f"unknown layer kind {kind!r}")


# -- optimizer ------------------------------------------------------------------

@dataclass
class AdamState:
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)
    step_count: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(a) for a in params], [np.zeros_like(a) for a in params], 0)


def adam_step(params: list, grads: list, state: AdamState, lr: float):
    """In-place Adam update with bias correction. Returns ``(params, state)``."""
    if lr <= 0:
        raise ConfigError("learning rate must be positive")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(a) for a in params]
        state.second_moment = [np.zeros_like(a) for a in params]
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for theta, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if theta.shape != g.shape:
            raise PreconditionError(f"gradient shape {g.shape} != parameter shape {theta.shape}")
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * g * g
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return params, state
