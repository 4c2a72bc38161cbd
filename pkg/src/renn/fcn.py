"""Four-level 1D FCN encoder-decoder used for both the local and global blocks.

Canonical layout (C hidden channels everywhere)::

    encoder level i = 1..4:  conv3 -> relu -> conv3 -> relu -> bn [tap i] -> pool2
    decoder level 4, 3:      deconv2 -> concat(tap) -> conv3 -> relu -> bn
    decoder level 2:         deconv2 -> concat(tap) -> conv3 -> relu
    decoder level 1:         deconv2 -> concat(tap) -> conv1 (2 channels) -> softmax

Concatenation puts the encoder tap first: ``[tap; upsampled]``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorops as ops
from .errors import (
    ChecksumError,
    ConfigError,
    ConfigMismatchError,
    PreconditionError,
    UsageError,
    VersionError,
    WeightsFormatError,
)
from .tensorops import LayerParams

LEVELS = 4
OUT_CHANNELS = 2
POOL_FACTOR = 2 ** LEVELS

WEIGHTS_MAGIC = b"RENNW001"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class FcnConfig:
    in_channels: int = 1
    hidden_channels: int = 8
    seed: int = 0
    levels: int = LEVELS
    out_channels: int = OUT_CHANNELS

    def validate(self):
        if self.hidden_channels < 1:
            raise ConfigError("hidden_channels must be >= 1")
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")
        if self.levels != LEVELS or self.out_channels != OUT_CHANNELS:
            raise ConfigError("levels is fixed at 4 and out_channels at 2")


@dataclass
class Layer:
    kind: str  # conv | relu | bn | pool | deconv | concat | softmax
    params: LayerParams | None = None
    tap: bool = False  # bn output feeds a decoder concatenation


@dataclass
class Model:
    config: FcnConfig
    layers: list[Layer]
    skips: dict[int, int]  # concat layer index -> encoder bn layer index
    mode: str = "train"
    _caches: list | None = field(default=None, repr=False)

    def census(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for layer in self.layers:
            counts[layer.kind] = counts.get(layer.kind, 0) + 1
        return counts

    def parameters(self) -> list[np.ndarray]:
        """Trainable arrays in declaration order (views, updated in place by the optimizer)."""
        return [a for layer in self.layers if layer.params is not None
                for a in layer.params.trainable().values()]

    def n_parameters(self) -> int:
        return sum(a.size for a in self.parameters())

    def freeze(self) -> "Model":
        self.mode = "infer"
        self._caches = None
        return self

    def unfreeze(self) -> "Model":
        self.mode = "train"
        return self

    def forward(self, x, keep_cache: bool = False) -> np.ndarray:
        """Return the softmax probability map, shape (2, length)."""
        x = ops.as_series(x)
        if x.shape[0] != self.config.in_channels:
            raise ConfigError(
                f"model expects {self.config.in_channels} input channels, got {x.shape[0]}")
        if x.shape[1] % POOL_FACTOR:
            raise PreconditionError(
                f"input length {x.shape[1]} is not a multiple of {POOL_FACTOR}; use pad_to_pool")
        caches = [] if keep_cache else None
        taps = {}
        h = x
        for i, layer in enumerate(self.layers):
            if layer.kind == "concat":
                h = np.concatenate([taps[self.skips[i]], h], axis=0)
                cache = None
            elif layer.kind == "softmax":
                cache = {"logits": h}
                h = ops.softmax_channels(h)
            else:
                h, cache = ops.forward(layer.kind, h, layer.params, self.mode)
            if layer.tap:
                taps[i] = h
            if keep_cache:
                caches.append(cache)
        self._caches = caches
        return h

    def backward(self, grad_logits) -> list[np.ndarray]:
        """Backpropagate a gradient on the pre-softmax logits.

        Returns parameter gradients aligned with ``parameters()``.
        """
        if not self._caches:
            raise UsageError("backward requires a preceding forward(..., keep_cache=True)")
        grad = np.asarray(grad_logits, dtype=np.float64)
        tap_grads: dict[int, np.ndarray] = {}
        per_layer: list[dict] = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if layer.kind == "softmax":
                continue
            if layer.tap and i in tap_grads:
                grad = grad + tap_grads.pop(i)
            if layer.kind == "concat":
                n_tap = self.config.hidden_channels
                tap_grads[self.skips[i]] = grad[:n_tap]
                grad = grad[n_tap:]
                continue
            grad, pgrads = ops.backward(layer.kind, self._caches[i], grad, layer.params)
            per_layer[i] = pgrads
        grads = []
        for layer, pgrads in zip(self.layers, per_layer):
            if layer.params is None:
                continue
            for name in layer.params.trainable():
                grads.append(pgrads[name])
        return grads


def _init_conv(rng, n_out, n_in, width):
    fan_in = n_in * width
    # unit-variance uniform scaled by 1/sqrt(fan_in)
    bound = np.sqrt(3.0 / fan_in)
    return LayerParams.conv(rng.uniform(-bound, bound, size=(n_out, n_in, width)))


def build_fcn(config: FcnConfig) -> Model:
    config.validate()
    rng = np.random.default_rng(config.seed)
    c = config.hidden_channels
    layers: list[Layer] = []
    taps: list[int] = []
    n_in = config.in_channels
    for _ in range(LEVELS):
        layers += [Layer("conv", _init_conv(rng, c, n_in, 3)), Layer("relu"),
                   Layer("conv", _init_conv(rng, c, c, 3)), Layer("relu"),
                   Layer("bn", LayerParams.batchnorm(c), tap=True)]
        taps.append(len(layers) - 1)
        layers.append(Layer("pool"))
        n_in = c
    skips = {}
    for level in range(LEVELS, 0, -1):
        layers.append(Layer("deconv", _init_conv(rng, c, c, 2)))
        skips[len(layers)] = taps[level - 1]
        layers.append(Layer("concat"))
        if level == 1:
            layers += [Layer("conv", _init_conv(rng, OUT_CHANNELS, 2 * c, 1)), Layer("softmax")]
        else:
            layers += [Layer("conv", _init_conv(rng, c, 2 * c, 3)), Layer("relu")]
            if level >= 3:
                layers.append(Layer("bn", LayerParams.batchnorm(c)))
    return Model(config, layers, skips)


def pad_to_pool(x) -> tuple[np.ndarray, int]:
    """Reflect-pad the tail up to the next multiple of 16. Returns (padded, original length)."""
    x = ops.as_series(x)
    length = x.shape[1]
    target = max(POOL_FACTOR, -(-length // POOL_FACTOR) * POOL_FACTOR)
    extra = target - length
    if extra == 0:
        return x, length
    return np.pad(x, ((0, 0), (0, extra)), mode="reflect"), length


def model_forward(model: Model, x) -> np.ndarray:
    """Forward a series of any length: pad to a multiple of 16, run, trim back."""
    padded, length = pad_to_pool(x)
    return model.forward(padded)[:, :length]


def encoder_layer_spec(config: FcnConfig) -> list[tuple[int, int]]:
    """(kernel width, stride) of each encoder-path layer in order."""
    return [(3, 1), (3, 1), (2, 2)] * config.levels


def receptive_field(layers) -> int:
    """Receptive field of a chain of (kernel width, stride) layers.

    Accepts an ``FcnConfig`` for the canonical encoder path.
    """
    if isinstance(layers, FcnConfig):
        layers = encoder_layer_spec(layers)
    r, jump = 1, 1
    for k, s in layers:
        r += (k - 1) * jump
        jump *= s
    return r


# -- weights file ----------------------------------------------------------------

def _param_arrays(model: Model) -> list[np.ndarray]:
    out = []
    for layer in model.layers:
        p = layer.params
        if p is None:
            continue
        for name in ("kernels", "biases", "bn_gamma", "bn_beta", "bn_running_mean",
                     "bn_running_var"):
            a = getattr(p, name)
            if a is not None:
                out.append(a)
    return out


def weights_bytes(model: Model) -> bytes:
    body = bytearray(WEIGHTS_MAGIC)
    body += struct.pack("<Iii", WEIGHTS_VERSION, model.config.in_channels,
                        model.config.hidden_channels)
    for a in _param_arrays(model):
        if not np.all(np.isfinite(a)):
            raise PreconditionError("refusing to save non-finite parameters")
        body += a.astype("<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    return bytes(body)


def save_weights(model: Model, path) -> None:
    Path(path).write_bytes(weights_bytes(model))


def load_weights(path, config: FcnConfig) -> Model:
    """Load a weights file into a freshly built model of ``config`` (returned frozen)."""
    data = Path(path).read_bytes()
    header = len(WEIGHTS_MAGIC) + 12
    if len(data) < header + 4:
        raise ChecksumError(f"{path}: file too short")
    if data[:len(WEIGHTS_MAGIC)] != WEIGHTS_MAGIC:
        raise WeightsFormatError(f"{path}: bad magic tag")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise ChecksumError(f"{path}: checksum mismatch")
    version, in_ch, hidden = struct.unpack("<Iii", data[len(WEIGHTS_MAGIC):header])
    if version != WEIGHTS_VERSION:
        raise VersionError(f"{path}: unsupported format version {version}")
    if (in_ch, hidden) != (config.in_channels, config.hidden_channels):
        raise ConfigMismatchError(
            f"{path}: file holds in_channels={in_ch}, channels={hidden}; expected "
            f"in_channels={config.in_channels}, channels={config.hidden_channels}")
    model = build_fcn(config)
    arrays = _param_arrays(model)
    expected = sum(a.size for a in arrays) * 8
    payload = data[header:-4]
    if len(payload) != expected:
        raise ChecksumError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    values = np.frombuffer(payload, dtype="<f8")
    offset = 0
    for a in arrays:
        a[...] = values[offset:offset + a.size].reshape(a.shape)
        offset += a.size
    return model.freeze()
