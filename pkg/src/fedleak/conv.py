"""Three-layer ConvNet over first-layer weight updates, with an MLP head.

An input row is the flattened weight-update image (``rows x cols``, one
channel) followed by the ``bias_dim`` bias-update entries. Each conv block
is a 3x3 "valid" convolution (stride 1), ReLU, then 2x2 max pooling; the
pooled map is flattened, concatenated with the bias part and fed to dense
ReLU layers ending in a softmax.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, DataError
from .nn import (
    ParamSet,
    cross_entropy,
    dropout_mask,
    glorot_uniform,
    softmax,
    softmax_xent_delta,
)


@dataclass(frozen=True)
class ConvNetSpec:
    input_shape: tuple[int, int]
    bias_dim: int
    channels: tuple[int, ...] = (16, 32, 64)
    kernel_size: int = 3
    pool: int = 2
    hidden_dims: tuple[int, ...] = (128,)
    dropout_rate: float = 0.2
    num_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if len(self.channels) != 3:
            raise ConfigError(f"the attack extractor has exactly 3 conv layers, got {len(self.channels)}")
        if self.kernel_size != 3 or self.pool != 2:
            raise ConfigError("only 3x3 kernels with 2x2 pooling are implemented")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        self.feature_shapes  # validates that every stage keeps a non-empty map

    @property
    def feature_shapes(self) -> list[tuple[int, int, int]]:
        """(h, w, c) after each conv+pool block."""
        h, w = self.input_shape
        out = []
        for c in self.channels:
            h, w = (h - 2) // 2, (w - 2) // 2
            if h < 1 or w < 1:
                raise ConfigError(f"input {self.input_shape} is too small for three conv+pool blocks")
            out.append((h, w, c))
        return out

    @property
    def flat_dim(self) -> int:
        h, w, c = self.feature_shapes[-1]
        return h * w * c

    @property
    def input_dim(self) -> int:
        r, c = self.input_shape
        return r * c + self.bias_dim


def init_convnet(spec: ConvNetSpec, rng: np.random.Generator, dtype=np.float32) -> ParamSet:
    layers = []
    cin = 1
    for cout in spec.channels:
        fan_in, fan_out = 9 * cin, 9 * cout
        w = glorot_uniform(rng, cout, 9 * cin, dtype, fan_in, fan_out).reshape(cout, cin, 9)
        layers.append((np.ascontiguousarray(w), np.zeros(cout, dtype=dtype)))
        cin = cout
    dims = [spec.flat_dim + spec.bias_dim, *spec.hidden_dims, spec.num_classes]
    for i, o in zip(dims[:-1], dims[1:]):
        layers.append((glorot_uniform(rng, o, i, dtype), np.zeros(o, dtype=dtype)))
    return ParamSet(layers)


def _split(spec: ConvNetSpec, X: np.ndarray, dtype):
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ConfigError(f"batch shape {X.shape} does not match attack input_dim={spec.input_dim}")
    r, c = spec.input_shape
    X = X.astype(dtype, copy=False)
    img = np.ascontiguousarray(X[:, : r * c].reshape(len(X), 1, r, c))
    return img, X[:, r * c:]


def _forward(spec, params, X, train, rng):
    # Max pooling commutes with a per-channel bias and with ReLU, so each
    # block is computed as conv -> pool -> +bias -> ReLU.
    dtype = params.dtype
    img, bias = _split(spec, X, dtype)
    n = len(img)
    h = img
    conv_cache = []
    for W, b in params.layers[:3]:
        pooled, arg = kernels.conv3x3_pool_forward(h, np.ascontiguousarray(W, dtype=dtype))
        z = pooled + b[None, :, None, None]
        active = z > 0
        conv_cache.append((h, arg, active))
        h = np.ascontiguousarray(np.where(active, z, 0), dtype=dtype)
    feat = np.concatenate([h.reshape(n, -1), bias], axis=1)
    acts, masks = [feat], []
    dense = params.layers[3:]
    for i, (W, b) in enumerate(dense):
        z = feat @ W.T + b
        if i == len(dense) - 1:
            return z, (conv_cache, h.shape, acts, masks)
        feat = np.maximum(z, 0)
        if train and spec.dropout_rate > 0:
            m = dropout_mask(feat.shape, spec.dropout_rate, rng, feat.dtype)
            feat = feat * m
            masks.append(m)
        else:
            masks.append(None)
        acts.append(feat)


def convnet_forward(spec: ConvNetSpec, params: ParamSet, X: np.ndarray, mode: str = "eval",
                    rng: np.random.Generator | None = None) -> np.ndarray:
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    logits, _ = _forward(spec, params, X, mode == "train", rng)
    return softmax(logits)


def convnet_loss_and_gradients(spec: ConvNetSpec, params: ParamSet, X: np.ndarray, labels: np.ndarray,
                               rng: np.random.Generator | None = None, train: bool = True):
    labels = np.asarray(labels)
    if len(X) == 0:
        raise DataError("cannot differentiate over an empty batch")
    if labels.min() < 0 or labels.max() >= spec.num_classes:
        raise DataError(f"labels must lie in [0, {spec.num_classes})")
    dtype = params.dtype
    logits, (conv_cache, pooled_shape, acts, masks) = _forward(spec, params, X, train, rng)
    probs = softmax(logits)
    loss = cross_entropy(probs, labels)
    d = softmax_xent_delta(probs, labels).astype(dtype, copy=False)

    dense = params.layers[3:]
    grads = [None] * len(params.layers)
    for i in range(len(dense) - 1, -1, -1):
        W = dense[i][0]
        grads[3 + i] = (d.T @ acts[i], d.sum(axis=0))
        d = d @ W
        if i:
            if masks[i - 1] is not None:
                d = d * masks[i - 1]
            d = d * (acts[i] > 0)

    d = d[:, : spec.flat_dim].reshape(pooled_shape)
    for layer in (2, 1, 0):
        W = np.ascontiguousarray(params.layers[layer][0], dtype=dtype)
        h_in, arg, active = conv_cache[layer]
        dz = np.ascontiguousarray(np.where(active, d, 0), dtype=dtype)
        dW, d = kernels.conv3x3_pool_backward(h_in, W, dz, arg, layer > 0)
        grads[layer] = (dW, dz.sum(axis=(0, 2, 3), dtype=np.float64).astype(dtype))
    return loss, ParamSet(grads)


class AttackConvNet:
    """Adapter exposing the ConvNet to ``nn.train_classifier``."""

    def __init__(self, spec: ConvNetSpec, dtype=np.float32):
        self.spec = spec
        self.dtype = dtype

    def init_params(self, rng):
        return init_convnet(self.spec, rng, self.dtype)

    def predict_proba(self, params, X):
        return convnet_forward(self.spec, params, X, "eval")

    def loss_and_grad(self, params, X, y, rng):
        return convnet_loss_and_gradients(self.spec, params, X, y, rng)

    @property
    def num_classes(self):
        return self.spec.num_classes
