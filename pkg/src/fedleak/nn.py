"""Dense ReLU networks with exact backpropagation.

Weights are stored ``[out x in]`` and applied as ``x @ W.T + b``. All
randomness (initialisation, dropout masks, batch order) comes from an
explicit ``numpy.random.Generator`` so that every call is reproducible.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .errors import ConfigError, DataError
from .metrics import uar

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


@dataclass
class ParamSet:
    """Ordered ``(weight, bias)`` pairs, flat-indexable as one vector."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        self.layers = [(np.asarray(w), np.asarray(b)) for w, b in self.layers]

    def arrays(self) -> Iterator[np.ndarray]:
        for w, b in self.layers:
            yield w
            yield b

    @property
    def shapes(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        return [(w.shape, b.shape) for w, b in self.layers]

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    @property
    def dtype(self):
        return self.layers[0][0].dtype

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, vec: np.ndarray) -> "ParamSet":
        """Build a ParamSet with this one's shapes from a flat vector."""
        vec = np.asarray(vec)
        if vec.ndim != 1 or vec.size != self.size:
            raise ConfigError(f"vector of length {vec.size} does not match {self.size} parameters")
        out, pos = [], 0
        for w, b in self.layers:
            wn = vec[pos:pos + w.size].reshape(w.shape)
            pos += w.size
            bn = vec[pos:pos + b.size].reshape(b.shape)
            pos += b.size
            out.append((wn.copy(), bn.copy()))
        return ParamSet(out)

    def check_chain(self) -> None:
        """Raise unless consecutive dense layers have matching dimensions."""
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ConfigError(f"layer {i}: weight {w.shape} / bias {b.shape} are not a dense pair")
            if i and w.shape[1] != self.layers[i - 1][0].shape[0]:
                raise ConfigError(
                    f"layer {i} expects {w.shape[1]} inputs, layer {i - 1} emits {self.layers[i - 1][0].shape[0]}"
                )

    def same_shape(self, other: "ParamSet") -> bool:
        return self.shapes == other.shapes

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParamSet":
        return ParamSet([(fn(w), fn(b)) for w, b in self.layers])

    def zip_map(self, other: "ParamSet", fn) -> "ParamSet":
        if not self.same_shape(other):
            raise ConfigError(f"parameter shapes differ: {self.shapes} vs {other.shapes}")
        return ParamSet([(fn(w1, w2), fn(b1, b2)) for (w1, b1), (w2, b2) in zip(self.layers, other.layers)])

    def copy(self) -> "ParamSet":
        return self.map(np.copy)

    def zeros_like(self) -> "ParamSet":
        return self.map(np.zeros_like)

    def astype(self, dtype) -> "ParamSet":
        return self.map(lambda a: a.astype(dtype))

    def __add__(self, other):
        return self.zip_map(other, np.add)

    def __sub__(self, other):
        return self.zip_map(other, np.subtract)

    def __neg__(self):
        return self.map(np.negative)

    def __mul__(self, c):
        return self.map(lambda a: a * c)

    __rmul__ = __mul__

    def __truediv__(self, c):
        return self.map(lambda a: a / c)

    def allclose(self, other: "ParamSet", **kw) -> bool:
        return self.same_shape(other) and all(
            np.allclose(a, b, **kw) for a, b in zip(self.arrays(), other.arrays())
        )

    def equal(self, other: "ParamSet") -> bool:
        return self.same_shape(other) and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )


def l2_norm(p: ParamSet) -> float:
    """Euclidean norm over every coordinate of every layer."""
    sq = 0.0
    for a in p.arrays():
        v = a.ravel().astype(np.float64, copy=False)
        sq += float(np.dot(v, v))
    return float(np.sqrt(sq))


def clip_to_norm(p: ParamSet, C: float) -> ParamSet:
    """Scale ``p`` by ``1 / max(1, ||p|| / C)``."""
    if not C > 0:
        raise ConfigError(f"clipping threshold must be positive, got {C}")
    factor = max(1.0, l2_norm(p) / C)
    if factor == 1.0:
        return p.copy()
    return p / factor


def sgd_step(params: ParamSet, grads: ParamSet, lr: float) -> ParamSet:
    if not params.same_shape(grads):
        raise ConfigError(f"gradient shapes {grads.shapes} do not match parameters {params.shapes}")
    return params.zip_map(grads, lambda p, g: p - lr * g)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, LOG_FLOOR))))


def softmax_xent_delta(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(mean cross-entropy)/d(logits)."""
    d = probs.copy()
    d[np.arange(len(labels)), labels] -= 1.0
    d /= len(labels)
    return d


def dropout_mask(shape, rate: float, rng: np.random.Generator | None, dtype) -> np.ndarray:
    if rng is None:
        raise ConfigError("train-mode dropout needs an rng stream")
    return (rng.random(shape) >= rate).astype(dtype) / dtype.type(1.0 - rate)


def glorot_uniform(rng: np.random.Generator, n_out: int, n_in: int, dtype=np.float64,
                   fan_in: int | None = None, fan_out: int | None = None) -> np.ndarray:
    lim = np.sqrt(6.0 / ((fan_in or n_in) + (fan_out or n_out)))
    return rng.uniform(-lim, lim, size=(n_out, n_in)).astype(dtype)


@dataclass(frozen=True)
class NetSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = (256, 128)
    num_classes: int = 4
    dropout_rate: float = 0.2
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.num_classes < 2 or any(h < 1 for h in self.hidden_dims):
            raise ConfigError(f"invalid layer sizes in {self}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")

    @property
    def dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.num_classes]


def init_params(spec: NetSpec, rng: np.random.Generator, dtype=np.float64) -> ParamSet:
    dims = spec.dims
    return ParamSet(
        [(glorot_uniform(rng, o, i, dtype), np.zeros(o, dtype=dtype)) for i, o in zip(dims[:-1], dims[1:])]
    )


def _check_batch(spec: NetSpec, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ConfigError(f"batch shape {X.shape} does not match input_dim={spec.input_dim}")
    return X


def _forward(spec, params, X, train, rng):
    dtype = np.result_type(X, params.dtype)
    h = X.astype(dtype, copy=False)
    acts, masks = [h], []
    last = len(params.layers) - 1
    for i, (W, b) in enumerate(params.layers):
        z = h @ W.T + b
        if i == last:
            return z, acts, masks
        h = np.maximum(z, 0)
        if train and spec.dropout_rate > 0:
            m = dropout_mask(h.shape, spec.dropout_rate, rng, h.dtype)
            h = h * m
            masks.append(m)
        else:
            masks.append(None)
        acts.append(h)


def forward(spec: NetSpec, params: ParamSet, X: np.ndarray, mode: str = "eval",
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Class probabilities for each row of ``X``. ``mode`` is "train" or "eval"."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    X = _check_batch(spec, X)
    logits, _, _ = _forward(spec, params, X, mode == "train", rng)
    return softmax(logits)


def loss_and_gradients(spec: NetSpec, params: ParamSet, X: np.ndarray, labels: np.ndarray,
                       rng: np.random.Generator | None = None, train: bool = True) -> tuple[float, ParamSet]:
    X = _check_batch(spec, X)
    labels = np.asarray(labels)
    if len(X) == 0:
        raise DataError("cannot differentiate over an empty batch")
    if len(labels) != len(X):
        raise ConfigError(f"{len(labels)} labels for {len(X)} samples")
    if labels.min() < 0 or labels.max() >= spec.num_classes:
        raise DataError(f"labels must lie in [0, {spec.num_classes})")
    logits, acts, masks = _forward(spec, params, X, train, rng)
    probs = softmax(logits)
    loss = cross_entropy(probs, labels)
    d = softmax_xent_delta(probs, labels)
    grads = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        W = params.layers[i][0]
        grads[i] = (d.T @ acts[i], d.sum(axis=0))
        if i:
            d = d @ W
            if masks[i - 1] is not None:
                d = d * masks[i - 1]
            d = d * (acts[i] > 0)
    return loss, ParamSet(grads)


def gradients(spec: NetSpec, params: ParamSet, X: np.ndarray, labels: np.ndarray,
              rng: np.random.Generator | None = None) -> ParamSet:
    """Gradient of the mean cross-entropy over the batch (train-mode dropout)."""
    return loss_and_gradients(spec, params, X, labels, rng)[1]


class MLP:
    """Adapter giving a NetSpec the interface ``train_classifier`` expects."""

    def __init__(self, spec: NetSpec, dtype=np.float64):
        self.spec = spec
        self.dtype = dtype

    def init_params(self, rng):
        return init_params(self.spec, rng, self.dtype)

    def predict_proba(self, params, X):
        return forward(self.spec, params, X, "eval")

    def loss_and_grad(self, params, X, y, rng):
        return loss_and_gradients(self.spec, params, X, y, rng)

    @property
    def num_classes(self):
        return self.spec.num_classes


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: ParamSet, grads: ParamSet) -> ParamSet:
        return sgd_step(params, grads, self.lr)


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params: ParamSet, grads: ParamSet) -> ParamSet:
        if self.m is None:
            self.m, self.v = grads.zeros_like(), grads.zeros_like()
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m = self.m.zip_map(grads, lambda m, g: b1 * m + (1 - b1) * g)
        self.v = self.v.zip_map(grads, lambda v, g: b2 * v + (1 - b2) * g * g)
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        eps, lr = self.eps, self.lr
        step = self.m.zip_map(self.v, lambda m, v: (m / c1) / (np.sqrt(v / c2) + eps))
        return params.zip_map(step, lambda p, s: (p - lr * s).astype(p.dtype, copy=False))


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 20
    lr: float = 0.01
    optimizer: str = "sgd"
    clip: float | None = None

    def make_optimizer(self):
        if self.optimizer == "sgd":
            return SGD(self.lr)
        if self.optimizer == "adam":
            return Adam(self.lr)
        raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainResult:
    params: ParamSet
    best_epoch: int
    best_uar: float
    history: list[dict] = field(default_factory=list)
    single_class: bool = False


def train_classifier(model, train: tuple[np.ndarray, np.ndarray], valid: tuple[np.ndarray, np.ndarray],
                     cfg: TrainConfig, rng: np.random.Generator, init: ParamSet | None = None) -> TrainResult:
    """Mini-batch training; returns the epoch with the best validation UAR.

    ``model`` provides ``init_params``, ``predict_proba``, ``loss_and_grad``
    and ``num_classes``. Ties in validation UAR keep the earlier epoch.
    """
    X, y = train
    Xv, yv = valid
    if len(X) == 0 or len(Xv) == 0:
        raise DataError("training and validation sets must be non-empty")
    single = len(np.unique(y)) < 2
    if single:
        log.warning("training set has a single class; the classifier will be degenerate")
    params = init if init is not None else model.init_params(rng)
    opt = cfg.make_optimizer()
    best = (-1.0, 0, params)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(X))
        losses = []
        for start in range(0, len(X), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, g = model.loss_and_grad(params, X[idx], y[idx], rng)
            if cfg.clip is not None:
                g = clip_to_norm(g, cfg.clip)
            params = opt.step(params, g)
            losses.append(loss)
        pred = predict(model, params, Xv)
        score = uar(yv, pred, model.num_classes)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "valid_uar": score})
        if score > best[0]:
            best = (score, epoch, params)
    return TrainResult(best[2], best[1], best[0], history, single)


def predict(model, params: ParamSet, X: np.ndarray, chunk: int = 256) -> np.ndarray:
    return np.concatenate(
        [model.predict_proba(params, X[i:i + chunk]).argmax(axis=1) for i in range(0, len(X), chunk)]
    )

