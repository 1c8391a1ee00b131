"""Small classifiers with hand-written gradients.

Two kinds are supported: multinomial logistic regression (``softmax``) and a
one-hidden-layer tanh network (``mlp1``). Parameters live in a single flat
vector; ``unpack`` returns views into it in the order weights-then-bias per
layer, weights stored row-major as ``(out, in)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkit import DimensionError, NonFiniteError

KINDS = ("softmax", "mlp1")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int
    hidden_dim: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.kind == "mlp1" and self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1 for mlp1")

    @property
    def layers(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per dense layer."""
        if self.kind == "softmax":
            return [(self.input_dim, self.num_classes)]
        return [(self.input_dim, self.hidden_dim), (self.hidden_dim, self.num_classes)]


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])


def param_count(spec: ModelSpec) -> int:
    return sum((fan_in + 1) * fan_out for fan_in, fan_out in spec.layers)


def unpack(spec: ModelSpec, w: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    if w.shape != (param_count(spec),):
        raise DimensionError(f"expected {param_count(spec)} parameters, got {w.shape}")
    out = []
    pos = 0
    for fan_in, fan_out in spec.layers:
        W = w[pos:pos + fan_in * fan_out].reshape(fan_out, fan_in)
        pos += fan_in * fan_out
        b = w[pos:pos + fan_out]
        pos += fan_out
        out.append((W, b))
    return out


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    w = np.zeros(param_count(spec))
    for W, _ in unpack(spec, w):
        fan_out, fan_in = W.shape
        r = np.sqrt(6.0 / (fan_in + fan_out))
        W[...] = rng.uniform(-r, r, size=W.shape)
    return w


def _check_batch(spec: ModelSpec, batch: Batch) -> None:
    x, y = batch.features, batch.labels
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise DimensionError(f"features must be (n, {spec.input_dim}), got {x.shape}")
    if y.shape != (x.shape[0],):
        raise DimensionError("labels must have one entry per row")
    if x.shape[0] == 0:
        raise ValueError("empty batch")


def logits(spec: ModelSpec, w: np.ndarray, x: np.ndarray) -> np.ndarray:
    layers = unpack(spec, w)
    if spec.kind == "softmax":
        W, b = layers[0]
        return x @ W.T + b
    (W1, b1), (W2, b2) = layers
    return np.tanh(x @ W1.T + b1) @ W2.T + b2


def _log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_grad(spec: ModelSpec, w: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its exact gradient w.r.t. ``w``."""
    _check_batch(spec, batch)
    # non-finite values are reported below as NonFiniteError, not as warnings
    with np.errstate(all="ignore"):
        loss, grad = _forward_backward(spec, w, batch)
    if not np.isfinite(loss) or not np.isfinite(grad).all():
        raise NonFiniteError("non-finite loss or gradient")
    return loss, grad


def _forward_backward(spec: ModelSpec, w: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
    x, y = batch.features, batch.labels
    n = x.shape[0]
    layers = unpack(spec, w)
    grad = np.empty_like(w)
    gl = unpack(spec, grad)
    rows = np.arange(n)

    if spec.kind == "softmax":
        (W, b), = layers
        z = x @ W.T + b
        logp = _log_softmax(z)
        dz = np.exp(logp)
        dz[rows, y] -= 1.0
        dz /= n
        gl[0][0][...] = dz.T @ x
        gl[0][1][...] = dz.sum(axis=0)
    else:
        (W1, b1), (W2, b2) = layers
        h = np.tanh(x @ W1.T + b1)
        z = h @ W2.T + b2
        logp = _log_softmax(z)
        dz = np.exp(logp)
        dz[rows, y] -= 1.0
        dz /= n
        gl[1][0][...] = dz.T @ h
        gl[1][1][...] = dz.sum(axis=0)
        da = (dz @ W2) * (1.0 - h * h)
        gl[0][0][...] = da.T @ x
        gl[0][1][...] = da.sum(axis=0)

    return float(-logp[rows, y].mean()), grad


def predict(spec: ModelSpec, w: np.ndarray, x: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class
    return np.argmax(logits(spec, w, x), axis=1)


def accuracy(spec: ModelSpec, w: np.ndarray, data: Batch) -> float:
    if len(data) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    _check_batch(spec, data)
    return float(np.mean(predict(spec, w, data.features) == data.labels))
