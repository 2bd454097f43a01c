"""Small-MLP numerics: forward pass, cross-entropy, backprop, logit divergences.

Parameters live in one flat float64 vector. Layer ``l`` occupies a weight
block of shape ``(fan_in, fan_out)`` (row-major) followed by its bias, so a
``3 -> 4 -> 2`` network has ``3*4 + 4 + 4*2 + 2 = 26`` entries.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .errors import ContractViolation, ValidationError

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    num_classes: int = 2
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValidationError("all layer dimensions must be >= 1")
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def num_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_dims)

    @property
    def digest(self) -> str:
        key = f"{self.input_dim}|{','.join(map(str, self.hidden_dims))}|{self.num_classes}|{self.activation}"
        return hashlib.sha256(key.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ParamVector:
    """Flat parameter vector bound to a :class:`ModelSpec` by digest."""

    values: np.ndarray
    spec_hash: str

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64, copy=True).ravel()
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @classmethod
    def for_spec(cls, spec: ModelSpec, values) -> "ParamVector":
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size != spec.num_params:
            raise ContractViolation(
                f"expected {spec.num_params} parameters for spec, got {values.size}"
            )
        return cls(values, spec.digest)

    def __len__(self):
        return self.values.size


class LabelledData(Protocol):
    features: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray = field(default=None)

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        object.__setattr__(self, "features", x)
        if self.labels is None:
            y = np.zeros(x.shape[0], dtype=np.int64)
        else:
            y = np.asarray(self.labels, dtype=np.int64).ravel()
        object.__setattr__(self, "labels", y)
        if x.shape[0] < 1 or y.size != x.shape[0]:
            raise ContractViolation("batch needs >= 1 row and one label per row")


def _check(params: ParamVector, spec: ModelSpec, x: np.ndarray | None = None) -> None:
    if params.spec_hash != spec.digest or params.values.size != spec.num_params:
        raise ContractViolation("parameter vector is not bound to this model spec")
    if x is not None and (x.ndim != 2 or x.shape[1] != spec.input_dim):
        raise ContractViolation(
            f"features must have {spec.input_dim} columns, got shape {np.shape(x)}"
        )


def unpack(values: np.ndarray, spec: ModelSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into ``(W, b)`` views, one pair per layer."""
    layers = []
    pos = 0
    for fan_in, fan_out in spec.layer_dims:
        w = values[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = values[pos:pos + fan_out]
        pos += fan_out
        layers.append((w, b))
    return layers


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _activation_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(np.float64)
    return 1.0 - a * a


def forward_cached(values: np.ndarray, spec: ModelSpec, x: np.ndarray):
    """Forward pass returning logits plus the per-layer inputs and pre-activations."""
    layers = unpack(values, spec)
    inputs, pre = [], []
    a = x
    for w, b in layers[:-1]:
        inputs.append(a)
        z = a @ w + b
        pre.append(z)
        a = _activate(z, spec.activation)
    w, b = layers[-1]
    inputs.append(a)
    return a @ w + b, (layers, inputs, pre)


def backward(spec: ModelSpec, cache, dlogits: np.ndarray) -> np.ndarray:
    """Backpropagate ``dL/dlogits`` through a cached forward pass to a flat gradient."""
    layers, inputs, pre = cache
    grads = [None] * len(layers)
    delta = dlogits
    for idx in range(len(layers) - 1, -1, -1):
        w, _ = layers[idx]
        a_in = inputs[idx]
        grads[idx] = (a_in.T @ delta, delta.sum(axis=0))
        if idx > 0:
            da = delta @ w.T
            delta = da * _activation_grad(pre[idx - 1], inputs[idx], spec.activation)
    return np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in spec.layer_dims:
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return ParamVector.for_spec(spec, np.concatenate(chunks))


def forward_logits(params: ParamVector, spec: ModelSpec, batch: LabelledData | np.ndarray) -> np.ndarray:
    x = batch if isinstance(batch, np.ndarray) else batch.features
    x = np.asarray(x, dtype=np.float64)
    _check(params, spec, x)
    logits, _ = forward_cached(params.values, spec, x)
    return logits


def _ce_from_logits(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    return float(loss), dlogits / n


def cross_entropy_and_grad(params: ParamVector, spec: ModelSpec, batch: LabelledData) -> tuple[float, ParamVector]:
    x, y = batch.features, batch.labels
    _check(params, spec, x)
    if np.any((y < 0) | (y >= spec.num_classes)):
        raise ContractViolation("labels must lie in [0, num_classes)")
    logits, cache = forward_cached(params.values, spec, x)
    loss, dlogits = _ce_from_logits(logits, y)
    return loss, ParamVector(backward(spec, cache, dlogits), spec.digest)


def per_point_losses(params: ParamVector, spec: ModelSpec, data: LabelledData) -> np.ndarray:
    logits = forward_logits(params, spec, data)
    logp = log_softmax(logits)
    return -logp[np.arange(logits.shape[0]), data.labels]


def kl_rows(p_logits: np.ndarray, q_logits: np.ndarray) -> np.ndarray:
    """Per-row KL(softmax(p) || softmax(q))."""
    logp = log_softmax(p_logits)
    logq = log_softmax(q_logits)
    kl = (np.exp(logp) * (logp - logq)).sum(axis=1)
    # rounding can leave tiny negatives when p == q
    return np.maximum(kl, 0.0)


def kl_divergence_logits(p_logits: np.ndarray, q_logits: np.ndarray) -> float:
    p_logits = np.atleast_2d(np.asarray(p_logits, dtype=np.float64))
    q_logits = np.atleast_2d(np.asarray(q_logits, dtype=np.float64))
    if p_logits.shape != q_logits.shape:
        raise ContractViolation(f"logit shapes differ: {p_logits.shape} vs {q_logits.shape}")
    return float(kl_rows(p_logits, q_logits).mean())


def kl_and_dlogits(p_logits: np.ndarray, q_logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean row KL(softmax(p) || softmax(q)) and its gradient w.r.t. ``p_logits``.

    ``q_logits`` is treated as a constant.
    """
    logp = log_softmax(p_logits)
    logq = log_softmax(q_logits)
    p = np.exp(logp)
    r = logp - logq
    row_kl = (p * r).sum(axis=1, keepdims=True)
    n = p_logits.shape[0]
    return float(row_kl.mean()), p * (r - row_kl) / n


def predict(params: ParamVector, spec: ModelSpec, data: LabelledData | np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. lowest class on ties
    return np.argmax(forward_logits(params, spec, data), axis=1)


def evaluate_accuracy(params: ParamVector, spec: ModelSpec, dataset: LabelledData) -> float:
    labels = np.asarray(dataset.labels)
    if labels.size == 0:
        raise ContractViolation("cannot evaluate accuracy on an empty dataset")
    return float(np.mean(predict(params, spec, dataset) == labels))


def param_l2_sq(a: ParamVector, b: ParamVector, reduction: str = "sum") -> float:
    """Squared L2 distance between two parameter vectors (``sum`` or ``mean``)."""
    if len(a) != len(b):
        raise ContractViolation(f"parameter lengths differ: {len(a)} vs {len(b)}")
    diff = a.values - b.values
    total = float(diff @ diff)
    return total / diff.size if reduction == "mean" else total

