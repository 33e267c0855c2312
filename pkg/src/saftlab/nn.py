"""Multi-layer perceptron with exact first- and second-order derivatives.

Parameters are stored as one flat float64 vector. For each layer the weight
matrix (out x in, row-major) comes first, followed by the bias vector.

Every function here is pure. Passing ``linearize_at=theta0`` to the loss
family swaps the network for its first-order Taylor expansion around
``theta0`` (tangent-space fine-tuning).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class ModelSpec:
    layer_sizes: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("layer_sizes needs at least input and output widths")
        if any(s <= 0 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def n_blocks(self) -> int:
        """Hidden layers plus the logit layer."""
        return self.n_layers

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def is_linear(self) -> bool:
        """True when the logits are affine in the parameters (no hidden layer)."""
        return self.n_layers == 1

    def to_dict(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "activation": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(tuple(d["layer_sizes"]), d.get("activation", "tanh"))

    @property
    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TaskDataset:
    features: np.ndarray
    labels: np.ndarray
    split: str = "train"
    task_id: str = ""

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("one label per feature row required")
        if self.split not in ("train", "val", "test", "pretrain"):
            raise ValueError(f"unknown split tag {self.split!r}")

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, idx) -> "TaskDataset":
        return TaskDataset(self.features[idx], self.labels[idx], self.split, self.task_id)

    @staticmethod
    def concat(parts: Sequence["TaskDataset"], split: str | None = None, task_id: str = "") -> "TaskDataset":
        return TaskDataset(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            split or parts[0].split,
            task_id,
        )


def check_params(params: np.ndarray, spec: ModelSpec) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.n_params,):
        raise ValueError(f"parameter vector has shape {params.shape}, spec needs ({spec.n_params},)")
    return params


def _check_inputs(inputs: np.ndarray, spec: ModelSpec) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != spec.input_dim:
        raise ValueError(f"inputs of shape {inputs.shape} do not match input width {spec.input_dim}")
    return inputs


def _check_dataset(dataset: TaskDataset, spec: ModelSpec) -> None:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if dataset.labels.min() < 0 or dataset.labels.max() >= spec.num_classes:
        raise ValueError(f"labels must lie in [0, {spec.num_classes})")


def unpack(params: np.ndarray, spec: ModelSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views ``(W, b)`` per layer into the flat vector; no copies are made."""
    layers = []
    offset = 0
    for n_in, n_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        W = params[offset:offset + n_in * n_out].reshape(n_out, n_in)
        offset += n_in * n_out
        b = params[offset:offset + n_out]
        offset += n_out
        layers.append((W, b))
    return layers


def pack(layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    return np.concatenate([np.concatenate([W.ravel(), b.ravel()]) for W, b in layers])


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for n_in, n_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        bound = np.sqrt(1.0 / n_in)
        layers.append((rng.uniform(-bound, bound, size=(n_out, n_in)), np.zeros(n_out)))
    return pack(layers)


def _act(z: np.ndarray, activation: str) -> np.ndarray:
    return np.tanh(z) if activation == "tanh" else np.maximum(z, 0.0)


def _act_d1(z: np.ndarray, a: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return 1.0 - a * a
    return (z > 0).astype(np.float64)


def _act_d2(z: np.ndarray, a: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return -2.0 * a * (1.0 - a * a)
    # relu: second derivative is zero almost everywhere.
    return np.zeros_like(z)


def _forward_cache(params, spec, inputs):
    """Returns pre-activations zs and activations acts (acts[0] is the input)."""
    acts = [inputs]
    zs = []
    layers = unpack(params, spec)
    for li, (W, b) in enumerate(layers):
        z = acts[-1] @ W.T + b
        zs.append(z)
        if li < len(layers) - 1:
            acts.append(_act(z, spec.activation))
    return layers, zs, acts


def forward(params: np.ndarray, spec: ModelSpec, inputs: np.ndarray) -> np.ndarray:
    params = check_params(params, spec)
    inputs = _check_inputs(inputs, spec)
    return _forward_cache(params, spec, inputs)[1][-1]


def layer_features(params: np.ndarray, spec: ModelSpec, inputs: np.ndarray, block_index: int) -> np.ndarray:
    """Post-activation output of hidden layer ``block_index``; the last index gives logits."""
    if not 0 <= block_index < spec.n_blocks:
        raise IndexError(f"block_index {block_index} outside [0, {spec.n_blocks})")
    params = check_params(params, spec)
    inputs = _check_inputs(inputs, spec)
    _, zs, acts = _forward_cache(params, spec, inputs)
    if block_index == spec.n_blocks - 1:
        return zs[-1]
    return acts[block_index + 1]


def _jvp_cache(layers, zs, acts, direction_layers, activation):
    """Forward-mode directional derivatives of every z and hidden activation."""
    r_acts = [np.zeros_like(acts[0])]
    r_zs = []
    n = len(layers)
    for li, ((W, _), (VW, Vb)) in enumerate(zip(layers, direction_layers)):
        rz = r_acts[-1] @ W.T + acts[li] @ VW.T + Vb
        r_zs.append(rz)
        if li < n - 1:
            r_acts.append(_act_d1(zs[li], acts[li + 1], activation) * rz)
    return r_zs, r_acts


def linearized_forward(params: np.ndarray, base_params: np.ndarray, spec: ModelSpec,
                       inputs: np.ndarray) -> np.ndarray:
    """f(base) + J(base) @ (params - base)."""
    params = check_params(params, spec)
    base_params = check_params(base_params, spec)
    inputs = _check_inputs(inputs, spec)
    if spec.is_linear:
        # Logits are affine in the parameters, so the expansion is the model itself.
        return _forward_cache(params, spec, inputs)[1][-1]
    layers, zs, acts = _forward_cache(base_params, spec, inputs)
    r_zs, _ = _jvp_cache(layers, zs, acts, unpack(params - base_params, spec), spec.activation)
    return zs[-1] + r_zs[-1]


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(lse - shifted[np.arange(len(labels)), labels]))


def predict_logits(params, spec, inputs, linearize_at=None) -> np.ndarray:
    if linearize_at is None:
        return forward(params, spec, inputs)
    return linearized_forward(params, linearize_at, spec, inputs)


def loss(params: np.ndarray, spec: ModelSpec, dataset: TaskDataset, linearize_at=None) -> float:
    """Mean cross-entropy of the softmax over logits."""
    _check_dataset(dataset, spec)
    return _cross_entropy(predict_logits(params, spec, dataset.features, linearize_at), dataset.labels)


def _backward(layers, acts, zs, delta, activation):
    """Reverse pass from d(loss)/d(logits) = delta to parameter gradients plus cached deltas."""
    grads = [None] * len(layers)
    deltas = [None] * len(layers)
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        deltas[li] = delta
        grads[li] = (delta.T @ acts[li], delta.sum(axis=0))
        if li > 0:
            delta = (delta @ W) * _act_d1(zs[li - 1], acts[li], activation)
    return grads, deltas


def _output_delta(logits, labels):
    p = _softmax(logits)
    p[np.arange(len(labels)), labels] -= 1.0
    return p / len(labels)


def gradient(params: np.ndarray, spec: ModelSpec, dataset: TaskDataset, linearize_at=None) -> np.ndarray:
    """Exact reverse-mode gradient of :func:`loss`."""
    params = check_params(params, spec)
    _check_dataset(dataset, spec)
    x, y = dataset.features, dataset.labels
    if linearize_at is None or spec.is_linear:
        layers, zs, acts = _forward_cache(params, spec, x)
        grads, _ = _backward(layers, acts, zs, _output_delta(zs[-1], y), spec.activation)
        return pack(grads)
    # Tangent model: logits are linear in params, so the gradient is J(base)^T delta.
    base = check_params(linearize_at, spec)
    layers, zs, acts = _forward_cache(base, spec, x)
    r_zs, _ = _jvp_cache(layers, zs, acts, unpack(params - base, spec), spec.activation)
    grads, _ = _backward(layers, acts, zs, _output_delta(zs[-1] + r_zs[-1], y), spec.activation)
    return pack(grads)


def _softmax_rop(p, rz):
    return p * (rz - (p * rz).sum(axis=1, keepdims=True))


def hvp(params: np.ndarray, spec: ModelSpec, dataset: TaskDataset, v: np.ndarray,
        linearize_at=None, method: str = "exact", fd_step: float = 1e-5) -> np.ndarray:
    """Hessian-vector product of :func:`loss`.

    ``method="exact"`` propagates the R-operator through forward and backward
    passes. ``method="fd"`` uses central differences of the gradient with step
    ``fd_step`` along ``v`` and exists for cross-checking.
    """
    params = check_params(params, spec)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != params.shape:
        raise ValueError(f"direction has shape {v.shape}, expected {params.shape}")
    _check_dataset(dataset, spec)
    if method == "fd":
        gp = gradient(params + fd_step * v, spec, dataset, linearize_at)
        gm = gradient(params - fd_step * v, spec, dataset, linearize_at)
        return (gp - gm) / (2.0 * fd_step)
    if method != "exact":
        raise ValueError(f"unknown hvp method {method!r}")

    x, y = dataset.features, dataset.labels
    n = len(y)
    act = spec.activation
    V = unpack(v, spec)

    if linearize_at is not None and not spec.is_linear:
        # Gauss-Newton form: the tangent model is linear in params.
        base = check_params(linearize_at, spec)
        layers, zs, acts = _forward_cache(base, spec, x)
        r_disp, _ = _jvp_cache(layers, zs, acts, unpack(params - base, spec), act)
        p = _softmax(zs[-1] + r_disp[-1])
        r_v, _ = _jvp_cache(layers, zs, acts, V, act)
        grads, _ = _backward(layers, acts, zs, _softmax_rop(p, r_v[-1]) / n, act)
        return pack(grads)

    layers, zs, acts = _forward_cache(params, spec, x)
    r_zs, r_acts = _jvp_cache(layers, zs, acts, V, act)
    p = _softmax(zs[-1])
    delta = p.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    r_delta = _softmax_rop(p, r_zs[-1]) / n

    out = [None] * len(layers)
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        VW, _ = V[li]
        out[li] = (r_delta.T @ acts[li] + delta.T @ r_acts[li], r_delta.sum(axis=0))
        if li > 0:
            d1 = _act_d1(zs[li - 1], acts[li], act)
            d2 = _act_d2(zs[li - 1], acts[li], act)
            back = delta @ W
            r_back = r_delta @ W + delta @ VW
            r_delta = r_back * d1 + back * d2 * r_zs[li - 1]
            delta = back * d1
    return pack(out)


def predictions(logits: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ``np.argmax`` returns the lowest index among ties."""
    return np.argmax(logits, axis=1)


def accuracy(params: np.ndarray, spec: ModelSpec, dataset: TaskDataset, linearize_at=None) -> float:
    _check_dataset(dataset, spec)
    preds = predictions(predict_logits(params, spec, dataset.features, linearize_at))
    return float(np.mean(preds == dataset.labels))


class Objective(Protocol):
    """A twice-differentiable scalar function of the flat parameter vector."""

    def loss(self, params: np.ndarray) -> float: ...

    def gradient(self, params: np.ndarray) -> np.ndarray: ...

    def hvp(self, params: np.ndarray, v: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class DatasetObjective:
    """Cross-entropy of an MLP on a fixed dataset."""

    spec: ModelSpec
    dataset: TaskDataset
    linearize_at: np.ndarray | None = None
    hvp_method: str = "exact"

    def loss(self, params):
        return loss(params, self.spec, self.dataset, self.linearize_at)

    def gradient(self, params):
        return gradient(params, self.spec, self.dataset, self.linearize_at)

    def hvp(self, params, v):
        return hvp(params, self.spec, self.dataset, v, self.linearize_at, self.hvp_method)


@dataclass(frozen=True)
class Quadratic:
    """``0.5 (theta - center)^T H (theta - center) + offset`` with symmetric ``H``."""

    hessian: np.ndarray
    center: np.ndarray | None = None
    offset: float = 0.0
    _c: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        H = np.asarray(self.hessian, dtype=np.float64)
        object.__setattr__(self, "hessian", H)
        c = np.zeros(H.shape[0]) if self.center is None else np.asarray(self.center, dtype=np.float64)
        object.__setattr__(self, "_c", c)

    def loss(self, params):
        d = np.asarray(params, dtype=np.float64) - self._c
        return float(0.5 * d @ self.hessian @ d + self.offset)

    def gradient(self, params):
        return self.hessian @ (np.asarray(params, dtype=np.float64) - self._c)

    def hvp(self, params, v):
        return self.hessian @ np.asarray(v, dtype=np.float64)
