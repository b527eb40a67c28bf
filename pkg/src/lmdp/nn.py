"""Dense layered networks with IR capture and exact per-example gradients.

Every layer owns one flat parameter block laid out as ``[W.ravel(), b]`` with
``W`` of shape ``(out_dim, in_dim)``. Gradients use the same layout, so the
layer-wise clipping code only ever sees a list of 1-D vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from lmdp.errors import ConfigError, DivergenceError, EmptyBatchError, ShapeError

ACTIVATIONS = ("relu", "tanh", "identity", "softmax")
LOSSES = ("cross-entropy", "mse")

_ALIASES = {"softmax-output": "softmax", "linear": "identity", "ce": "cross-entropy"}


def _canonical(name: str) -> str:
    return _ALIASES.get(name, name)


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "activation", _canonical(self.activation))
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigError(f"layer dims must be >= 1, got {self.in_dim}x{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def size(self) -> int:
        return self.out_dim * self.in_dim + self.out_dim


class LayeredModel:
    """Feedforward network partitioned into ``L`` parameter blocks."""

    def __init__(self, layers: Sequence[LayerSpec], blocks: Sequence[np.ndarray]):
        layers = list(layers)
        if not layers:
            raise ConfigError("a model needs at least one layer")
        for l, (a, b) in enumerate(zip(layers[:-1], layers[1:])):
            if a.out_dim != b.in_dim:
                raise ConfigError(f"layer {l} out_dim {a.out_dim} != layer {l + 1} in_dim {b.in_dim}")
        for l, spec in enumerate(layers[:-1]):
            if spec.activation == "softmax":
                raise ConfigError(f"softmax is only allowed on the final layer (found on layer {l})")
        if len(blocks) != len(layers):
            raise ShapeError(f"expected {len(layers)} parameter blocks, got {len(blocks)}")
        self.layers = layers
        self.blocks = []
        for spec, block in zip(layers, blocks):
            block = np.array(block, dtype=np.float64).reshape(-1)
            if block.size != spec.size:
                raise ShapeError(f"block of size {block.size} does not fit layer {spec}")
            self.blocks.append(block)

    @classmethod
    def initialize(cls, layers: Sequence[LayerSpec], rng: np.random.Generator) -> "LayeredModel":
        blocks = []
        for spec in layers:
            gain = 2.0 if spec.activation == "relu" else 1.0
            w = rng.normal(0.0, np.sqrt(gain / spec.in_dim), size=(spec.out_dim, spec.in_dim))
            blocks.append(np.concatenate([w.ravel(), np.zeros(spec.out_dim)]))
        return cls(layers, blocks)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def num_params(self) -> int:
        return sum(s.size for s in self.layers)

    def weight(self, l: int) -> np.ndarray:
        spec = self.layers[l]
        return self.blocks[l][: spec.out_dim * spec.in_dim].reshape(spec.out_dim, spec.in_dim)

    def bias(self, l: int) -> np.ndarray:
        spec = self.layers[l]
        return self.blocks[l][spec.out_dim * spec.in_dim :]

    def copy(self) -> "LayeredModel":
        return LayeredModel(self.layers, [b.copy() for b in self.blocks])

    def with_blocks(self, blocks: Sequence[np.ndarray]) -> "LayeredModel":
        return LayeredModel(self.layers, blocks)

    def flat(self) -> np.ndarray:
        return np.concatenate(self.blocks)

    def __eq__(self, other):
        if not isinstance(other, LayeredModel):
            return NotImplemented
        return self.layers == other.layers and all(
            np.array_equal(a, b) for a, b in zip(self.blocks, other.blocks)
        )

    def forward(self, X: np.ndarray) -> np.ndarray:
        return self.activations(X)[-1]

    def activations(self, X: np.ndarray) -> list[np.ndarray]:
        """Post-activation outputs of every layer for a batch ``X`` of shape (B, in_dim)."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.in_dim:
            raise ShapeError(f"expected input of shape (B, {self.in_dim}), got {X.shape}")
        outs = []
        a = X
        for l, spec in enumerate(self.layers):
            a = _activate(a @ self.weight(l).T + self.bias(l), spec.activation)
            outs.append(a)
        return outs

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(X), axis=1)


def mlp(dims: Sequence[int], rng: np.random.Generator, hidden: str = "relu",
        output: str = "softmax") -> LayeredModel:
    """Build a freshly initialised MLP, e.g. ``mlp([2, 16, 16, 3], rng)``."""
    if len(dims) < 2:
        raise ConfigError("need at least input and output dims")
    layers = [LayerSpec(dims[i], dims[i + 1], hidden) for i in range(len(dims) - 2)]
    layers.append(LayerSpec(dims[-2], dims[-1], output))
    return LayeredModel.initialize(layers, rng)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "tanh":
        return np.tanh(z)
    if activation == "identity":
        return z
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _activation_grad(z: np.ndarray, a: np.ndarray, activation: str) -> np.ndarray:
    # elementwise derivative; softmax never reaches here (handled with its loss)
    if activation == "relu":
        return (z > 0).astype(np.float64)
    if activation == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


@dataclass
class IRCapture:
    per_layer: list[np.ndarray]

    def __len__(self):
        return len(self.per_layer)

    def __getitem__(self, l):
        return self.per_layer[l]


def forward_with_irs(model: LayeredModel, x) -> tuple[np.ndarray, IRCapture]:
    """Forward a single example and keep every post-activation layer output."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.in_dim:
        raise ShapeError(f"expected input of length {model.in_dim}, got shape {x.shape}")
    acts = model.activations(x[None, :])
    irs = IRCapture([a[0].copy() for a in acts])
    return irs.per_layer[-1].copy(), irs


def _check_loss(model: LayeredModel, loss: str) -> str:
    loss = _canonical(loss)
    if loss not in LOSSES:
        raise ConfigError(f"unknown loss {loss!r}")
    final = model.layers[-1].activation
    if loss == "cross-entropy" and final != "softmax":
        raise ConfigError("cross-entropy requires a softmax output layer")
    if loss == "mse" and final == "softmax":
        raise ConfigError("mse is not paired with a softmax output layer; use cross-entropy")
    return loss


def _targets(model: LayeredModel, Y, loss: str, batch: int) -> np.ndarray:
    """Return (B, out_dim) float targets; integer labels become one-hot."""
    Y = np.asarray(Y)
    if Y.ndim == 1 and (loss == "cross-entropy" or np.issubdtype(Y.dtype, np.integer)):
        if Y.shape[0] != batch:
            raise ShapeError(f"got {Y.shape[0]} labels for {batch} inputs")
        labels = Y.astype(np.int64)
        if labels.min(initial=0) < 0 or labels.max(initial=0) >= model.out_dim:
            raise ShapeError(f"labels must lie in [0, {model.out_dim})")
        T = np.zeros((batch, model.out_dim))
        T[np.arange(batch), labels] = 1.0
        return T
    T = np.asarray(Y, dtype=np.float64).reshape(batch, -1)
    if T.shape[1] != model.out_dim:
        raise ShapeError(f"targets of width {T.shape[1]} for output width {model.out_dim}")
    return T


def loss_values(model: LayeredModel, X, Y, loss: str = "cross-entropy") -> np.ndarray:
    """Per-example loss values."""
    loss = _check_loss(model, loss)
    out = model.forward(X)
    T = _targets(model, Y, loss, out.shape[0])
    if loss == "cross-entropy":
        return -np.log(np.maximum(np.sum(out * T, axis=1), 1e-300))
    return 0.5 * np.sum((out - T) ** 2, axis=1)


def accuracy(model: LayeredModel, X, y) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(model.predict(X) == np.asarray(y)))


@dataclass
class PerExampleGradient:
    """Gradient of one example's loss, one flat block per layer."""

    blocks: list[np.ndarray]
    layer_norms: np.ndarray = field(init=False)
    global_norm: float = field(init=False)

    def __post_init__(self):
        self.blocks = [np.asarray(b, dtype=np.float64) for b in self.blocks]
        self.layer_norms = np.array([np.sqrt(np.dot(b, b)) for b in self.blocks])
        self.global_norm = float(np.sqrt(np.sum(self.layer_norms**2)))

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def flat(self) -> np.ndarray:
        return np.concatenate(self.blocks)


@dataclass
class GradientBatch:
    """Per-example gradients for a whole batch: block ``l`` has shape (B, size_l)."""

    blocks: list[np.ndarray]
    layer_norms: np.ndarray = field(init=False)
    global_norms: np.ndarray = field(init=False)

    def __post_init__(self):
        self.blocks = [np.asarray(b, dtype=np.float64) for b in self.blocks]
        sizes = {b.shape[0] for b in self.blocks}
        if len(sizes) != 1:
            raise ShapeError("all blocks must share the batch dimension")
        # row-wise dot products, the same reduction PerExampleGradient uses
        self.layer_norms = np.array([[np.sqrt(np.dot(row, row)) for row in b] for b in self.blocks]).T.reshape(
            -1, len(self.blocks))
        self.global_norms = np.sqrt(np.sum(self.layer_norms**2, axis=1))

    @classmethod
    def from_list(cls, grads: Sequence[PerExampleGradient]) -> "GradientBatch":
        if not grads:
            raise EmptyBatchError("cannot build a gradient batch from an empty list")
        depth = grads[0].depth
        return cls([np.stack([g.blocks[l] for g in grads]) for l in range(depth)])

    def __len__(self) -> int:
        return self.blocks[0].shape[0]

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def __getitem__(self, i: int) -> PerExampleGradient:
        return PerExampleGradient([b[i] for b in self.blocks])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def mean(self) -> PerExampleGradient:
        if len(self) == 0:
            raise EmptyBatchError("mean of an empty gradient batch")
        return PerExampleGradient([_ordered_sum(b) / b.shape[0] for b in self.blocks])


def _ordered_sum(rows: np.ndarray) -> np.ndarray:
    # sequential accumulation in ascending example order keeps results bitwise reproducible
    acc = rows[0].copy()
    for row in rows[1:]:
        acc += row
    return acc


def per_example_gradient(model: LayeredModel, x, y, loss: str = "cross-entropy") -> PerExampleGradient:
    """Exact gradient of a single example's loss by one backward pass."""
    loss = _check_loss(model, loss)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.in_dim:
        raise ShapeError(f"expected input of length {model.in_dim}, got shape {x.shape}")
    target = _targets(model, np.atleast_1d(y) if np.ndim(y) == 0 else np.asarray(y)[None, ...],
                      loss, 1)[0]

    inputs, pre, post = [], [], []
    a = x
    for l, spec in enumerate(model.layers):
        inputs.append(a)
        z = model.weight(l) @ a + model.bias(l)
        a = _activate(z, spec.activation)
        pre.append(z)
        post.append(a)

    if loss == "cross-entropy":
        delta = post[-1] - target
    else:
        delta = (post[-1] - target) * _activation_grad(pre[-1], post[-1], model.layers[-1].activation)

    blocks = [None] * model.depth
    for l in range(model.depth - 1, -1, -1):
        blocks[l] = np.concatenate([np.outer(delta, inputs[l]).ravel(), delta])
        if l > 0:
            delta = (model.weight(l).T @ delta) * _activation_grad(
                pre[l - 1], post[l - 1], model.layers[l - 1].activation)
    return PerExampleGradient(blocks)


def _backward(model: LayeredModel, X, Y, loss: str):
    """Batched backward pass; yields ``(l, delta_l, input_l)`` from the last layer down."""
    loss = _check_loss(model, loss)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.in_dim:
        raise ShapeError(f"expected input of shape (B, {model.in_dim}), got {X.shape}")
    T = _targets(model, Y, loss, X.shape[0])

    inputs, pre, post = [], [], []
    a = X
    for l, spec in enumerate(model.layers):
        inputs.append(a)
        z = a @ model.weight(l).T + model.bias(l)
        a = _activate(z, spec.activation)
        pre.append(z)
        post.append(a)

    if loss == "cross-entropy":
        delta = post[-1] - T
    else:
        delta = (post[-1] - T) * _activation_grad(pre[-1], post[-1], model.layers[-1].activation)

    for l in range(model.depth - 1, -1, -1):
        yield l, delta, inputs[l]
        if l > 0:
            delta = (delta @ model.weight(l)) * _activation_grad(
                pre[l - 1], post[l - 1], model.layers[l - 1].activation)


def per_example_gradients(model: LayeredModel, X, Y, loss: str = "cross-entropy") -> GradientBatch:
    """Per-example gradients for a batch, computed with one vectorised backward pass.

    Row ``i`` of every block equals ``per_example_gradient(model, X[i], Y[i])``;
    nothing is summed across examples before the blocks are formed.
    """
    blocks = [None] * model.depth
    for l, delta, inp in _backward(model, X, Y, loss):
        B = delta.shape[0]
        dW = (delta[:, :, None] * inp[:, None, :]).reshape(B, -1)
        blocks[l] = np.concatenate([dW, delta], axis=1)
    return GradientBatch(blocks)


def batch_mean_gradient(grads) -> PerExampleGradient:
    """Element-wise mean of per-example gradients, reduced in ascending index order."""
    if isinstance(grads, GradientBatch):
        return grads.mean()
    grads = list(grads)
    if not grads:
        raise EmptyBatchError("cannot average an empty list of gradients")
    depth = grads[0].depth
    if any(g.depth != depth for g in grads):
        raise ShapeError("gradients have different layer counts")
    blocks = []
    for l in range(depth):
        acc = grads[0].blocks[l].copy()
        for g in grads[1:]:
            if g.blocks[l].shape != acc.shape:
                raise ShapeError(f"layer {l} blocks differ in shape")
            acc += g.blocks[l]
        blocks.append(acc / len(grads))
    return PerExampleGradient(blocks)


def mean_loss_gradient(model: LayeredModel, X, Y, loss: str = "cross-entropy") -> list[np.ndarray]:
    """Gradient of the mean batch loss, used by plain (non-private) SGD."""
    blocks = [None] * model.depth
    for l, delta, inp in _backward(model, X, Y, loss):
        B = delta.shape[0]
        blocks[l] = np.concatenate([(delta.T @ inp).ravel() / B, delta.sum(axis=0) / B])
    return blocks


def sgd_fit(model: LayeredModel, X, y, *, epochs: int, batch_size: int, lr: float,
            rng: np.random.Generator, loss: str = "cross-entropy") -> tuple[LayeredModel, list[float]]:
    """Plain mini-batch SGD over shuffled epochs; returns the model and per-epoch mean loss."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    model = model.copy()
    n = X.shape[0]
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            with np.errstate(over="ignore", invalid="ignore"):
                grads = mean_loss_gradient(model, X[idx], y[idx], loss)
                for block, g in zip(model.blocks, grads):
                    block -= lr * g
        with np.errstate(over="ignore", invalid="ignore"):
            epoch_loss = float(np.mean(loss_values(model, X, y, loss)))
        if not np.isfinite(epoch_loss) or not all(np.all(np.isfinite(b)) for b in model.blocks):
            raise DivergenceError(f"non-finite loss at epoch {epoch}", index=epoch)
        history.append(epoch_loss)
    return model, history
