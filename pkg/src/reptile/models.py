"""Fully-connected networks over a flat parameter vector.

Parameters are laid out layer by layer: the ``(n_in, n_out)`` weight matrix
in row-major order followed by the ``n_out`` biases. ``MlpLoss`` computes the
batch-mean loss, its gradient by backpropagation and exact Hessian-vector
products by pushing a directional derivative through the forward and
backward passes (Pearlmutter's R-operator).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import ContractError, DivergenceError, ParamVector, RngStream

ACTIVATIONS = ("tanh", "relu")
OUTPUTS = ("linear", "softmax")


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    activation: str = "tanh"
    output: str = "linear"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ContractError(f"invalid layer sizes {sizes}")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"activation must be one of {ACTIVATIONS}")
        if self.output not in OUTPUTS:
            raise ContractError(f"output must be one of {OUTPUTS}")
        if self.output == "softmax" and sizes[-1] < 2:
            raise ContractError("softmax output needs at least 2 classes")

    @property
    def n_params(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def unpack(self, phi: ParamVector) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views (no copies) of each layer's weights and biases."""
        phi = np.asarray(phi, dtype=np.float64)
        if phi.shape != (self.n_params,):
            raise ContractError(f"expected {self.n_params} parameters, got {phi.shape}")
        layers = []
        pos = 0
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            W = phi[pos:pos + n_in * n_out].reshape(n_in, n_out)
            pos += n_in * n_out
            b = phi[pos:pos + n_out]
            pos += n_out
            layers.append((W, b))
        return layers


@dataclass(frozen=True)
class Dataset:
    """Labelled examples with stable integer ids."""

    inputs: np.ndarray
    targets: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        if len(self.inputs) != len(self.targets) or len(self.inputs) != len(self.ids):
            raise ContractError("inputs, targets and ids must have equal length")

    def __len__(self) -> int:
        return len(self.ids)

    def take(self, indices: Sequence[int]) -> "Minibatch":
        idx = np.asarray(indices, dtype=np.intp)
        return Minibatch(self.inputs[idx], self.targets[idx], self.ids[idx])

    def as_batch(self) -> "Minibatch":
        return Minibatch(self.inputs, self.targets, self.ids)


@dataclass(frozen=True)
class Minibatch:
    inputs: np.ndarray
    targets: np.ndarray
    sample_ids: np.ndarray
    duplicates: bool = field(init=False)

    def __post_init__(self):
        if len(self.sample_ids) < 1:
            raise ContractError("a minibatch needs at least one example")
        object.__setattr__(self, "duplicates", len(np.unique(self.sample_ids)) != len(self.sample_ids))

    def __len__(self) -> int:
        return len(self.sample_ids)


def mlp_init(spec: MlpSpec, rng: RngStream) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    gen = rng.generator()
    parts = []
    for n_in, n_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        limit = np.sqrt(6.0 / (n_in + n_out))
        parts.append(gen.uniform(-limit, limit, size=n_in * n_out))
        parts.append(np.zeros(n_out))
    return np.concatenate(parts)


def _act(name, z):
    if name == "tanh":
        a = np.tanh(z)
        d1 = 1.0 - a * a
        return a, d1, -2.0 * a * d1
    a = np.maximum(z, 0.0)
    d1 = (z > 0).astype(np.float64)
    return a, d1, np.zeros_like(z)


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward(spec: MlpSpec, layers, x):
    """Return per-layer inputs, activation derivatives and the final pre-activation."""
    acts = [x]
    d1s, d2s = [], []
    a = x
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        z = a @ W + b
        if i == last:
            return acts, d1s, d2s, z
        a, d1, d2 = _act(spec.activation, z)
        acts.append(a)
        d1s.append(d1)
        d2s.append(d2)
    raise AssertionError("unreachable")


def mlp_predict(spec: MlpSpec, phi: ParamVector, inputs) -> np.ndarray:
    """Network outputs; class probabilities when the output is softmax."""
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if x.shape[1] != spec.in_dim:
        raise ContractError(f"inputs have {x.shape[1]} features, network expects {spec.in_dim}")
    _, _, _, z = _forward(spec, spec.unpack(phi), x)
    return _softmax(z) if spec.output == "softmax" else z


def predict_class(spec: MlpSpec, phi: ParamVector, inputs) -> np.ndarray:
    # argmax returns the first maximum, so ties go to the lowest class index
    return np.argmax(mlp_predict(spec, phi, inputs), axis=1)


class MlpLoss:
    """Batch-mean loss of an MLP bound to one minibatch.

    Regression uses the mean over the batch of the summed squared error per
    example; classification uses mean cross-entropy on integer labels.
    """

    def __init__(self, spec: MlpSpec, batch: Minibatch):
        self.spec = spec
        self.batch = batch
        self.x = np.atleast_2d(np.asarray(batch.inputs, dtype=np.float64))
        if self.x.shape[1] != spec.in_dim:
            raise ContractError("batch inputs do not match the network input size")
        if spec.output == "softmax":
            labels = np.asarray(batch.targets, dtype=np.intp).reshape(-1)
            if labels.min() < 0 or labels.max() >= spec.out_dim:
                raise ContractError("class label out of range")
            self.labels = labels
            self.onehot = np.eye(spec.out_dim)[labels]
        else:
            self.y = np.asarray(batch.targets, dtype=np.float64).reshape(len(self.x), spec.out_dim)

    def _out_delta(self, z):
        n = len(self.x)
        if self.spec.output == "softmax":
            p = _softmax(z)
            return p, (p - self.onehot) / n
        return None, 2.0 * (z - self.y) / n

    def _loss_from(self, z) -> float:
        if self.spec.output == "softmax":
            zs = z - z.max(axis=1, keepdims=True)
            logz = np.log(np.exp(zs).sum(axis=1))
            val = float(np.mean(logz - zs[np.arange(len(zs)), self.labels]))
        else:
            val = float(np.mean(np.sum((z - self.y) ** 2, axis=1)))
        if not np.isfinite(val):
            raise DivergenceError("non-finite loss in forward pass")
        return val

    def value(self, phi):
        _, _, _, z = _forward(self.spec, self.spec.unpack(phi), self.x)
        return self._loss_from(z)

    def value_and_grad(self, phi):
        layers = self.spec.unpack(phi)
        acts, d1s, _, z = _forward(self.spec, layers, self.x)
        val = self._loss_from(z)
        _, delta = self._out_delta(z)
        grads = [None] * len(layers)
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
            if i > 0:
                delta = (delta @ W.T) * d1s[i - 1]
        return val, np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])

    def grad(self, phi):
        return self.value_and_grad(phi)[1]

    def hvp(self, phi, v):
        spec = self.spec
        layers = spec.unpack(phi)
        vlayers = spec.unpack(v)
        acts, d1s, d2s, z = _forward(spec, layers, self.x)

        # forward directional derivatives of pre-activations and activations
        r_acts = [np.zeros_like(self.x)]
        r_zs = []
        for i, ((W, b), (VW, Vb)) in enumerate(zip(layers, vlayers)):
            rz = r_acts[i] @ W + acts[i] @ VW + Vb
            r_zs.append(rz)
            if i < len(layers) - 1:
                r_acts.append(d1s[i] * rz)

        n = len(self.x)
        p, delta = self._out_delta(z)
        rz = r_zs[-1]
        if spec.output == "softmax":
            r_delta = p * (rz - np.sum(p * rz, axis=1, keepdims=True)) / n
        else:
            r_delta = 2.0 * rz / n

        out = [None] * len(layers)
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            VW, _ = vlayers[i]
            out[i] = (r_acts[i].T @ delta + acts[i].T @ r_delta, r_delta.sum(axis=0))
            if i > 0:
                back = delta @ W.T
                r_back = r_delta @ W.T + delta @ VW.T
                r_delta = r_back * d1s[i - 1] + back * d2s[i - 1] * r_zs[i - 1]
                delta = back * d1s[i - 1]
        return np.concatenate([np.concatenate([a.ravel(), b]) for a, b in out])


def mlp_loss(spec: MlpSpec, phi: ParamVector | None, batch: Minibatch) -> MlpLoss:
    """Loss bound to ``batch``; ``phi`` (if given) is only checked for shape."""
    if phi is not None and np.asarray(phi).shape != (spec.n_params,):
        raise ContractError(f"expected {spec.n_params} parameters")
    return MlpLoss(spec, batch)
