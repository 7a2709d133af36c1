"""Flat parameter vectors, seeded RNG streams and the differentiable-loss interface.

Every model in the package exposes its state as one dense float64 vector.
Losses are objects with ``value``, ``grad`` and ``hvp`` methods; the finite
difference helpers here are the oracles the analytic derivatives are
checked against.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

ParamVector = np.ndarray

FD_GRAD_STEP = 1e-5
FD_HVP_STEP = 1e-4


class ContractError(ValueError):
    """A precondition of a public operation was violated."""


class OracleError(ArithmeticError):
    """A finite-difference oracle hit a non-finite value."""


class DivergenceError(ArithmeticError):
    """An optimization produced non-finite numbers."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


def as_params(values, dim: int | None = None) -> ParamVector:
    """Copy ``values`` into a finite 1-D float64 vector, optionally checking its length."""
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if dim is not None and arr.shape[0] != dim:
        raise ContractError(f"expected dim {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ContractError("parameter vector has non-finite entries")
    return arr


def _check_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ContractError(f"dimension mismatch: {a.shape} vs {b.shape}")


def dot(a: ParamVector, b: ParamVector) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_dims(a, b)
    return float(a @ b)


def axpy(y: ParamVector, alpha: float, x: ParamVector) -> ParamVector:
    """Return ``y + alpha * x`` as a new vector."""
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    _check_dims(y, x)
    return y + alpha * x


@dataclass(frozen=True)
class RngStream:
    """A named, splittable random stream.

    Draws depend only on ``(seed, stream_id, key)``, never on the order in
    which streams are created or consumed, so parallel workers that each own
    a child stream reproduce the serial result exactly.
    """

    seed: int
    stream_id: int = 0
    key: tuple[int, ...] = field(default=())

    def child(self, *ids: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.key + tuple(int(i) for i in ids))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,) + self.key)
        return np.random.Generator(np.random.PCG64(ss))


@runtime_checkable
class DifferentiableLoss(Protocol):
    def value(self, phi: ParamVector) -> float: ...

    def grad(self, phi: ParamVector) -> ParamVector: ...

    def hvp(self, phi: ParamVector, v: ParamVector) -> ParamVector: ...


@dataclass(frozen=True)
class QuadraticLoss:
    """``L(phi) = 0.5 (phi - c)^T A (phi - c)`` with symmetric PSD ``A``.

    Third derivatives vanish, which makes every Taylor expansion in the
    analysis code exact and gives closed forms to test against.
    """

    A: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        c = np.asarray(self.c, dtype=np.float64).reshape(-1)
        if A.shape != (c.size, c.size):
            raise ContractError(f"A has shape {A.shape}, center has dim {c.size}")
        if not np.allclose(A, A.T, atol=1e-12, rtol=0):
            raise ContractError("A must be symmetric")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "c", c)

    @property
    def dim(self) -> int:
        return self.c.size

    def value(self, phi):
        r = np.asarray(phi, dtype=np.float64) - self.c
        return 0.5 * float(r @ self.A @ r)

    def grad(self, phi):
        phi = np.asarray(phi, dtype=np.float64)
        _check_dims(phi, self.c)
        return self.A @ (phi - self.c)

    def hvp(self, phi, v):
        v = np.asarray(v, dtype=np.float64)
        _check_dims(v, self.c)
        return self.A @ v


def quadratic_grad(loss: QuadraticLoss, phi: ParamVector) -> ParamVector:
    return loss.grad(phi)


class MeanLoss:
    """Average of several losses over the same parameter vector."""

    def __init__(self, losses: Sequence[DifferentiableLoss]):
        if not losses:
            raise ContractError("MeanLoss needs at least one loss")
        self.losses = list(losses)

    def value(self, phi):
        return float(np.mean([l.value(phi) for l in self.losses]))

    def grad(self, phi):
        return np.mean([l.grad(phi) for l in self.losses], axis=0)

    def hvp(self, phi, v):
        return np.mean([l.hvp(phi, v) for l in self.losses], axis=0)


class FunctionLoss:
    """Wrap plain callables; ``hvp`` is optional."""

    def __init__(self, value, grad, hvp=None):
        self._value, self._grad, self._hvp = value, grad, hvp

    def value(self, phi):
        return float(self._value(np.asarray(phi, dtype=np.float64)))

    def grad(self, phi):
        return np.asarray(self._grad(np.asarray(phi, dtype=np.float64)), dtype=np.float64)

    def hvp(self, phi, v):
        if self._hvp is None:
            raise NotImplementedError("this loss has no Hessian-vector product")
        return np.asarray(self._hvp(np.asarray(phi, dtype=np.float64), np.asarray(v, dtype=np.float64)))


def fd_grad(loss: DifferentiableLoss, phi: ParamVector, h: float = FD_GRAD_STEP) -> ParamVector:
    """Central-difference gradient, one coordinate at a time."""
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    phi = np.array(phi, dtype=np.float64)
    out = np.empty_like(phi)
    for i in range(phi.size):
        orig = phi[i]
        phi[i] = orig + h
        up = loss.value(phi)
        phi[i] = orig - h
        down = loss.value(phi)
        phi[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise OracleError(f"non-finite loss while differencing coordinate {i}")
        out[i] = (up - down) / (2 * h)
    return out


def fd_hvp(loss: DifferentiableLoss, phi: ParamVector, v: ParamVector, h: float = FD_HVP_STEP) -> ParamVector:
    """Central difference of the gradient along ``v``."""
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    phi = np.asarray(phi, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    _check_dims(phi, v)
    out = (loss.grad(phi + h * v) - loss.grad(phi - h * v)) / (2 * h)
    if not np.all(np.isfinite(out)):
        raise OracleError("non-finite gradient in HVP differencing")
    return out
