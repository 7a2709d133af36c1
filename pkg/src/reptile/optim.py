"""Inner-loop SGD/Adam and the annealed outer step.

Optimizer states are small frozen records; every step returns a new state,
so cloning a state for a parallel task is just passing it along.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import ContractError, DivergenceError, ParamVector


def _check_grad(phi, g):
    if phi.shape != g.shape:
        raise ContractError(f"dimension mismatch: {phi.shape} vs {g.shape}")
    if not np.all(np.isfinite(g)):
        raise DivergenceError("non-finite gradient")


@dataclass(frozen=True)
class SgdState:
    step_size: float

    def __post_init__(self):
        if not self.step_size >= 0:
            raise ContractError("SGD step size must be non-negative")

    kind = "sgd"


def sgd_step(state: SgdState, phi: ParamVector, g: ParamVector) -> ParamVector:
    phi = np.asarray(phi, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    _check_grad(phi, g)
    return phi - state.step_size * g


@dataclass(frozen=True)
class AdamState:
    step_size: float
    dim: int
    beta1: float = 0.0
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    kind = "adam"

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractError("Adam betas must lie in [0, 1)")
        if self.step_size <= 0 or self.eps <= 0:
            raise ContractError("Adam step size and epsilon must be positive")
        if self.m is None:
            object.__setattr__(self, "m", np.zeros(self.dim))
        if self.v is None:
            object.__setattr__(self, "v", np.zeros(self.dim))
        if self.m.shape != (self.dim,) or self.v.shape != (self.dim,):
            raise ContractError("Adam moments do not match the model dimension")


def adam_step(state: AdamState, phi: ParamVector, g: ParamVector) -> tuple[ParamVector, AdamState]:
    phi = np.asarray(phi, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    _check_grad(phi, g)
    if phi.shape != (state.dim,):
        raise ContractError("parameter vector does not match the Adam state")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_phi = phi - state.step_size * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_phi, replace(state, m=m, v=v, t=t)


def optimizer_step(state, phi, g):
    """Dispatch on state type; always returns ``(phi, state)``."""
    if isinstance(state, SgdState):
        return sgd_step(state, phi, g), state
    return adam_step(state, phi, g)


def snapshot(state) -> dict:
    """Opaque copy of an optimizer state."""
    if isinstance(state, SgdState):
        return {"kind": "sgd", "step_size": state.step_size}
    return {
        "kind": "adam",
        "step_size": state.step_size,
        "dim": state.dim,
        "beta1": state.beta1,
        "beta2": state.beta2,
        "eps": state.eps,
        "m": state.m.copy(),
        "v": state.v.copy(),
        "t": state.t,
    }


def restore(blob: dict, dim: int | None = None):
    if blob["kind"] == "sgd":
        return SgdState(blob["step_size"])
    if dim is not None and blob["dim"] != dim:
        raise ContractError(f"snapshot is for dim {blob['dim']}, model has dim {dim}")
    fields = {k: blob[k] for k in ("step_size", "dim", "beta1", "beta2", "eps", "t")}
    return AdamState(m=blob["m"].copy(), v=blob["v"].copy(), **fields)


def average_states(states):
    """Merge per-task Adam clones back into one persistent state.

    Moments are averaged in list order; SGD states carry nothing to merge.
    """
    first = states[0]
    if isinstance(first, SgdState):
        return first
    m = np.mean([s.m for s in states], axis=0)
    v = np.mean([s.v for s in states], axis=0)
    return replace(first, m=m, v=v, t=max(s.t for s in states))


@dataclass(frozen=True)
class OuterSchedule:
    """Outer step size annealed linearly from ``initial`` to zero.

    ``total_iters=0`` is allowed and means no outer updates at all.
    """

    initial: float
    total_iters: int

    def __post_init__(self):
        if self.total_iters < 0:
            raise ContractError("total_iters must be non-negative")
        if self.initial < 0:
            raise ContractError("outer step size must be non-negative")

    def step_size(self, it: int) -> float:
        if not 0 <= it < self.total_iters:
            raise ContractError(f"iteration {it} outside schedule of {self.total_iters}")
        return self.initial * (1.0 - it / self.total_iters)


def outer_step(phi: ParamVector, direction: ParamVector, schedule: OuterSchedule, it: int) -> ParamVector:
    if not 0 <= it < schedule.total_iters:
        raise ContractError(f"iteration {it} outside schedule of {schedule.total_iters}")
    phi = np.asarray(phi, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if phi.shape != direction.shape:
        raise ContractError("dimension mismatch")
    return phi + schedule.step_size(it) * direction
