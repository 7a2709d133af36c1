"""k-step task adaptation with recorded trajectories and minibatch sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .core import ContractError, DifferentiableLoss, DivergenceError, ParamVector, RngStream
from .models import Dataset, Minibatch
from .optim import AdamState, SgdState, optimizer_step

SAMPLING_MODES = ("cycle", "replacement")
TAIL_MODES = ("shared", "separate")


class Task(Protocol):
    train: Dataset
    tail: Dataset | None

    def loss(self, batch: Minibatch) -> DifferentiableLoss: ...


@dataclass(frozen=True)
class InnerLoopConfig:
    """How a task is adapted to.

    ``k`` counts every step, including the last one. With ``tail='separate'``
    the k-th batch comes from the task's held-out tail split instead of its
    training data, so the first k-1 steps never see it.
    """

    k: int
    batch_size: int
    step_size: float = 0.02
    optimizer: str = "sgd"
    sampling: str = "cycle"
    tail: str = "shared"
    beta1: float = 0.0
    beta2: float = 0.999
    adam_eps: float = 1e-8
    record_trajectory: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ContractError("inner loop needs k >= 1")
        if self.batch_size < 1:
            raise ContractError("batch_size must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if self.sampling not in SAMPLING_MODES:
            raise ContractError(f"sampling must be one of {SAMPLING_MODES}")
        if self.tail not in TAIL_MODES:
            raise ContractError(f"tail must be one of {TAIL_MODES}")

    def initial_state(self, dim: int):
        if self.optimizer == "sgd":
            return SgdState(self.step_size)
        return AdamState(self.step_size, dim, beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps)


@dataclass
class Trajectory:
    """Record of one inner loop.

    ``iterates`` holds phi_1..phi_{k+1} when recording is on; otherwise only
    the first, second-to-last and last iterates are kept (``start``,
    ``before_last``, ``end``). Gradients are always kept.
    """

    start: ParamVector
    before_last: ParamVector
    end: ParamVector
    gradients: np.ndarray
    batches: list[Minibatch]
    losses: list[DifferentiableLoss]
    optimizer_kind: str
    step_size: float
    loss_values: np.ndarray
    iterates: np.ndarray | None = None
    final_state: object = field(default=None, repr=False)

    @property
    def k(self) -> int:
        return len(self.gradients)

    @property
    def displacements(self) -> np.ndarray:
        """Per-step parameter changes phi_{i+1} - phi_i (needs a recorded trajectory)."""
        if self.iterates is None:
            raise ContractError("trajectory was not recorded")
        return np.diff(self.iterates, axis=0)


def overlap_fraction(b1: Minibatch, b2: Minibatch) -> float:
    ids1 = set(np.asarray(b1.sample_ids).tolist())
    ids2 = set(np.asarray(b2.sample_ids).tolist())
    return len(ids1 & ids2) / len(ids1)


def _cycle_indices(n: int, batch_size: int, count: int, gen: np.random.Generator) -> list[np.ndarray]:
    # a fresh permutation is drawn whenever the current one runs out
    out = []
    perm = gen.permutation(n)
    pos = 0
    for _ in range(count):
        need = batch_size
        parts = []
        while need > 0:
            if pos == n:
                perm = gen.permutation(n)
                pos = 0
            take = min(need, n - pos)
            parts.append(perm[pos:pos + take])
            pos += take
            need -= take
        out.append(np.concatenate(parts))
    return out


def _replacement_indices(n: int, batch_size: int, count: int, gen: np.random.Generator) -> list[np.ndarray]:
    if batch_size > n:
        raise ContractError(f"batch of {batch_size} cannot be drawn from {n} examples without repeats")
    return [gen.choice(n, size=batch_size, replace=False) for _ in range(count)]


def sample_batches(task: Task, cfg: InnerLoopConfig, rng: RngStream) -> list[Minibatch]:
    """The k minibatches of one inner loop, in order.

    Cycle mode walks a random permutation of the training set and wraps
    around; replacement mode draws each batch independently (distinct
    examples within a batch, examples returned to the pool between batches).
    """
    n = len(task.train)
    if n == 0:
        raise ContractError("task has no training data")
    gen = rng.generator()
    n_train_batches = cfg.k - 1 if cfg.tail == "separate" else cfg.k
    if cfg.sampling == "cycle":
        idx = _cycle_indices(n, cfg.batch_size, n_train_batches, gen)
    else:
        idx = _replacement_indices(n, cfg.batch_size, n_train_batches, gen)
    batches = [task.train.take(i) for i in idx]
    if cfg.tail == "separate":
        tail = getattr(task, "tail", None)
        if tail is None or len(tail) == 0:
            raise ContractError("separate tail requested but the task has no tail split")
        m = len(tail)
        pick = np.arange(m) if cfg.batch_size >= m else gen.choice(m, size=cfg.batch_size, replace=False)
        batches.append(tail.take(pick))
    return batches


def run_losses(phi: ParamVector, losses, state, record: bool = True, batches=None) -> Trajectory:
    """Run one optimizer step per loss, in order."""
    phi = np.array(phi, dtype=np.float64)
    start = phi.copy()
    iterates = [phi] if record else None
    grads = []
    values = []
    before_last = phi
    for i, loss in enumerate(losses):
        if hasattr(loss, "value_and_grad"):
            val, g = loss.value_and_grad(phi)
        else:
            val, g = loss.value(phi), loss.grad(phi)
        if not np.isfinite(val) or not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite loss at inner step {i + 1}", step=i + 1)
        before_last = phi
        phi, state = optimizer_step(state, phi, g)
        grads.append(g)
        values.append(val)
        if record:
            iterates.append(phi)
    return Trajectory(
        start=start,
        before_last=before_last,
        end=phi,
        gradients=np.array(grads),
        batches=list(batches) if batches is not None else [],
        losses=list(losses),
        optimizer_kind=state.kind,
        step_size=state.step_size,
        loss_values=np.array(values),
        iterates=np.array(iterates) if record else None,
        final_state=state,
    )


def run_inner(phi: ParamVector, task: Task, cfg: InnerLoopConfig, rng: RngStream, state=None) -> Trajectory:
    """Adapt ``phi`` to ``task`` for ``cfg.k`` steps.

    ``state`` lets Adam moments carry over from a previous inner loop; when
    omitted a fresh optimizer state is built from ``cfg``.
    """
    phi = np.asarray(phi, dtype=np.float64)
    if state is None:
        state = cfg.initial_state(phi.size)
    batches = sample_batches(task, cfg, rng)
    losses = [task.loss(b) for b in batches]
    return run_losses(phi, losses, state, record=cfg.record_trajectory, batches=batches)
