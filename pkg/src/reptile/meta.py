"""Reptile, first-order MAML, exact MAML and inner-gradient combinations.

Every algorithm turns one inner-loop trajectory into a ``MetaGradient``
with two views:

``gradient``
    the descent-style meta-gradient (sum of inner gradients for Reptile,
    the last inner gradient for FOMAML, the chain-rule product for MAML).
    Only defined for SGD inner loops.
``direction``
    the parameter-space displacement the outer loop moves along, so that
    the outer update is always ``phi + eps * direction``. For Reptile this is
    ``phi_tilde - phi``; for the gradient-style methods it is the
    displacement one inner step would produce (``-alpha * gradient`` under
    SGD). Keeping all methods in the same units lets them share one outer
    step size.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .core import ContractError, DivergenceError, FunctionLoss, ParamVector, RngStream, fd_grad
from .innerloop import InnerLoopConfig, Task, Trajectory, run_inner, run_losses, sample_batches
from .optim import OuterSchedule, average_states, outer_step, restore, snapshot

VARIANTS = ("reptile", "fomaml", "maml", "combo")


@dataclass(frozen=True)
class MetaAlgorithm:
    variant: str
    weights: tuple[float, ...] | None = None
    normalize: str = "sum"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown meta-algorithm {self.variant!r}")
        if self.variant == "combo":
            if not self.weights or not any(self.weights):
                raise ContractError("combo needs at least one non-zero weight")
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if self.normalize not in ("sum", "average"):
            raise ContractError("normalize must be 'sum' or 'average'")

    @property
    def name(self) -> str:
        if self.variant != "combo":
            return self.variant
        terms = "+".join(f"g{i + 1}" if w == 1 else f"{w:g}*g{i + 1}" for i, w in enumerate(self.weights) if w)
        return f"{terms}:{self.normalize}"


@dataclass
class MetaGradient:
    direction: ParamVector
    algorithm: str
    gradient: ParamVector | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.direction)):
            raise DivergenceError(f"non-finite {self.algorithm} direction")


def _sgd_alpha(traj: Trajectory) -> float | None:
    return traj.step_size if traj.optimizer_kind == "sgd" else None


def reptile_direction(traj: Trajectory) -> MetaGradient:
    direction = traj.end - traj.start
    alpha = _sgd_alpha(traj)
    gradient = None
    if alpha:
        gradient = (traj.start - traj.end) / alpha
    return MetaGradient(direction, "reptile", gradient, {"norm": float(np.linalg.norm(direction))})


def reptile_sum_gradient(traj: Trajectory) -> ParamVector:
    """Sum of the inner gradients; equals the Reptile gradient for SGD."""
    return traj.gradients.sum(axis=0)


def fomaml_direction(traj: Trajectory, tail_loss=None) -> MetaGradient:
    """First-order MAML.

    By default the meta-gradient is the last inner gradient ``g_k``, taken
    at phi_k on the k-th (tail) batch; the direction is that step's
    displacement. Passing ``tail_loss`` instead evaluates the gradient of an
    extra tail loss at the end point phi_{k+1} (SGD only).
    """
    if tail_loss is None:
        gradient = traj.gradients[-1]
        direction = traj.end - traj.before_last
        if traj.optimizer_kind == "sgd":
            direction = -traj.step_size * gradient
        return MetaGradient(direction, "fomaml", gradient if traj.optimizer_kind == "sgd" else None)
    alpha = _sgd_alpha(traj)
    if alpha is None:
        raise ContractError("tail-loss FOMAML needs an SGD inner loop")
    gradient = tail_loss.grad(traj.end)
    return MetaGradient(-alpha * gradient, "fomaml", gradient)


def maml_gradient(traj: Trajectory) -> ParamVector:
    """Backpropagate ``g_k`` through the k-1 SGD steps with Hessian-vector products."""
    alpha = _sgd_alpha(traj)
    if alpha is None:
        raise ContractError("exact MAML is only implemented for SGD inner loops")
    if traj.iterates is None:
        raise ContractError("exact MAML needs a recorded trajectory")
    v = traj.gradients[-1].copy()
    for j in range(traj.k - 2, -1, -1):
        v = v - alpha * traj.losses[j].hvp(traj.iterates[j], v)
    return v


def maml_from_trajectory(traj: Trajectory) -> MetaGradient:
    gradient = maml_gradient(traj)
    return MetaGradient(-traj.step_size * gradient, "maml", gradient)


def maml_direction(phi: ParamVector, task: Task, cfg: InnerLoopConfig, rng: RngStream) -> MetaGradient:
    if cfg.optimizer != "sgd":
        raise ContractError("exact MAML is only implemented for SGD inner loops")
    traj = run_inner(phi, task, replace(cfg, record_trajectory=True), rng)
    return maml_from_trajectory(traj)


def maml_objective(phi: ParamVector, losses: Sequence, alpha: float) -> float:
    """``L_k(U_{k-1}(...U_1(phi)))`` with plain SGD steps."""
    for loss in losses[:-1]:
        phi = phi - alpha * loss.grad(phi)
    return losses[-1].value(phi)


def maml_fd_oracle(
    phi: ParamVector, task: Task, cfg: InnerLoopConfig, rng: RngStream, h: float = 1e-5
) -> ParamVector:
    """Central differences of the post-adaptation loss, batches frozen.

    Uses the same batch sequence ``maml_direction`` draws from ``rng``.
    """
    losses = [task.loss(b) for b in sample_batches(task, cfg, rng)]
    return maml_fd_from_losses(phi, losses, cfg.step_size, h)


def maml_fd_from_losses(phi: ParamVector, losses: Sequence, alpha: float, h: float = 1e-5) -> ParamVector:
    objective = FunctionLoss(lambda p: maml_objective(p, losses, alpha), None)
    return fd_grad(objective, phi, h)


def combo_direction(traj: Trajectory, weights: Sequence[float], normalize: str = "sum") -> MetaGradient:
    """Weighted sum of inner gradients (``average`` divides by the sum of |weights|)."""
    w = np.asarray(weights, dtype=np.float64)
    if w.size != traj.k:
        raise ContractError(f"{w.size} weights for {traj.k} inner steps")
    if not np.any(w):
        raise ContractError("all combination weights are zero")
    scale = np.abs(w).sum() if normalize == "average" else 1.0
    gradient = None
    if traj.optimizer_kind == "sgd":
        gradient = (w @ traj.gradients) / scale
        direction = -traj.step_size * gradient
    else:
        direction = (w @ traj.displacements) / scale
    return MetaGradient(direction, "combo", gradient)


def task_direction(phi, task, algo: MetaAlgorithm, cfg: InnerLoopConfig, rng: RngStream, state=None):
    """Run one inner loop and return ``(MetaGradient, final optimizer state, trajectory)``."""
    if algo.variant not in ("fomaml", "maml") and cfg.tail == "separate":
        cfg = replace(cfg, tail="shared")
    if algo.variant in ("maml", "combo"):
        cfg = replace(cfg, record_trajectory=True)
    if algo.variant == "maml" and cfg.optimizer != "sgd":
        raise ContractError("exact MAML is only implemented for SGD inner loops")
    traj = run_inner(phi, task, cfg, rng, state)
    if algo.variant == "reptile":
        mg = reptile_direction(traj)
    elif algo.variant == "fomaml":
        mg = fomaml_direction(traj)
    elif algo.variant == "maml":
        mg = maml_from_trajectory(traj)
    else:
        mg = combo_direction(traj, algo.weights, algo.normalize)
    mg.algorithm = algo.name
    mg.diagnostics["first_loss"] = float(traj.loss_values[0])
    mg.diagnostics["last_loss"] = float(traj.loss_values[-1])
    return mg, traj.final_state, traj


@dataclass
class MetaBatchResult:
    directions: list[MetaGradient]
    direction: ParamVector
    state: object


def meta_batch(phi, family, algo, cfg, rng: RngStream, n: int, state=None, workers: int = 1) -> MetaBatchResult:
    """Directions for ``n`` tasks, all starting from ``phi``, reduced in task order."""
    if n < 1:
        raise ContractError("meta-batch size must be >= 1")
    if state is None:
        state = cfg.initial_state(np.asarray(phi).size)

    def one(t):
        task = family.sample(rng.child(t, 0))
        mg, final_state, _ = task_direction(phi, task, algo, cfg, rng.child(t, 1), state)
        return mg, final_state

    if workers > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(n)))
    else:
        results = [one(t) for t in range(n)]
    dirs = [r[0] for r in results]
    # fixed-order accumulation keeps the sum independent of thread scheduling
    total = np.zeros_like(dirs[0].direction)
    for mg in dirs:
        total += mg.direction
    return MetaBatchResult(dirs, total / n, average_states([r[1] for r in results]))


@dataclass
class TrainResult:
    phi: ParamVector
    log: list[dict]
    state: object


def meta_train(
    family,
    algo: MetaAlgorithm,
    cfg: InnerLoopConfig,
    schedule: OuterSchedule,
    rng: RngStream,
    phi0: ParamVector,
    meta_batch_size: int = 1,
    evaluate: Callable[[ParamVector, object], float] | None = None,
    eval_every: int = 0,
    workers: int = 1,
    state=None,
) -> TrainResult:
    """Outer loop: sample tasks, reduce their directions, take an annealed step.

    ``evaluate(phi, optimizer_state)`` is called every ``eval_every``
    iterations and once at the end; its value goes into the log.
    """
    phi = np.array(phi0, dtype=np.float64)
    if state is None:
        state = cfg.initial_state(phi.size)
    log = []
    for it in range(schedule.total_iters):
        res = meta_batch(phi, family, algo, cfg, rng.child(it), meta_batch_size, state, workers)
        state = res.state
        eps = schedule.step_size(it)
        phi = outer_step(phi, res.direction, schedule, it)
        if not np.all(np.isfinite(phi)):
            raise DivergenceError(f"parameters became non-finite at outer iteration {it}", step=it)
        row = {
            "iteration": it,
            "eps": eps,
            "direction_norm": float(np.linalg.norm(res.direction)),
            "inner_first_loss": float(np.mean([d.diagnostics["first_loss"] for d in res.directions])),
            "inner_last_loss": float(np.mean([d.diagnostics["last_loss"] for d in res.directions])),
            "eval_metric": "",
        }
        last = it + 1 == schedule.total_iters
        if evaluate is not None and ((eval_every and (it + 1) % eval_every == 0) or last):
            row["eval_metric"] = evaluate(phi, state)
        log.append(row)
    return TrainResult(phi, log, state)


@dataclass
class EvalResult:
    mean: float
    stderr: float
    values: np.ndarray
    pre_values: np.ndarray

    @property
    def pre_mean(self) -> float:
        return float(np.mean(self.pre_values))


def meta_evaluate(
    phi: ParamVector,
    family,
    eval_cfg: InnerLoopConfig | None,
    trials: int,
    rng: RngStream,
    state=None,
) -> EvalResult:
    """Adapt to ``trials`` fresh tasks and score each on its held-out data.

    The optimizer state is snapshotted before each adaptation and restored
    afterwards, so evaluation never leaks into training statistics. With
    ``eval_cfg=None`` the tasks are scored without adaptation.
    """
    if trials < 1:
        raise ContractError("need at least one evaluation trial")
    phi = np.asarray(phi, dtype=np.float64)
    values = np.empty(trials)
    pre = np.empty(trials)
    for j in range(trials):
        task = family.sample(rng.child(j, 0))
        pre[j] = task.metric(phi)
        if eval_cfg is None:
            values[j] = pre[j]
            continue
        cfg = replace(eval_cfg, tail="shared", record_trajectory=False)
        # only Adam carries statistics worth reusing; they are copied, used, then dropped
        blob = snapshot(state) if getattr(state, "kind", None) == "adam" == cfg.optimizer else None
        start = replace(restore(blob, phi.size), step_size=cfg.step_size) if blob else None
        traj = run_inner(phi, task, cfg, rng.child(j, 1), start)
        values[j] = task.metric(traj.end)
        if blob is not None:
            state = restore(blob, phi.size)
    stderr = float(np.std(values, ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return EvalResult(float(np.mean(values)), stderr, values, pre)
