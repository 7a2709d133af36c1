"""Affine solution manifolds and SGD on the expected squared distance to them.

The update ``phi <- (1 - eps) phi + eps P(phi)`` is a stochastic gradient
step on ``0.5 * D(phi, W)^2``. For affine sets the minimizer of the average
squared distance solves a linear system, which serves as the oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import ContractError, ParamVector, RngStream


@dataclass(frozen=True)
class AffineManifoldTask:
    """The set ``{phi : M phi = q}`` with ``M`` of full row rank."""

    M: np.ndarray
    q: np.ndarray
    _gram_inv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.M, dtype=np.float64))
        q = np.asarray(self.q, dtype=np.float64).reshape(-1)
        if q.size != M.shape[0]:
            raise ContractError("q must have one entry per row of M")
        if np.linalg.matrix_rank(M) < M.shape[0]:
            raise ContractError("M must have full row rank")
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "_gram_inv", np.linalg.inv(M @ M.T))

    @property
    def dim(self) -> int:
        return self.M.shape[1]

    def normal_projector(self) -> np.ndarray:
        """``M^T (M M^T)^{-1} M``: projects onto the row space of M."""
        return self.M.T @ self._gram_inv @ self.M

    def point(self) -> np.ndarray:
        """Minimal-norm point on the manifold."""
        return self.M.T @ (self._gram_inv @ self.q)

    def project(self, phi: ParamVector) -> ParamVector:
        phi = np.asarray(phi, dtype=np.float64)
        return phi - self.M.T @ (self._gram_inv @ (self.M @ phi - self.q))

    def distance(self, phi: ParamVector) -> float:
        return float(np.linalg.norm(np.asarray(phi) - self.project(phi)))

    @classmethod
    def random(cls, dim: int, codim: int, rng: RngStream) -> "AffineManifoldTask":
        gen = rng.generator()
        return cls(gen.normal(size=(codim, dim)), gen.normal(size=codim))


def manifold_project(task: AffineManifoldTask, phi: ParamVector) -> ParamVector:
    return task.project(phi)


@dataclass(frozen=True)
class FixedPoint:
    point: np.ndarray
    minimal_norm: bool


def manifold_fixed_point_oracle(tasks, probs=None) -> FixedPoint:
    """Minimizer of ``sum_t p_t * 0.5 * D(phi, W_t)^2``.

    Solves ``sum p_t N_t phi = sum p_t N_t c_t``. When the system is singular
    (parallel manifolds, a single manifold) the minimal-norm solution is
    returned with ``minimal_norm`` set.
    """
    tasks = list(tasks)
    if not tasks:
        raise ContractError("need at least one manifold")
    probs = np.full(len(tasks), 1.0 / len(tasks)) if probs is None else np.asarray(probs, dtype=np.float64)
    A = sum(p * t.normal_projector() for p, t in zip(probs, tasks))
    b = sum(p * t.normal_projector() @ t.point() for p, t in zip(probs, tasks))
    rank = np.linalg.matrix_rank(A, tol=1e-10)
    if rank == A.shape[0]:
        return FixedPoint(np.linalg.solve(A, b), False)
    return FixedPoint(np.linalg.lstsq(A, b, rcond=1e-10)[0], True)


def manifold_sgd_iterate(
    phi0: ParamVector,
    tasks,
    eps: float,
    iters: int,
    order: str = "alternate",
    anneal: bool = True,
    rng: RngStream | None = None,
    record_every: int = 1,
) -> np.ndarray:
    """Iterate ``phi <- (1 - e) phi + e P_t(phi)`` and return the recorded trace.

    ``order='alternate'`` cycles through ``tasks`` in order; ``'random'``
    picks one uniformly each step. With ``anneal`` the step size falls
    linearly from ``eps`` to zero over ``iters`` steps. Row ``j`` of the
    result is the iterate after ``j * record_every`` steps; the final iterate
    is always the last row.
    """
    if not 0 < eps <= 1:
        raise ContractError("eps must lie in (0, 1]")
    if order not in ("alternate", "random"):
        raise ContractError("order must be 'alternate' or 'random'")
    tasks = list(tasks)
    phi = np.array(phi0, dtype=np.float64)
    # P(phi) = phi - N phi + N c, so the update is phi - e (N phi - N c)
    Ns = [t.normal_projector() for t in tasks]
    Ncs = [N @ t.point() for N, t in zip(Ns, tasks)]
    picks = (
        np.arange(iters) % len(tasks)
        if order == "alternate"
        else (rng or RngStream(0)).generator().integers(len(tasks), size=iters)
    )
    trace = [phi.copy()]
    for it in range(iters):
        e = eps * (1.0 - it / iters) if anneal else eps
        j = picks[it]
        phi = phi - e * (Ns[j] @ phi - Ncs[j])
        if (it + 1) % record_every == 0 or it + 1 == iters:
            trace.append(phi.copy())
    return np.array(trace)
