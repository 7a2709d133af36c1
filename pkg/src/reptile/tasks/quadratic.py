"""Quadratic tasks: every example is its own quadratic loss.

A minibatch loss is the mean of the selected quadratics, which is again a
quadratic, so every derivative the meta-algorithms need has a closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import MeanLoss, QuadraticLoss, RngStream
from ..models import Dataset, Minibatch


@dataclass(frozen=True)
class QuadraticTask:
    examples: tuple[QuadraticLoss, ...]
    train: Dataset
    tail: Dataset | None = None

    @classmethod
    def from_losses(cls, losses, n_tail: int = 0) -> "QuadraticTask":
        losses = tuple(losses)
        ids = np.arange(len(losses))
        n_train = len(losses) - n_tail
        dummy = np.zeros((len(losses), 1))
        train = Dataset(dummy[:n_train], dummy[:n_train], ids[:n_train])
        tail = Dataset(dummy[n_train:], dummy[n_train:], ids[n_train:]) if n_tail else None
        return cls(losses, train, tail)

    def loss(self, batch: Minibatch):
        picked = [self.examples[i] for i in np.asarray(batch.sample_ids)]
        return picked[0] if len(picked) == 1 else MeanLoss(picked)

    def metric(self, phi) -> float:
        return float(np.mean([q.value(phi) for q in self.examples]))


@dataclass(frozen=True)
class QuadraticFamily:
    """Random quadratic tasks in ``dim`` dimensions.

    Each task draws a center ``c_task ~ N(0, task_spread^2 I)``; each of its
    examples has curvature ``Q diag(lam) Q^T`` with eigenvalues in
    ``curvature`` and center ``c_task + example_spread * noise``.
    """

    dim: int = 3
    n_examples: int = 8
    task_spread: float = 1.0
    example_spread: float = 0.5
    curvature: tuple[float, float] = (0.5, 2.0)
    n_tail: int = 0

    metric_name = "mean_loss"
    higher_is_better = False

    def sample(self, rng: RngStream) -> QuadraticTask:
        gen = rng.generator()
        center = gen.normal(scale=self.task_spread, size=self.dim)
        losses = []
        for _ in range(self.n_examples + self.n_tail):
            Q, _ = np.linalg.qr(gen.normal(size=(self.dim, self.dim)))
            lam = gen.uniform(*self.curvature, size=self.dim)
            A = (Q * lam) @ Q.T
            A = 0.5 * (A + A.T)
            losses.append(QuadraticLoss(A, center + self.example_spread * gen.normal(size=self.dim)))
        return QuadraticTask.from_losses(losses, self.n_tail)
