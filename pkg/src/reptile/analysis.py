"""Leading-order expansion of the meta-gradients and checks of its remainder.

To first order in the inner step size ``alpha`` every meta-gradient is a
combination of two expectations taken at the initial point:

``AvgGrad``
    mean minibatch gradient, the joint-training direction;
``AvgGradInner``
    mean of ``H_i g_j`` over ordered pairs of distinct minibatches, half the
    gradient of the expected inner product between two minibatch gradients.

Each algorithm's expected meta-gradient is ``c_grad * AvgGrad - c_inner *
alpha * AvgGradInner + O(alpha^2)`` with the coefficients in
``coefficient_table``. The estimators below average explicitly over every
ordering of a sampled minibatch sequence, so on a fixed sample the measured
and predicted values differ only by the second-order remainder.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction
from typing import Protocol, Sequence

import numpy as np

from .core import ContractError, DifferentiableLoss, DivergenceError, ParamVector, RngStream
from .innerloop import InnerLoopConfig, run_losses, sample_batches
from .meta import maml_gradient
from .optim import SgdState

ALGORITHMS = ("maml", "fomaml", "reptile")


class LossSequenceSampler(Protocol):
    def sample(self, rng: RngStream, k: int) -> list[DifferentiableLoss]: ...


class FixedSequence:
    """Always returns the same losses (a deterministic 'task')."""

    def __init__(self, losses: Sequence[DifferentiableLoss]):
        self.losses = list(losses)

    def sample(self, rng, k):
        if k != len(self.losses):
            raise ContractError(f"fixed sequence has {len(self.losses)} losses, asked for {k}")
        return list(self.losses)


class TaskBatches:
    """Sample a task from ``family``, then ``k`` minibatches of it."""

    def __init__(self, family, batch_size: int, sampling: str = "cycle"):
        self.family = family
        self.batch_size = batch_size
        self.sampling = sampling

    def sample(self, rng, k):
        task = self.family.sample(rng.child(0))
        cfg = InnerLoopConfig(k=k, batch_size=self.batch_size, sampling=self.sampling)
        return [task.loss(b) for b in sample_batches(task, cfg, rng.child(1))]


def coefficient_table(k: int) -> dict[str, tuple[Fraction, Fraction]]:
    """``(c_grad, c_inner)`` per algorithm for k SGD steps."""
    if k < 1:
        raise ContractError("k must be >= 1")
    return {
        "maml": (Fraction(1), Fraction(2 * (k - 1))),
        "fomaml": (Fraction(1), Fraction(k - 1)),
        "reptile": (Fraction(k), Fraction(k * (k - 1), 2)),
    }


@dataclass
class SampleTerms:
    avg_grad: np.ndarray
    avg_grad_inner: np.ndarray
    h2g1: np.ndarray | None = None
    h1g2: np.ndarray | None = None


def sample_terms(phi: ParamVector, losses: Sequence[DifferentiableLoss]) -> SampleTerms:
    """Gradients and Hessian-gradient cross terms of one sample, all at ``phi``."""
    grads = [l.grad(phi) for l in losses]
    avg = np.mean(grads, axis=0)
    k = len(losses)
    if k < 2:
        return SampleTerms(avg, np.zeros_like(avg))
    cross = {}
    for i in range(k):
        for j in range(k):
            if i != j:
                cross[i, j] = losses[i].hvp(phi, grads[j])
    inner = np.mean(list(cross.values()), axis=0)
    return SampleTerms(avg, inner, cross[1, 0], cross[0, 1])


@dataclass
class TaylorTerms:
    avg_grad: np.ndarray
    avg_grad_inner: np.ndarray
    n_samples: int
    avg_grad_stderr: np.ndarray
    avg_grad_inner_stderr: np.ndarray
    # unsymmetrized halves E[H2 g1] and E[H1 g2] (first two batches)
    h2g1: np.ndarray
    h1g2: np.ndarray
    h2g1_stderr: np.ndarray
    h1g2_stderr: np.ndarray


def _mean_se(rows):
    rows = np.asarray(rows)
    se = rows.std(axis=0, ddof=1) / np.sqrt(len(rows)) if len(rows) > 1 else np.zeros(rows.shape[1:])
    return rows.mean(axis=0), se


def estimate_terms(phi: ParamVector, sampler: LossSequenceSampler, n_samples: int, rng: RngStream, k: int = 2) -> TaylorTerms:
    if n_samples < 2:
        raise ContractError("need at least 2 samples")
    if k < 2:
        raise ContractError("cross terms need k >= 2")
    samples = [sample_terms(phi, sampler.sample(rng.child(s), k)) for s in range(n_samples)]
    g, g_se = _mean_se([s.avg_grad for s in samples])
    h, h_se = _mean_se([s.avg_grad_inner for s in samples])
    a, a_se = _mean_se([s.h2g1 for s in samples])
    b, b_se = _mean_se([s.h1g2 for s in samples])
    return TaylorTerms(g, h, n_samples, g_se, h_se, a, b, a_se, b_se)


def predicted_meta_gradient(terms, algo: str, k: int, alpha: float) -> np.ndarray:
    """Leading-order prediction ``c_grad * AvgGrad - c_inner * alpha * AvgGradInner``."""
    c_grad, c_inner = coefficient_table(k)[algo]
    return float(c_grad) * terms.avg_grad - float(c_inner) * alpha * terms.avg_grad_inner


def meta_gradient_of(phi: ParamVector, losses: Sequence[DifferentiableLoss], algo: str, alpha: float) -> np.ndarray:
    """Gradient-form meta-gradient of one SGD inner loop over ``losses`` in the given order."""
    traj = run_losses(phi, losses, SgdState(alpha), record=algo == "maml")
    if algo == "reptile":
        return traj.gradients.sum(axis=0)
    if algo == "fomaml":
        return traj.gradients[-1]
    if algo == "maml":
        return maml_gradient(traj)
    raise ContractError(f"unknown algorithm {algo!r}")


def order_averaged_meta_gradient(phi, losses, algo: str, alpha: float) -> np.ndarray:
    """Mean meta-gradient over every ordering of ``losses``."""
    perms = list(itertools.permutations(range(len(losses))))
    total = np.zeros(np.asarray(phi).size)
    for p in perms:
        total += meta_gradient_of(phi, [losses[i] for i in p], algo, alpha)
    return total / len(perms)


@dataclass
class ResidualPoint:
    alpha: float
    residual_norm: float
    stderr: float
    n: int
    flag: str


@dataclass
class ResidualStudy:
    algo: str
    k: int
    points: list[ResidualPoint]
    slope: float
    slope_stderr: float
    flag: str

    @property
    def alphas(self):
        return np.array([p.alpha for p in self.points])

    @property
    def residuals(self):
        return np.array([p.residual_norm for p in self.points])


EXACT_TOL = 1e-10


def residual_study(
    phi: ParamVector,
    sampler: LossSequenceSampler,
    algo: str,
    k: int,
    alphas: Sequence[float],
    n_samples: int,
    rng: RngStream,
) -> ResidualStudy:
    """Size of the gap between measured and predicted meta-gradients across ``alphas``.

    All step sizes reuse the same sampled minibatch sequences (common random
    numbers), so the only thing that changes between grid points is alpha.
    The slope of log residual against log alpha should be about 2.
    """
    alphas = [float(a) for a in alphas]
    if len(alphas) < 4 or any(b <= a for a, b in zip(alphas, alphas[1:])):
        raise ContractError("alpha grid must be strictly increasing with at least 4 points")
    if algo not in ALGORITHMS:
        raise ContractError(f"unknown algorithm {algo!r}")
    seqs = [sampler.sample(rng.child(s), k) for s in range(n_samples)]
    terms = [sample_terms(phi, losses) for losses in seqs]
    c_grad, c_inner = (float(c) for c in coefficient_table(k)[algo])
    scale = max(1.0, float(np.linalg.norm(np.mean([t.avg_grad for t in terms], axis=0))))

    points = []
    for a in alphas:
        diffs = []
        try:
            with np.errstate(over="raise", invalid="raise"):
                for losses, t in zip(seqs, terms):
                    measured = order_averaged_meta_gradient(phi, losses, algo, a)
                    diffs.append(measured - (c_grad * t.avg_grad - c_inner * a * t.avg_grad_inner))
        except (DivergenceError, FloatingPointError):
            points.append(ResidualPoint(a, float("nan"), float("nan"), n_samples, "diverged"))
            continue
        diffs = np.array(diffs)
        if not np.all(np.isfinite(diffs)):
            points.append(ResidualPoint(a, float("nan"), float("nan"), n_samples, "diverged"))
            continue
        mean = diffs.mean(axis=0)
        se = float(np.linalg.norm(diffs.std(axis=0, ddof=1)) / np.sqrt(n_samples)) if n_samples > 1 else 0.0
        r = float(np.linalg.norm(mean))
        points.append(ResidualPoint(a, r, se, n_samples, "exact" if r <= EXACT_TOL * scale else "ok"))

    ok = [p for p in points if p.flag == "ok"]
    if all(p.flag == "exact" for p in points if p.flag != "diverged") and any(p.flag == "exact" for p in points):
        return ResidualStudy(algo, k, points, float("nan"), float("nan"), "exact")
    if len(ok) < 2:
        return ResidualStudy(algo, k, points, float("nan"), float("nan"), "insufficient")
    x = np.log([p.alpha for p in ok])
    y = np.log([p.residual_norm for p in ok])
    slope, slope_se = _fit_slope(x, y)
    flag = "diverged-points" if any(p.flag == "diverged" for p in points) else "ok"
    return ResidualStudy(algo, k, points, slope, slope_se, flag)


def _fit_slope(x, y):
    A = np.vstack([x, np.ones_like(x)]).T
    coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
    if len(x) > 2:
        sigma2 = float(np.sum((y - A @ coef) ** 2)) / (len(x) - 2)
        se = float(np.sqrt(sigma2 / np.sum((x - x.mean()) ** 2)))
    else:
        se = float("nan")
    return float(coef[0]), se


@dataclass
class ProbeResult:
    mean_before: float
    mean_after: float
    diff_stderr: float
    n: int


def inner_product_probe(phi_before, phi_after, sampler: LossSequenceSampler, n: int, rng: RngStream) -> ProbeResult:
    """Paired estimate of E[g1 . g2] for two minibatches of the same task at two points."""
    before = np.empty(n)
    after = np.empty(n)
    for s in range(n):
        l1, l2 = sampler.sample(rng.child(s), 2)
        before[s] = float(l1.grad(phi_before) @ l2.grad(phi_before))
        after[s] = float(l1.grad(phi_after) @ l2.grad(phi_after))
    d = after - before
    se = float(d.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return ProbeResult(float(before.mean()), float(after.mean()), se, n)
