"""1-D sine-wave regression: f(x) = a sin(x + b)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import ContractError, ParamVector, RngStream
from ..models import Dataset, MlpLoss, MlpSpec, mlp_predict

AMPLITUDE_RANGE = (0.1, 5.0)
PHASE_RANGE = (0.0, 2 * np.pi)
X_RANGE = (-5.0, 5.0)
SINE_GRID = np.linspace(-5.0, 5.0, 50)


@dataclass(frozen=True)
class SineTask:
    amplitude: float
    phase: float
    train: Dataset
    spec: MlpSpec
    tail: Dataset | None = None

    def target(self, x) -> np.ndarray:
        return self.amplitude * np.sin(np.asarray(x, dtype=np.float64) + self.phase)

    def loss(self, batch):
        return MlpLoss(self.spec, batch)

    def metric(self, phi: ParamVector) -> float:
        return sine_eval_loss(self.spec, phi, self)

    @property
    def query(self) -> Dataset:
        x = SINE_GRID[:, None]
        return Dataset(x, self.target(x), np.arange(len(x)))


def _points(task_gen, n, amplitude, phase, id_offset=0):
    x = task_gen.uniform(*X_RANGE, size=(n, 1))
    return Dataset(x, amplitude * np.sin(x + phase), np.arange(id_offset, id_offset + n))


def sine_sample(rng: RngStream, spec: MlpSpec | None = None, n_points: int = 10, tail_points: int = 0) -> SineTask:
    spec = spec or MlpSpec((1, 64, 64, 1))
    if spec.in_dim != 1 or spec.out_dim != 1 or spec.output != "linear":
        raise ContractError("sine tasks need a 1-in 1-out regression network")
    gen = rng.generator()
    a = gen.uniform(*AMPLITUDE_RANGE)
    b = gen.uniform(*PHASE_RANGE)
    train = _points(gen, n_points, a, b)
    tail = _points(gen, tail_points, a, b, id_offset=n_points) if tail_points else None
    return SineTask(a, b, train, spec, tail)


def sine_eval_loss(spec: MlpSpec, phi: ParamVector, task: SineTask) -> float:
    """Mean squared error over the 50-point grid on [-5, 5]."""
    pred = mlp_predict(spec, phi, SINE_GRID[:, None])[:, 0]
    return float(np.mean((pred - task.target(SINE_GRID)) ** 2))


@dataclass(frozen=True)
class SineFamily:
    spec: MlpSpec = MlpSpec((1, 64, 64, 1))
    n_points: int = 10
    tail_points: int = 0

    metric_name = "grid_mse"
    higher_is_better = False

    def sample(self, rng: RngStream) -> SineTask:
        return sine_sample(rng, self.spec, self.n_points, self.tail_points)
