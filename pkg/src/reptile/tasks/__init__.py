"""Task families: sine regression, synthetic few-shot episodes, quadratics and affine manifolds."""

from .fewshot import FewShotConfig, FewShotEpisode, FewShotFamily, episode_sample
from .manifold import (
    AffineManifoldTask,
    FixedPoint,
    manifold_fixed_point_oracle,
    manifold_project,
    manifold_sgd_iterate,
)
from .quadratic import QuadraticFamily, QuadraticTask
from .sine import SINE_GRID, SineFamily, SineTask, sine_eval_loss, sine_sample

__all__ = [
    "AffineManifoldTask",
    "FewShotConfig",
    "FewShotEpisode",
    "FewShotFamily",
    "FixedPoint",
    "QuadraticFamily",
    "QuadraticTask",
    "SINE_GRID",
    "SineFamily",
    "SineTask",
    "episode_sample",
    "manifold_fixed_point_oracle",
    "manifold_project",
    "manifold_sgd_iterate",
    "sine_eval_loss",
    "sine_sample",
]
