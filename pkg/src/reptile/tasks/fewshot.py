"""Synthetic N-way K-shot episodes built from Gaussian class prototypes.

Each episode draws N fresh prototypes, so the task distribution is
effectively infinite. Prototypes live in a fixed ``signal_dim``-dimensional
subspace of the D-dimensional input space (fixed per family by
``basis_seed``). Every example is its prototype plus isotropic noise of scale
``noise`` and, optionally, large per-example ``nuisance`` noise confined to
the complementary subspace. The nuisance carries no label information; a
learner that has picked up the signal subspace ignores it, a fresh one is
swamped by it. That shared structure is what meta-learning can exploit and
joint training cannot.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from ..core import ContractError, ParamVector, RngStream
from ..models import Dataset, MlpLoss, MlpSpec, predict_class


@dataclass(frozen=True)
class FewShotConfig:
    n_way: int = 5
    shots: int = 1
    query_per_class: int = 1
    tail_shots: int = 0
    dim: int = 20
    signal_dim: int = 20
    noise: float = 0.3
    nuisance: float = 0.0
    basis_seed: int = 0

    def __post_init__(self):
        if self.n_way < 2:
            raise ContractError("need at least 2 classes")
        if self.shots < 1 or self.query_per_class < 0 or self.tail_shots < 0:
            raise ContractError("shots must be >= 1, query and tail sizes >= 0")
        if self.noise <= 0 or self.nuisance < 0:
            raise ContractError("noise must be positive, nuisance non-negative")
        if not 1 <= self.signal_dim <= self.dim:
            raise ContractError("signal_dim must lie in [1, dim]")

    def basis(self) -> tuple[np.ndarray, np.ndarray]:
        """Orthonormal bases of the signal subspace and its complement."""
        if self.signal_dim == self.dim:
            return np.eye(self.dim), np.zeros((self.dim, 0))
        gen = RngStream(self.basis_seed, stream_id=0xBA515).generator()
        Q, _ = np.linalg.qr(gen.normal(size=(self.dim, self.dim)))
        return Q[:, :self.signal_dim], Q[:, self.signal_dim:]


@dataclass(frozen=True)
class FewShotEpisode:
    prototypes: np.ndarray
    label_of_class: np.ndarray
    train: Dataset
    query: Dataset
    spec: MlpSpec
    tail: Dataset | None = None
    n_way: int = field(default=5)

    def loss(self, batch):
        return MlpLoss(self.spec, batch)

    def metric(self, phi: ParamVector) -> float:
        """Query accuracy."""
        if len(self.query) == 0:
            raise ContractError("episode has no query set")
        pred = predict_class(self.spec, phi, self.query.inputs)
        return float(np.mean(pred == self.query.targets))

    def nearest_prototype_accuracy(self) -> float:
        """Accuracy of classifying queries by the closest true prototype."""
        d = ((self.query.inputs[:, None, :] - self.prototypes[None, :, :]) ** 2).sum(axis=2)
        pred = self.label_of_class[np.argmin(d, axis=1)]
        return float(np.mean(pred == self.query.targets))

    def to_csv(self, path) -> None:
        """Dump every example as ``split, id, label, x0..x{D-1}``."""
        dim = self.train.inputs.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["split", "id", "label"] + [f"x{i}" for i in range(dim)])
            for name, ds in (("support", self.train), ("tail", self.tail), ("query", self.query)):
                if ds is None:
                    continue
                for i in range(len(ds)):
                    w.writerow([name, int(ds.ids[i]), int(ds.targets[i])] + [repr(float(v)) for v in ds.inputs[i]])


def _draw(gen, protos, labels, per_class, cfg, basis, comp, id_offset):
    n_way, dim = protos.shape
    cls = np.repeat(np.arange(n_way), per_class)
    x = protos[cls] + cfg.noise * gen.normal(size=(len(cls), dim))
    if cfg.nuisance > 0 and comp.shape[1]:
        x = x + cfg.nuisance * gen.normal(size=(len(cls), comp.shape[1])) @ comp.T
    ids = np.arange(id_offset, id_offset + len(cls))
    return Dataset(x, labels[cls], ids)


def episode_sample(cfg: FewShotConfig, rng: RngStream, spec: MlpSpec | None = None, _basis=None) -> FewShotEpisode:
    spec = spec or default_spec(cfg)
    if spec.in_dim != cfg.dim or spec.out_dim != cfg.n_way or spec.output != "softmax":
        raise ContractError("network must map dim inputs to n_way softmax outputs")
    basis, comp = _basis if _basis is not None else cfg.basis()
    gen = rng.generator()
    protos = gen.normal(size=(cfg.n_way, cfg.signal_dim)) @ basis.T
    labels = gen.permutation(cfg.n_way)
    train = _draw(gen, protos, labels, cfg.shots, cfg, basis, comp, 0)
    offset = len(train)
    tail = None
    if cfg.tail_shots:
        tail = _draw(gen, protos, labels, cfg.tail_shots, cfg, basis, comp, offset)
        offset += len(tail)
    query = _draw(gen, protos, labels, cfg.query_per_class, cfg, basis, comp, offset)
    return FewShotEpisode(protos, labels, train, query, spec, tail, cfg.n_way)


def default_spec(cfg: FewShotConfig, hidden: int = 32) -> MlpSpec:
    return MlpSpec((cfg.dim, hidden, cfg.n_way), activation="tanh", output="softmax")


class FewShotFamily:
    metric_name = "accuracy"
    higher_is_better = True

    def __init__(self, cfg: FewShotConfig, spec: MlpSpec | None = None):
        self.cfg = cfg
        self.spec = spec or default_spec(cfg)
        self._basis = cfg.basis()

    def sample(self, rng: RngStream) -> FewShotEpisode:
        return episode_sample(self.cfg, rng, self.spec, _basis=self._basis)
