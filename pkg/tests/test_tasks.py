import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reptile.core import ContractError, RngStream
from reptile.meta import meta_evaluate
from reptile.models import Minibatch, MlpLoss, MlpSpec, mlp_init
from reptile.tasks import (
    SINE_GRID,
    AffineManifoldTask,
    FewShotConfig,
    FewShotFamily,
    QuadraticFamily,
    SineFamily,
    episode_sample,
    manifold_fixed_point_oracle,
    manifold_project,
    manifold_sgd_iterate,
    sine_sample,
)


# --- sine -------------------------------------------------------------------

def test_sine_tasks_reproducible_and_in_range():
    for j in range(50):
        a = sine_sample(RngStream(0).child(j))
        b = sine_sample(RngStream(0).child(j))
        assert a.amplitude == b.amplitude and np.array_equal(a.train.inputs, b.train.inputs)
        assert 0.1 <= a.amplitude <= 5.0 and 0 <= a.phase <= 2 * np.pi
        assert np.all(np.abs(a.train.inputs) <= 5)
        np.testing.assert_allclose(a.train.targets, a.target(a.train.inputs))


def test_sine_metric_of_zero_function_is_half_amplitude_squared():
    task = sine_sample(RngStream(3))
    spec = task.spec
    expected = np.mean(task.target(SINE_GRID) ** 2)
    assert task.metric(np.zeros(spec.n_params)) == pytest.approx(expected)
    assert SINE_GRID.size == 50 and SINE_GRID[0] == -5 and SINE_GRID[-1] == 5


def test_sine_tail_split():
    task = sine_sample(RngStream(1), n_points=10, tail_points=5)
    assert len(task.train) == 10 and len(task.tail) == 5
    assert set(task.tail.ids) & set(task.train.ids) == set()


def test_sine_rejects_classifier():
    with pytest.raises(ContractError):
        sine_sample(RngStream(0), MlpSpec((1, 4, 3), output="softmax"))


# --- few-shot ---------------------------------------------------------------

def test_episode_shapes_and_balance():
    cfg = FewShotConfig(n_way=5, shots=2, query_per_class=3, tail_shots=1, dim=8, signal_dim=4, nuisance=2.0)
    ep = episode_sample(cfg, RngStream(0))
    assert ep.train.inputs.shape == (10, 8) and len(ep.query) == 15 and len(ep.tail) == 5
    assert np.array_equal(np.bincount(ep.train.targets), [2] * 5)
    ids = np.concatenate([ep.train.ids, ep.tail.ids, ep.query.ids])
    assert len(set(ids.tolist())) == len(ids)


def test_prototypes_live_in_signal_subspace():
    cfg = FewShotConfig(dim=10, signal_dim=3)
    basis, comp = cfg.basis()
    np.testing.assert_allclose(basis.T @ basis, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(comp.T @ basis, 0, atol=1e-12)
    ep = episode_sample(cfg, RngStream(4))
    np.testing.assert_allclose(ep.prototypes @ comp, 0, atol=1e-12)


def test_low_noise_prototype_classifier_is_perfect():
    cfg = FewShotConfig(noise=1e-3, query_per_class=4)
    ep = episode_sample(cfg, RngStream(2))
    assert ep.nearest_prototype_accuracy() == 1.0


def test_labels_are_permuted_per_episode():
    cfg = FewShotConfig()
    perms = {tuple(episode_sample(cfg, RngStream(9).child(i)).label_of_class) for i in range(30)}
    assert len(perms) > 10


def test_untrained_accuracy_is_chance():
    fam = FewShotFamily(FewShotConfig())
    phi = mlp_init(fam.spec, RngStream(0))
    r = meta_evaluate(phi, fam, None, 2000, RngStream(1))
    assert abs(r.mean - 0.2) < 4 * r.stderr + 0.01


def test_symmetric_output_layer_gives_exact_chance_without_adaptation():
    # identical logits always pick class 0 and every class is equally represented in the query
    fam = FewShotFamily(FewShotConfig(query_per_class=5))
    phi = mlp_init(fam.spec, RngStream(0))
    (_, _), (W2, b2) = fam.spec.unpack(phi)
    W2[:] = 0.0
    b2[:] = 0.0
    r = meta_evaluate(phi, fam, None, 200, RngStream(2))
    np.testing.assert_allclose(r.values, 0.2, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_label_permutation_equivariance(seed):
    cfg = FewShotConfig(n_way=4, shots=2, dim=6, signal_dim=3, nuisance=1.0)
    fam = FewShotFamily(cfg)
    ep = fam.sample(RngStream(seed))
    phi = mlp_init(fam.spec, RngStream(seed, 1)) + 0.1
    perm = np.random.default_rng(seed).permutation(cfg.n_way)
    # unit perm[c] of the new network plays the role of unit c of the old one
    new = phi.copy()
    (_, _), (W2, b2) = fam.spec.unpack(phi)
    (_, _), (W2n, b2n) = fam.spec.unpack(new)
    W2n[:, perm] = W2
    b2n[perm] = b2
    b = ep.train.as_batch()
    relabeled = Minibatch(b.inputs, perm[b.targets], b.sample_ids)
    assert abs(MlpLoss(fam.spec, relabeled).value(new) - MlpLoss(fam.spec, b).value(phi)) <= 1e-12


def test_fewshot_config_validation():
    with pytest.raises(ContractError):
        FewShotConfig(n_way=1)
    with pytest.raises(ContractError):
        FewShotConfig(dim=4, signal_dim=5)
    with pytest.raises(ContractError):
        episode_sample(FewShotConfig(), RngStream(0), MlpSpec((20, 3, 4), output="softmax"))


def test_episode_csv(tmp_path):
    ep = episode_sample(FewShotConfig(dim=3, signal_dim=3), RngStream(0))
    ep.to_csv(tmp_path / "ep.csv")
    rows = (tmp_path / "ep.csv").read_text().splitlines()
    assert rows[0] == "split,id,label,x0,x1,x2"
    assert len(rows) == 1 + 5 + 5


# --- quadratics -------------------------------------------------------------

def test_quadratic_task_losses_match_examples():
    task = QuadraticFamily(dim=2, n_examples=4).sample(RngStream(0))
    phi = np.array([0.3, -0.2])
    batch = task.train.take(np.array([1, 3]))
    expected = 0.5 * (task.examples[1].value(phi) + task.examples[3].value(phi))
    assert task.loss(batch).value(phi) == pytest.approx(expected, rel=1e-14)
    assert task.metric(phi) == pytest.approx(np.mean([q.value(phi) for q in task.examples]))


# --- manifolds --------------------------------------------------------------

def test_orthogonal_lines_fixed_point():
    a = AffineManifoldTask([[0.0, 1.0]], [0.0])  # y = 0
    b = AffineManifoldTask([[1.0, 0.0]], [1.0])  # x = 1
    fp = manifold_fixed_point_oracle([a, b])
    np.testing.assert_allclose(fp.point, [1.0, 0.0], atol=1e-12)
    assert not fp.minimal_norm
    np.testing.assert_allclose(manifold_project(a, [3.0, 4.0]), [3.0, 0.0])
    assert a.distance([3.0, 4.0]) == pytest.approx(4.0)


def test_parallel_lines_flagged_minimal_norm():
    a = AffineManifoldTask([[0.0, 1.0]], [0.0])
    b = AffineManifoldTask([[0.0, 1.0]], [2.0])
    fp = manifold_fixed_point_oracle([a, b])
    assert fp.minimal_norm
    np.testing.assert_allclose(fp.point, [0.0, 1.0], atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), codim=st.integers(1, 4))
def test_projection_is_idempotent_and_on_manifold(seed, codim):
    task = AffineManifoldTask.random(6, codim, RngStream(seed))
    phi = np.random.default_rng(seed).normal(size=6) * 3
    p = task.project(phi)
    np.testing.assert_allclose(task.M @ p, task.q, atol=1e-9)
    np.testing.assert_allclose(task.project(p), p, atol=1e-9)
    # the residual is orthogonal to the manifold's directions
    np.testing.assert_allclose(task.normal_projector() @ (phi - p), phi - p, atol=1e-9)


def test_manifold_sgd_reaches_oracle_on_lines():
    a = AffineManifoldTask([[0.0, 1.0]], [0.0])
    b = AffineManifoldTask([[1.0, 0.0]], [1.0])
    trace = manifold_sgd_iterate([5.0, -3.0], [a, b], 0.5, 20_000, record_every=1000)
    assert np.linalg.norm(trace[-1] - [1.0, 0.0]) < 1e-6
    assert trace.shape == (21, 2)


def test_manifold_sgd_validation():
    a = AffineManifoldTask([[1.0, 0.0]], [1.0])
    with pytest.raises(ContractError):
        manifold_sgd_iterate([0.0, 0.0], [a], 0.0, 10)
    with pytest.raises(ContractError):
        AffineManifoldTask([[1.0, 0.0], [2.0, 0.0]], [1.0, 2.0])
