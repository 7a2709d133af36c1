import numpy as np
import pytest

from conftest import random_net
from reptile.core import ContractError, RngStream, dot, fd_grad, fd_hvp
from reptile.models import Minibatch, MlpLoss, MlpSpec, mlp_init, mlp_loss, mlp_predict, predict_class


def test_parameter_counts():
    assert MlpSpec((1, 64, 64, 1)).n_params == 4353
    assert MlpSpec((2, 3)).n_params == 9
    assert mlp_init(MlpSpec((1, 64, 64, 1)), RngStream(0)).shape == (4353,)


def test_spec_validation():
    with pytest.raises(ContractError):
        MlpSpec((3,))
    with pytest.raises(ContractError):
        MlpSpec((3, 1), output="softmax")
    with pytest.raises(ContractError):
        MlpSpec((3, 2), activation="sigmoid")


def test_init_deterministic_and_glorot_bounded():
    spec = MlpSpec((3, 10, 2))
    a = mlp_init(spec, RngStream(4))
    np.testing.assert_array_equal(a, mlp_init(spec, RngStream(4)))
    (W1, b1), (W2, b2) = spec.unpack(a)
    assert np.all(np.abs(W1) <= np.sqrt(6 / 13)) and np.all(np.abs(W2) <= np.sqrt(6 / 12))
    assert not b1.any() and not b2.any()


def test_single_linear_layer_hand_calculus():
    spec = MlpSpec((1, 1))
    loss = mlp_loss(spec, None, Minibatch(np.array([[1.0]]), np.array([[0.0]]), np.array([0])))
    phi = np.array([2.0, 0.0])
    assert loss.value(phi) == 4.0
    np.testing.assert_array_equal(loss.grad(phi), [4.0, 4.0])


def test_perfect_fit_has_zero_loss_and_gradient():
    spec = MlpSpec((2, 5, 1))
    phi = mlp_init(spec, RngStream(1))
    x = np.random.default_rng(0).normal(size=(7, 2))
    y = mlp_predict(spec, phi, x)
    loss = MlpLoss(spec, Minibatch(x, y, np.arange(7)))
    assert loss.value(phi) == 0.0
    np.testing.assert_array_equal(loss.grad(phi), 0.0)


def test_uniform_logits_give_log_n():
    spec = MlpSpec((3, 4, 5), output="softmax")
    phi = np.zeros(spec.n_params)
    batch = Minibatch(np.ones((4, 3)), np.array([0, 1, 2, 4]), np.arange(4))
    assert MlpLoss(spec, batch).value(phi) == pytest.approx(np.log(5), abs=1e-12)


def test_predict_examples():
    spec = MlpSpec((3, 4, 2))
    np.testing.assert_array_equal(mlp_predict(spec, np.zeros(spec.n_params), np.ones((2, 3))), 0.0)
    spec = MlpSpec((3, 4, 5), output="softmax")
    np.testing.assert_allclose(mlp_predict(spec, np.zeros(spec.n_params), np.ones((2, 3))), 0.2)
    # ties break toward the lowest class index
    np.testing.assert_array_equal(predict_class(spec, np.zeros(spec.n_params), np.ones((2, 3))), [0, 0])
    assert mlp_predict(MlpSpec((1, 1)), [3.0, 1.0], [[2.0]])[0, 0] == 7.0


def test_predict_dimension_mismatch():
    with pytest.raises(ContractError):
        mlp_predict(MlpSpec((2, 1)), np.zeros(3), np.ones((1, 3)))
    with pytest.raises(ContractError):
        mlp_predict(MlpSpec((2, 1)), np.zeros(4), np.ones((1, 2)))


@pytest.mark.parametrize("output", ["linear", "softmax"])
def test_backprop_and_hvp_match_finite_differences(output):
    for seed in range(15):
        spec, phi, batch = random_net(seed, max_params=1500, output=output)
        loss = MlpLoss(spec, batch)
        g = loss.grad(phi)
        assert np.max(np.abs(g - fd_grad(loss, phi))) <= 1e-6 * (1 + np.max(np.abs(g)))
        v = np.random.default_rng(seed).normal(size=phi.size)
        v /= np.linalg.norm(v)
        hv = loss.hvp(phi, v)
        assert np.max(np.abs(hv - fd_hvp(loss, phi, v, 1e-5))) <= 1e-5 * (1 + np.max(np.abs(hv)))


def test_hvp_linear_and_symmetric():
    for seed in range(10):
        spec, phi, batch = random_net(seed, output="softmax" if seed % 2 else "linear")
        loss = MlpLoss(spec, batch)
        gen = np.random.default_rng(seed + 100)
        v, w = gen.normal(size=(2, phi.size))
        a, b = gen.normal(size=2)
        np.testing.assert_allclose(loss.hvp(phi, a * v + b * w), a * loss.hvp(phi, v) + b * loss.hvp(phi, w), atol=1e-10)
        assert abs(dot(w, loss.hvp(phi, v)) - dot(v, loss.hvp(phi, w))) <= 1e-9


def test_relu_gradient_matches_away_from_kinks():
    spec, phi, batch = random_net(3, output="softmax", activation="relu")
    loss = MlpLoss(spec, batch)
    g = loss.grad(phi)
    assert np.max(np.abs(g - fd_grad(loss, phi, 1e-7))) <= 1e-5 * (1 + np.max(np.abs(g)))


def test_softmax_rows_sum_to_one_and_ce_nonnegative():
    spec, phi, batch = random_net(11, output="softmax")
    p = mlp_predict(spec, phi * 30, batch.inputs)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert MlpLoss(spec, batch).value(phi * 30) >= 0


def test_loss_invariant_to_row_permutation():
    spec, phi, batch = random_net(5)
    perm = np.random.default_rng(0).permutation(len(batch))
    shuffled = Minibatch(batch.inputs[perm], batch.targets[perm], batch.sample_ids[perm])
    assert MlpLoss(spec, shuffled).value(phi) == pytest.approx(MlpLoss(spec, batch).value(phi), rel=1e-13)


def test_minibatch_flags_duplicates():
    assert Minibatch(np.zeros((3, 1)), np.zeros(3), np.array([1, 2, 1])).duplicates
    assert not Minibatch(np.zeros((2, 1)), np.zeros(2), np.array([1, 2])).duplicates
    with pytest.raises(ContractError):
        Minibatch(np.zeros((0, 1)), np.zeros(0), np.array([], dtype=int))
