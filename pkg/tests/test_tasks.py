import math

import numpy as np
import pytest

from dgs.optim import Hyperparams, VelocityState, momentum_step
from dgs.tasks import (
    SyntheticDataset,
    gaussian_blobs,
    gradcheck,
    logistic_task,
    make_task,
    mlp_task,
    quadratic_bowl,
    xor_dataset,
)
from dgs.tensor import ParamVector


def test_quadratic_optimum_and_unit_displacement():
    task = quadratic_bowl(3, optimum=[1.0, -2.0, 0.5])
    opt = ParamVector(task.optimum)
    assert task.loss(opt) == 0.0
    assert task.grad(opt) == ParamVector.zeros(task.partition)
    e1 = ParamVector(task.optimum + np.array([1.0, 0.0, 0.0]))
    assert task.loss(e1) == 0.5
    assert task.grad(e1) == ParamVector([1.0, 0.0, 0.0])


def test_quadratic_gd_geometric_rate():
    task = quadratic_bowl(4, seed=1)
    theta = ParamVector(np.zeros(4))
    lr = 0.3
    for t in range(1, 60):
        theta = theta - lr * task.grad(theta)
        expected = task.optimum * (1 - (1 - lr) ** t)
        np.testing.assert_allclose(theta.values, expected, rtol=0, atol=1e-12)


def test_logistic_zero_weights_is_log2():
    task = logistic_task(5, 200, seed=0)
    assert task.loss(ParamVector.zeros(task.partition)) == pytest.approx(math.log(2), rel=1e-15)
    assert task.partition.sizes == (5, 1)


def test_logistic_converges_on_separated_blobs():
    task = logistic_task(4, 400, separation=8.0, seed=2)
    state = VelocityState(ParamVector.zeros(task.partition))
    theta = state.u
    hp = Hyperparams(0.5, 0.7)
    for _ in range(300):
        state, upd = momentum_step(state, task.grad(theta), hp)
        theta = theta - upd
    X, y = task.train_batch()
    assert np.mean(task.predict(theta, X) == y) >= 0.99


def test_dataset_is_reproducible_and_split_is_disjoint():
    a = gaussian_blobs(3, 100, seed=5)
    b = gaussian_blobs(3, 100, seed=5)
    np.testing.assert_array_equal(a.X_train, b.X_train)
    np.testing.assert_array_equal(a.y_test, b.y_test)
    assert len(a.y_train) + len(a.y_test) == 100
    rows = {tuple(r) for r in a.X_train}
    assert not rows & {tuple(r) for r in a.X_test}


def test_dataset_csv_roundtrip(tmp_path):
    ds = gaussian_blobs(3, 20, seed=1)
    ds.to_csv(tmp_path / "d.csv")
    back = SyntheticDataset.from_csv(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.X_train, ds.X_train)
    np.testing.assert_array_equal(back.y_test, ds.y_test)


def test_mlp_partition_has_one_layer_per_tensor():
    task = mlp_task([2, 8, 2], "tanh", xor_dataset())
    assert task.partition.sizes == (16, 8, 16, 2)


def test_mlp_zero_weights_finite():
    task = mlp_task([2, 4, 2], "relu", xor_dataset())
    vals = np.zeros(task.n_params)
    vals[task.partition.offsets[1]:task.partition.offsets[2]] = 0.1  # hidden bias
    theta = ParamVector(vals, task.partition)
    assert np.isfinite(task.loss(theta))
    assert np.all(np.isfinite(task.grad(theta).values))


@pytest.mark.parametrize("activation", ["tanh", "sigmoid", "relu"])
def test_mlp_gradcheck(activation):
    rng = np.random.default_rng(0)
    ds = gaussian_blobs(3, 40, seed=1)
    task = mlp_task([3, 5, 4, 2], activation, ds)
    for _ in range(10):
        theta = ParamVector(rng.standard_normal(task.n_params) * 0.7, task.partition)
        idx = rng.choice(ds.n_train, size=8, replace=False)
        assert gradcheck(task, theta, task.batch(idx), 1e-5) <= 1e-6


def test_logistic_gradcheck():
    rng = np.random.default_rng(1)
    task = logistic_task(6, 100, seed=0)
    for _ in range(10):
        theta = ParamVector(rng.standard_normal(task.n_params), task.partition)
        assert gradcheck(task, theta, task.batch(rng.choice(task.n_train, 16)), 1e-5) <= 1e-6


def test_quadratic_gradcheck():
    task = quadratic_bowl(5, seed=0)
    theta = ParamVector(np.random.default_rng(0).standard_normal(5))
    assert gradcheck(task, theta, None, 1e-5) <= 1e-10


def test_gradcheck_catches_wrong_gradient():
    task = quadratic_bowl(3, seed=0)

    class Wrong(type(task)):
        def grad(self, theta, batch=None):
            return 1.01 * super().grad(theta, batch)

    bad = Wrong(task.optimum)
    assert gradcheck(bad, ParamVector(np.ones(3) * 5), None, 1e-5) > 1e-6


def test_xor_mlp_trains_under_dense_momentum():
    task = mlp_task([2, 8, 2], "tanh", xor_dataset())
    theta = task.init_params(np.random.default_rng(0))
    state = VelocityState(ParamVector.zeros(task.partition))
    hp = Hyperparams(0.1, 0.7)
    for _ in range(2000):
        state, upd = momentum_step(state, task.grad(theta), hp)
        theta = theta - upd
    assert task.loss(theta) < 0.1


def test_make_task():
    assert make_task({"name": "quadratic", "dim": 3}).n_params == 3
    assert make_task({"name": "logistic", "n_features": 4, "n_samples": 50}).n_params == 5
    t = make_task({"name": "mlp", "layer_sizes": [2, 3, 2]})
    assert t.partition.num_layers == 4
    with pytest.raises(ValueError):
        make_task({"name": "resnet"})
