"""Small differentiable tasks with analytic gradients and seeded synthetic data."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import LayerPartition, ParamVector


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    seed: int | None = None

    @property
    def n_train(self) -> int:
        return len(self.y_train)

    @property
    def n_features(self) -> int:
        return self.X_train.shape[1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["split", "label"] + [f"x{i}" for i in range(self.n_features)])
            for split, X, y in (("train", self.X_train, self.y_train), ("test", self.X_test, self.y_test)):
                for row, label in zip(X, y):
                    w.writerow([split, int(label)] + [repr(float(x)) for x in row])

    @classmethod
    def from_csv(cls, path) -> "SyntheticDataset":
        rows = {"train": ([], []), "test": ([], [])}
        with open(path, newline="") as f:
            r = csv.reader(f)
            next(r)
            for rec in r:
                X, y = rows[rec[0]]
                y.append(int(rec[1]))
                X.append([float(x) for x in rec[2:]])
        (Xtr, ytr), (Xte, yte) = rows["train"], rows["test"]
        d = len(Xtr[0]) if Xtr else 0
        return cls(np.array(Xtr).reshape(-1, d), np.array(ytr, dtype=np.int64),
                   np.array(Xte).reshape(-1, d), np.array(yte, dtype=np.int64))


def gaussian_blobs(n_features: int, n_samples: int, separation: float = 2.0, seed: int = 0,
                   test_fraction: float = 0.2, label_noise: float = 0.0) -> SyntheticDataset:
    """Two unit-variance Gaussian classes whose means are ``separation`` apart."""
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(n_features)
    direction /= np.linalg.norm(direction)
    y = rng.integers(0, 2, size=n_samples)
    X = rng.standard_normal((n_samples, n_features))
    X += np.outer(2 * y - 1, direction) * (separation / 2)
    if label_noise > 0:
        flip = rng.random(n_samples) < label_noise
        y = np.where(flip, 1 - y, y)
    n_test = int(round(n_samples * test_fraction))
    perm = rng.permutation(n_samples)
    te, tr = perm[:n_test], perm[n_test:]
    return SyntheticDataset(X[tr], y[tr].astype(np.int64), X[te], y[te].astype(np.int64), seed)


def xor_dataset() -> SyntheticDataset:
    X = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    y = np.array([0, 1, 1, 0])
    return SyntheticDataset(X, y, X.copy(), y.copy())


class Task:
    """A loss over flat parameters.

    ``batch`` is an ``(X, y)`` pair of arrays; tasks without data ignore it.
    """

    name = "task"
    partition: LayerPartition
    dataset: SyntheticDataset | None = None

    @property
    def n_params(self) -> int:
        return self.partition.total

    @property
    def n_train(self) -> int:
        return self.dataset.n_train

    def loss(self, theta: ParamVector, batch=None) -> float:
        raise NotImplementedError

    def grad(self, theta: ParamVector, batch=None) -> ParamVector:
        raise NotImplementedError

    def predict(self, theta: ParamVector, X: np.ndarray) -> np.ndarray | None:
        return None

    def init_params(self, rng: np.random.Generator | None = None) -> ParamVector:
        return ParamVector.zeros(self.partition)

    def batch(self, idx: np.ndarray):
        return self.dataset.X_train[idx], self.dataset.y_train[idx]

    def train_batch(self):
        return self.dataset.X_train, self.dataset.y_train

    def _vec(self, theta) -> np.ndarray:
        return theta.values if isinstance(theta, ParamVector) else np.asarray(theta, dtype=np.float64)


class QuadraticBowl(Task):
    """loss = 0.5 * ||theta - optimum||^2, a single layer.

    There is no data; ``n_train`` is a nominal sample count so that epochs
    are defined when it runs under the simulator.
    """

    name = "quadratic"

    def __init__(self, optimum, n_train: int = 100):
        self.optimum = np.array(optimum, dtype=np.float64).reshape(-1)
        self.optimum.flags.writeable = False
        self.partition = LayerPartition.single(self.optimum.size)
        self._n_train = n_train

    @property
    def n_train(self) -> int:
        return self._n_train

    def batch(self, idx):
        return None

    def train_batch(self):
        return None

    def loss(self, theta, batch=None) -> float:
        d = self._vec(theta) - self.optimum
        return 0.5 * float(d @ d)

    def grad(self, theta, batch=None) -> ParamVector:
        return ParamVector._wrap(self._vec(theta) - self.optimum, self.partition)


def quadratic_bowl(dim: int, optimum=None, seed: int = 0, n_train: int = 100) -> QuadraticBowl:
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if optimum is None:
        optimum = np.random.default_rng(seed).standard_normal(dim)
    return QuadraticBowl(optimum, n_train)


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def _sigmoid(z):
    return np.exp(_log_sigmoid(z))


class LogisticTask(Task):
    """Binary cross-entropy on a linear score; layers are (weights, bias)."""

    name = "logistic"

    def __init__(self, dataset: SyntheticDataset):
        self.dataset = dataset
        self.partition = LayerPartition((dataset.n_features, 1))

    def _split(self, theta):
        t = self._vec(theta)
        return t[:-1], t[-1]

    def loss(self, theta, batch=None) -> float:
        X, y = self.train_batch() if batch is None else batch
        w, b = self._split(theta)
        z = X @ w + b
        # -[y log s(z) + (1-y) log s(-z)]
        return float(-np.mean(y * _log_sigmoid(z) + (1 - y) * _log_sigmoid(-z)))

    def grad(self, theta, batch=None) -> ParamVector:
        X, y = self.train_batch() if batch is None else batch
        w, b = self._split(theta)
        r = (_sigmoid(X @ w + b) - y) / len(y)
        return ParamVector._wrap(np.append(X.T @ r, r.sum()), self.partition)

    def predict(self, theta, X):
        w, b = self._split(theta)
        return (X @ w + b > 0).astype(np.int64)


def logistic_task(n_features: int, n_samples: int, separation: float = 2.0, seed: int = 0,
                  label_noise: float = 0.0) -> LogisticTask:
    if n_features < 1 or n_samples < 1 or separation < 0:
        raise ValueError("n_features, n_samples must be positive and separation non-negative")
    return LogisticTask(gaussian_blobs(n_features, n_samples, separation, seed, label_noise=label_noise))


_ACTIVATIONS = {
    "tanh": (np.tanh, lambda a: 1.0 - a * a),
    "relu": (lambda z: np.maximum(z, 0.0), lambda a: (a > 0).astype(np.float64)),
    "sigmoid": (_sigmoid, lambda a: a * (1.0 - a)),
}


class MLPTask(Task):
    """Fully connected net with softmax cross-entropy and hand-written backprop.

    Parameters are flattened as W1, b1, W2, b2, ... with ``W`` stored
    (fan_out, fan_in); each weight matrix and bias vector is its own layer.
    """

    name = "mlp"

    def __init__(self, layer_sizes, activation: str = "tanh", dataset: SyntheticDataset | None = None):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 3:
            raise ValueError("need at least one hidden layer")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.layer_sizes = sizes
        self.activation = activation
        self.dataset = dataset
        shapes = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            shapes += [(fan_out, fan_in), (fan_out,)]
        self._shapes = shapes
        self.partition = LayerPartition(tuple(int(np.prod(s)) for s in shapes))

    def unflatten(self, theta) -> list[np.ndarray]:
        t = self._vec(theta)
        return [t[sl].reshape(shape) for sl, shape in zip(self.partition.slices(), self._shapes)]

    def init_params(self, rng=None) -> ParamVector:
        rng = np.random.default_rng(0) if rng is None else rng
        parts = []
        for shape in self._shapes:
            if len(shape) == 2:
                parts.append(rng.standard_normal(shape).ravel() / np.sqrt(shape[1]))
            else:
                parts.append(np.zeros(shape))
        return ParamVector(np.concatenate(parts), self.partition)

    def _forward(self, params, X):
        act, _ = _ACTIVATIONS[self.activation]
        acts = [X]
        h = X
        n_layers = len(params) // 2
        for i in range(n_layers):
            z = h @ params[2 * i].T + params[2 * i + 1]
            h = z if i == n_layers - 1 else act(z)
            acts.append(h)
        return acts

    @staticmethod
    def _log_softmax(z):
        z = z - z.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def loss(self, theta, batch=None) -> float:
        X, y = self.train_batch() if batch is None else batch
        logits = self._forward(self.unflatten(theta), X)[-1]
        return float(-np.mean(self._log_softmax(logits)[np.arange(len(y)), y]))

    def grad(self, theta, batch=None) -> ParamVector:
        X, y = self.train_batch() if batch is None else batch
        _, dact = _ACTIVATIONS[self.activation]
        params = self.unflatten(theta)
        acts = self._forward(params, X)
        n = len(y)
        delta = np.exp(self._log_softmax(acts[-1]))
        delta[np.arange(n), y] -= 1.0
        delta /= n
        grads = [None] * len(params)
        for i in reversed(range(len(params) // 2)):
            grads[2 * i] = delta.T @ acts[i]
            grads[2 * i + 1] = delta.sum(axis=0)
            if i:
                delta = (delta @ params[2 * i]) * dact(acts[i])
        return ParamVector._wrap(np.concatenate([g.ravel() for g in grads]), self.partition)

    def predict(self, theta, X):
        return np.argmax(self._forward(self.unflatten(theta), X)[-1], axis=1)


def mlp_task(layer_sizes, activation: str = "tanh", dataset: SyntheticDataset | None = None) -> MLPTask:
    return MLPTask(layer_sizes, activation, dataset)


def gradcheck(task: Task, theta: ParamVector, batch=None, step: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    if step <= 0:
        raise ValueError("step must be positive")
    analytic = task.grad(theta, batch).values
    base = theta.values
    numeric = np.empty_like(base)
    for i in range(base.size):
        up = base.copy()
        up[i] += step
        down = base.copy()
        down[i] -= step
        numeric[i] = (task.loss(up, batch) - task.loss(down, batch)) / (2 * step)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def make_task(spec: dict) -> Task:
    """Build a task from a config mapping (``{"name": "logistic", ...}``)."""
    spec = dict(spec)
    name = spec.pop("name")
    if name == "quadratic":
        return quadratic_bowl(**spec)
    if name == "logistic":
        return logistic_task(**spec)
    if name == "mlp":
        data = spec.pop("data", {"name": "xor"})
        data = dict(data)
        kind = data.pop("name")
        if kind == "xor":
            ds = xor_dataset()
        elif kind == "blobs":
            ds = gaussian_blobs(**data)
        elif kind == "csv":
            ds = SyntheticDataset.from_csv(Path(data["path"]))
        else:
            raise ValueError(f"unknown dataset {kind!r}")
        return mlp_task(spec.pop("layer_sizes"), spec.pop("activation", "tanh"), ds)
    raise ValueError(f"unknown task {name!r}")
