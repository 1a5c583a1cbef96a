"""Learning tasks over flat parameter vectors.

Two workloads are provided:

* ``LogisticRegression`` -- multinomial logistic regression with an L2 penalty
  on every parameter (weights and bias). Convex.
* ``MLP`` -- one tanh hidden layer followed by a softmax output layer. Used for
  non-convex checks only.

Both operate on flat float64 vectors so the FL code can aggregate them
directly. Flat layout: each weight matrix row-major, followed by its bias,
layer by layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import DimensionError, softmax

DEFAULT_REG_EPSILON = 1e-4


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {x.shape}")
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise ValueError(
                f"label count {y.shape[0] if y.ndim == 1 else y.shape} "
                f"does not match {x.shape[0]} feature rows"
            )
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    @staticmethod
    def concat(parts: list["Dataset"]) -> "Dataset":
        if not parts:
            raise ValueError("cannot concatenate zero datasets")
        c = parts[0].num_classes
        return Dataset(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            c,
        )


def _one_hot(labels: np.ndarray, c: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], c))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    return lse - shifted[np.arange(labels.shape[0]), labels]


def _batch(data: Dataset, batch) -> tuple[np.ndarray, np.ndarray]:
    if batch is None:
        return data.features, data.labels
    if isinstance(batch, range):
        batch = slice(batch.start, batch.stop, batch.step)
    x, y = data.features[batch], data.labels[batch]
    if y.shape[0] == 0:
        raise ValueError("empty minibatch")
    return x, y


def _as_params(model_or_params) -> np.ndarray:
    if hasattr(model_or_params, "flatten"):
        model_or_params = model_or_params.flatten()
    return np.asarray(model_or_params, dtype=np.float64)


@dataclass(frozen=True)
class LogisticModel:
    weights: np.ndarray  # (d, C)
    bias: np.ndarray  # (C,)
    reg_epsilon: float = DEFAULT_REG_EPSILON

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.ravel(self.weights), self.bias]).astype(np.float64)

    @property
    def dim(self) -> int:
        return self.weights.size + self.bias.size


@dataclass(frozen=True)
class MlpModel:
    w1: np.ndarray  # (d, h)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (h, C)
    b2: np.ndarray  # (C,)
    reg_epsilon: float = DEFAULT_REG_EPSILON

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [np.ravel(self.w1), self.b1, np.ravel(self.w2), self.b2]
        ).astype(np.float64)

    @property
    def dim(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + self.b2.size


class LogisticRegression:
    """Softmax regression ``softmax(x W + b)`` with penalty ``eps * ||params||^2``."""

    name = "logistic"

    def __init__(self, num_features: int, num_classes: int, reg_epsilon: float = DEFAULT_REG_EPSILON):
        self.num_features = num_features
        self.num_classes = num_classes
        self.reg_epsilon = reg_epsilon

    @property
    def dim(self) -> int:
        return self.num_features * self.num_classes + self.num_classes

    def init_params(self, rng=None) -> np.ndarray:
        return np.zeros(self.dim)

    def unflatten(self, params) -> LogisticModel:
        p = np.asarray(params, dtype=np.float64)
        if p.shape != (self.dim,):
            raise DimensionError(f"expected {self.dim} parameters, got {p.shape}")
        d, c = self.num_features, self.num_classes
        return LogisticModel(p[: d * c].reshape(d, c).copy(), p[d * c :].copy(), self.reg_epsilon)

    def _check(self, data: Dataset) -> None:
        if data.num_features != self.num_features or data.num_classes != self.num_classes:
            raise DimensionError(
                f"model expects d={self.num_features}, C={self.num_classes}; "
                f"data has d={data.num_features}, C={data.num_classes}"
            )

    def logits(self, params, x: np.ndarray) -> np.ndarray:
        m = self.unflatten(_as_params(params))
        return x @ m.weights + m.bias

    def loss(self, params, data: Dataset) -> float:
        self._check(data)
        p = _as_params(params)
        ce = _cross_entropy(self.logits(p, data.features), data.labels)
        return float(ce.mean() + self.reg_epsilon * np.dot(p, p))

    def gradient(self, params, data: Dataset, batch=None) -> np.ndarray:
        self._check(data)
        p = _as_params(params)
        x, y = _batch(data, batch)
        m = self.unflatten(p)
        err = softmax(x @ m.weights + m.bias) - _one_hot(y, self.num_classes)
        err /= y.shape[0]
        grad = np.concatenate([np.ravel(x.T @ err), err.sum(axis=0)])
        return grad + 2.0 * self.reg_epsilon * p

    def predict(self, params, x: np.ndarray) -> np.ndarray:
        # np.argmax returns the first maximum: ties go to the smallest class.
        return np.argmax(self.logits(params, x), axis=1)

    def accuracy(self, params, data: Dataset) -> float:
        self._check(data)
        return float(np.mean(self.predict(params, data.features) == data.labels))


class MLP:
    """``softmax(tanh(x W1 + b1) W2 + b2)`` with the same L2 penalty."""

    name = "mlp"

    def __init__(
        self,
        num_features: int,
        num_classes: int,
        hidden: int = 32,
        reg_epsilon: float = DEFAULT_REG_EPSILON,
    ):
        self.num_features = num_features
        self.num_classes = num_classes
        self.hidden = hidden
        self.reg_epsilon = reg_epsilon

    @property
    def dim(self) -> int:
        d, h, c = self.num_features, self.hidden, self.num_classes
        return d * h + h + h * c + c

    def init_params(self, rng=None) -> np.ndarray:
        # Zero init would leave the hidden units symmetric forever.
        rng = rng if rng is not None else np.random.default_rng(0)
        d, h, c = self.num_features, self.hidden, self.num_classes
        w1 = rng.standard_normal((d, h)) / np.sqrt(d)
        w2 = rng.standard_normal((h, c)) / np.sqrt(h)
        return MlpModel(w1, np.zeros(h), w2, np.zeros(c), self.reg_epsilon).flatten()

    def unflatten(self, params) -> MlpModel:
        p = np.asarray(params, dtype=np.float64)
        if p.shape != (self.dim,):
            raise DimensionError(f"expected {self.dim} parameters, got {p.shape}")
        d, h, c = self.num_features, self.hidden, self.num_classes
        i = 0
        w1 = p[i : i + d * h].reshape(d, h)
        i += d * h
        b1 = p[i : i + h]
        i += h
        w2 = p[i : i + h * c].reshape(h, c)
        i += h * c
        b2 = p[i:]
        return MlpModel(w1.copy(), b1.copy(), w2.copy(), b2.copy(), self.reg_epsilon)

    def _check(self, data: Dataset) -> None:
        if data.num_features != self.num_features or data.num_classes != self.num_classes:
            raise DimensionError(
                f"model expects d={self.num_features}, C={self.num_classes}; "
                f"data has d={data.num_features}, C={data.num_classes}"
            )

    def _forward(self, m: MlpModel, x: np.ndarray):
        hid = np.tanh(x @ m.w1 + m.b1)
        return hid, hid @ m.w2 + m.b2

    def logits(self, params, x: np.ndarray) -> np.ndarray:
        return self._forward(self.unflatten(_as_params(params)), x)[1]

    def loss(self, params, data: Dataset) -> float:
        self._check(data)
        p = _as_params(params)
        ce = _cross_entropy(self.logits(p, data.features), data.labels)
        return float(ce.mean() + self.reg_epsilon * np.dot(p, p))

    def gradient(self, params, data: Dataset, batch=None) -> np.ndarray:
        self._check(data)
        p = _as_params(params)
        x, y = _batch(data, batch)
        m = self.unflatten(p)
        hid, out = self._forward(m, x)
        err = (softmax(out) - _one_hot(y, self.num_classes)) / y.shape[0]
        g_w2 = hid.T @ err
        g_b2 = err.sum(axis=0)
        back = (err @ m.w2.T) * (1.0 - hid * hid)
        g_w1 = x.T @ back
        g_b1 = back.sum(axis=0)
        grad = np.concatenate([np.ravel(g_w1), g_b1, np.ravel(g_w2), g_b2])
        return grad + 2.0 * self.reg_epsilon * p

    def predict(self, params, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(params, x), axis=1)

    def accuracy(self, params, data: Dataset) -> float:
        self._check(data)
        return float(np.mean(self.predict(params, data.features) == data.labels))


def make_workload(name: str, num_features: int, num_classes: int, **kwargs):
    if name == "logistic":
        return LogisticRegression(num_features, num_classes, **kwargs)
    if name == "mlp":
        return MLP(num_features, num_classes, **kwargs)
    raise ValueError(f"unknown workload {name!r}")
