"""Closed-form client objectives and the stochastic gradient oracle."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from fedclip.core import (
    ConfigError,
    DimensionError,
    FedClipError,
    NoiseModel,
    NonFiniteError,
    Objective,
    Purpose,
    RngStream,
    as_vector,
    mean_rows,
)

__all__ = [
    "QuarticObjective",
    "QuadraticObjective",
    "LogisticObjective",
    "SyntheticClassification",
    "FederatedProblem",
    "quartic_eval",
    "quadratic_eval",
    "kappa_H",
    "logistic_eval",
    "sample_stochastic_gradient",
    "make_quartic_problem",
    "make_quadratic_problem",
    "make_logistic_problem",
    "make_classification",
    "quartic_global_minimizer",
]


# -- quartic pair -----------------------------------------------------------

def _quartic_coef(H: float, client: int) -> float:
    if client not in (1, 2):
        raise ConfigError(f"quartic client must be 1 or 2, got {client}")
    return H if client == 1 else -2.0 * H


def quartic_eval(H: float, client: int, x: float) -> tuple[float, float]:
    """Value and derivative of ``x^4 - 3x^3 + c x^2 + x`` with ``c = H`` or ``-2H``."""
    if H < 1:
        raise ConfigError(f"H must be >= 1, got {H}")
    if not math.isfinite(x):
        raise NonFiniteError("x must be finite")
    c = _quartic_coef(H, client)
    value = x**4 - 3.0 * x**3 + c * x**2 + x
    grad = 4.0 * x**3 - 9.0 * x**2 + 2.0 * c * x + 1.0
    return value, grad


class QuarticObjective(Objective):
    def __init__(self, H: float, client: int):
        if H < 1:
            raise ConfigError(f"H must be >= 1, got {H}")
        self.H = float(H)
        self.client = client
        self.coef = _quartic_coef(self.H, client)
        self.dim = 1

    def value(self, x):
        x = float(np.asarray(x).reshape(-1)[0])
        return x**4 - 3.0 * x**3 + self.coef * x**2 + x

    def grad(self, x):
        return self.grad_rows(np.asarray(x, dtype=np.float64).reshape(1, 1))[0]

    def grad_rows(self, X):
        return 4.0 * X**3 - 9.0 * X**2 + 2.0 * self.coef * X + 1.0

    def hessian(self, x: float) -> float:
        return 12.0 * x**2 - 18.0 * x + 2.0 * self.coef

    def __repr__(self):
        return f"QuarticObjective(H={self.H}, client={self.client})"


def kappa_H(H: float) -> float:
    """Heterogeneity offset for the quartic pair at ``rho = 2``.

    ``||f_i'(x)|| <= 2 ||f'(x)|| + kappa_H(H)`` for every real ``x``.
    """
    if not H >= 1:
        raise ConfigError(f"kappa_H requires H >= 1, got {H}")
    root = (-18.0 + math.sqrt(18.0**2 + 480.0 * H)) / 24.0
    return 9.0 * root**2 + 10.0 * H * root + 25.0 * H**2 / 3.0 + 45.0 * H + 100.0


# -- quadratic counterexample -----------------------------------------------

def _quadratic_offset(gamma: float, client: int) -> float:
    if not gamma > 1:
        raise ConfigError(f"the quadratic counterexample needs gamma > 1, got {gamma}")
    if client == 1:
        return -gamma - 1.0
    if client == 2:
        return gamma + 2.0
    raise ConfigError(f"quadratic client must be 1 or 2, got {client}")


def quadratic_eval(gamma: float, client: int, x: float) -> tuple[float, float]:
    """Value and derivative of ``x^2/2 + a x`` with ``a = -gamma-1`` or ``gamma+2``."""
    a = _quadratic_offset(gamma, client)
    return 0.5 * x * x + a * x, x + a


class QuadraticObjective(Objective):
    def __init__(self, gamma: float, client: int):
        self.gamma = float(gamma)
        self.client = client
        self.offset = _quadratic_offset(self.gamma, client)
        self.dim = 1

    def value(self, x):
        x = float(np.asarray(x).reshape(-1)[0])
        return 0.5 * x * x + self.offset * x

    def grad(self, x):
        return np.asarray(x, dtype=np.float64).reshape(1) + self.offset

    def grad_rows(self, X):
        return X + self.offset

    def __repr__(self):
        return f"QuadraticObjective(gamma={self.gamma}, client={self.client})"


# -- synthetic classification -------------------------------------------------

@dataclass
class SyntheticClassification:
    """Labelled samples with optional per-client index lists."""

    features: np.ndarray
    labels: np.ndarray
    k: int
    partitions: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise DimensionError("features must be (n, d) with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.k):
            raise ConfigError(f"labels must lie in [0, {self.k})")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def to_csv(self, path) -> None:
        """Write feature columns followed by a ``label`` column."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"x{j}" for j in range(self.d)] + ["label"])
            for row, lab in zip(self.features, self.labels):
                w.writerow([repr(float(v)) for v in row] + [int(lab)])

    @classmethod
    def from_csv(cls, path, k: int | None = None) -> "SyntheticClassification":
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))
        if len(rows) < 2 or rows[0][-1] != "label":
            raise FedClipError(f"{path}: expected a header ending in 'label' and at least one row")
        body = np.array([[float(v) for v in r] for r in rows[1:]])
        labels = body[:, -1].astype(np.int64)
        return cls(body[:, :-1], labels, k if k is not None else int(labels.max()) + 1)


def make_classification(n: int, d: int, k: int, separation: float = 2.0, seed: int = 0) -> SyntheticClassification:
    """Gaussian class clusters with unit covariance and balanced labels.

    Class means are drawn from ``N(0, separation^2 I)``.
    """
    if n < 1 or d < 1 or k < 2:
        raise ConfigError("need n >= 1, d >= 1 and k >= 2")
    rng = RngStream(seed).generator(Purpose.DATA)
    means = rng.normal(scale=separation, size=(k, d))
    labels = np.arange(n) % k
    rng.shuffle(labels)
    features = means[labels] + rng.normal(size=(n, d))
    return SyntheticClassification(features, labels, k)


def _softmax(Z: np.ndarray) -> np.ndarray:
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


class LogisticObjective(Objective):
    """Mean multinomial cross-entropy over a fixed sample set.

    The parameter vector is the row-major flattening of a ``(d, k)`` weight
    matrix; there is no bias term.
    """

    def __init__(self, features: np.ndarray, labels: np.ndarray, k: int):
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if features.shape[0] == 0:
            raise FedClipError("client has no samples")
        self.features = features
        self.labels = labels
        self.k = int(k)
        self.d = features.shape[1]
        self.dim = self.d * self.k
        self._onehot = np.eye(self.k)[labels]

    def _logits(self, x):
        W = np.asarray(x, dtype=np.float64).reshape(self.d, self.k)
        return self.features @ W

    def value(self, x):
        Z = self._logits(x)
        zmax = Z.max(axis=1, keepdims=True)
        lse = (zmax + np.log(np.exp(Z - zmax).sum(axis=1, keepdims=True)))[:, 0]
        return float(np.mean(lse - Z[np.arange(Z.shape[0]), self.labels]))

    def grad(self, x):
        P = _softmax(self._logits(x))
        return (self.features.T @ (P - self._onehot) / self.features.shape[0]).reshape(-1)


def logistic_eval(data: SyntheticClassification, client: int, x) -> tuple[float, np.ndarray]:
    """Loss and gradient of the multinomial logistic model on one client's samples."""
    if client >= len(data.partitions) or len(data.partitions[client]) == 0:
        raise FedClipError(f"client {client} has no samples")
    idx = data.partitions[client]
    obj = LogisticObjective(data.features[idx], data.labels[idx], data.k)
    x = as_vector(x, dim=obj.dim)
    return obj.value(x), obj.grad(x)


# -- federated problem ----------------------------------------------------------

class FederatedProblem:
    """The clients' objectives plus global averages over them.

    Client ids are 0-based; averages are taken in ascending client order.
    """

    family = "custom"

    def __init__(self, objectives: Sequence[Objective], params: dict | None = None):
        if not objectives:
            raise ConfigError("need at least one client objective")
        dims = {o.dim for o in objectives}
        if len(dims) != 1:
            raise DimensionError(f"client objectives disagree on dimension: {sorted(dims)}")
        self.objectives = list(objectives)
        self.dim = dims.pop()
        self.params = dict(params or {})

    @property
    def n_clients(self) -> int:
        return len(self.objectives)

    def client_grads(self, clients: np.ndarray, X: np.ndarray) -> np.ndarray:
        """Exact gradient of client ``clients[j]`` at row ``X[j]``."""
        return np.stack([self.objectives[c].grad(X[j]) for j, c in enumerate(clients)])

    def global_value(self, x) -> float:
        total = 0.0
        for obj in self.objectives:
            total += obj.value(x)
        return total / self.n_clients

    def global_grad(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return mean_rows(np.stack([obj.grad(x) for obj in self.objectives]))

    def stochastic_grads(self, clients, X, noise: NoiseModel, rng: RngStream,
                         purpose: int, round_index: int, iteration: int) -> np.ndarray:
        clients = np.asarray(clients)
        G = self.client_grads(clients, X)
        if noise.active:
            U = rng.uniform(purpose, round_index, iteration, clients, self.dim)
            G = G + noise.from_uniform(U)
        return G


class _CoefficientProblem(FederatedProblem):
    """Problems whose clients differ by one scalar coefficient; gradients vectorize."""

    def __init__(self, objectives, params=None):
        super().__init__(objectives, params)
        self._coef = np.array([self._client_coef(o) for o in self.objectives])

    def client_grads(self, clients, X):
        return self._grad_formula(X, self._coef[np.asarray(clients)][:, None])


class QuarticProblem(_CoefficientProblem):
    family = "quartic"

    @staticmethod
    def _client_coef(obj):
        return obj.coef

    @staticmethod
    def _grad_formula(X, c):
        return 4.0 * X**3 - 9.0 * X**2 + 2.0 * c * X + 1.0


class QuadraticProblem(_CoefficientProblem):
    family = "quadratic"

    @staticmethod
    def _client_coef(obj):
        return obj.offset

    @staticmethod
    def _grad_formula(X, c):
        return X + c


def make_quartic_problem(H: float, n_clients: int = 2) -> QuarticProblem:
    """Quartic pair; with more than two clients the pair is repeated (f1, f2, f1, ...)."""
    if n_clients < 2 or n_clients % 2:
        raise ConfigError("the quartic family needs an even number of clients (>= 2)")
    objs = [QuarticObjective(H, 1 + (i % 2)) for i in range(n_clients)]
    return QuarticProblem(objs, {"H": float(H)})


def make_quadratic_problem(gamma: float) -> QuadraticProblem:
    return QuadraticProblem([QuadraticObjective(gamma, 1), QuadraticObjective(gamma, 2)],
                            {"gamma": float(gamma)})


def make_logistic_problem(data: SyntheticClassification, partitions=None) -> FederatedProblem:
    parts = data.partitions if partitions is None else partitions
    if not parts:
        raise ConfigError("logistic problem needs per-client index lists")
    objs = []
    for c, idx in enumerate(parts):
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size == 0:
            raise FedClipError(f"client {c} has no samples")
        objs.append(LogisticObjective(data.features[idx], data.labels[idx], data.k))
    problem = FederatedProblem(objs, {"d": data.d, "k": data.k, "n": data.n})
    problem.family = "logistic"
    return problem


def sample_stochastic_gradient(obj: Objective, x, noise: NoiseModel, rng: RngStream,
                               client: int = 0, round_index: int = 0, iteration: int = 0,
                               purpose: int = Purpose.LOCAL) -> np.ndarray:
    """Exact gradient plus one bounded noise draw taken from the given key."""
    x = as_vector(x, dim=obj.dim)
    g = obj.grad(x)
    if not noise.active:
        return g
    U = rng.uniform(purpose, round_index, iteration, [client], obj.dim)
    return g + noise.from_uniform(U)[0]


def quartic_global_minimizer(H: float, lo: float = -10.0, hi: float = 10.0, step: float = 1e-5) -> float:
    """Brute-force grid minimizer of the averaged quartic ``x^4 - 3x^3 - (H/2)x^2 + x``."""
    x = np.linspace(lo, hi, int(round((hi - lo) / step)) + 1)
    f = x**4 - 3.0 * x**3 - 0.5 * H * x**2 + x
    return float(x[np.argmin(f)])
