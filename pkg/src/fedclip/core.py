"""Value types, the objective interface, keyed randomness and the clipped update.

Parameter vectors are plain 1-D ``float64`` numpy arrays. Every function here
returns fresh arrays and never mutates its inputs.
"""

from __future__ import annotations

import enum
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "FedClipError",
    "DimensionError",
    "NonFiniteError",
    "ConfigError",
    "UnsupportedConfiguration",
    "as_vector",
    "row_norms",
    "Objective",
    "NoiseModel",
    "NOISE_KINDS",
    "Purpose",
    "RngStream",
    "clip_step",
    "clip_rows",
    "finite_diff_gradient",
]


class FedClipError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(FedClipError, ValueError):
    pass


class NonFiniteError(FedClipError, ValueError):
    pass


class ConfigError(FedClipError, ValueError):
    """Invalid user-supplied configuration or hyperparameters."""


class UnsupportedConfiguration(ConfigError):
    pass


def as_vector(x, dim: int | None = None, name: str = "x") -> np.ndarray:
    """Copy ``x`` into a finite 1-D float64 array, optionally checking its length."""
    v = np.array(x, dtype=np.float64, copy=True).reshape(-1)
    if v.size == 0:
        raise DimensionError(f"{name} must have at least one coordinate")
    if dim is not None and v.size != dim:
        raise DimensionError(f"{name} has dim {v.size}, expected {dim}")
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"{name} contains non-finite values")
    return v


_SAFE_SQ = (1e-280, 1e300)


def row_norms(X: np.ndarray) -> np.ndarray:
    # Row-wise reduction keeps each row's result independent of how many rows
    # are stacked, which the thread-count determinism relies on.
    with np.errstate(over="ignore"):
        sq = (X * X).sum(axis=1)
    norms = np.sqrt(sq)
    # Rows whose squares under- or overflow are rescaled by their largest entry;
    # everything else keeps the plain formula bit for bit.
    redo = ((sq < _SAFE_SQ[0]) & (sq > 0.0)) | (sq > _SAFE_SQ[1]) | (sq == 0.0)
    redo &= np.all(np.isfinite(X), axis=1)
    if np.any(redo):
        rows = X[redo]
        m = np.abs(rows).max(axis=1)
        safe = np.where(m > 0.0, m, 1.0)
        norms[redo] = m * np.sqrt(((rows / safe[:, None]) ** 2).sum(axis=1))
    return norms


class Objective(ABC):
    """A client loss with exact gradient.

    Subclasses implement :meth:`value` and :meth:`grad` for a single 1-D point.
    """

    dim: int

    @abstractmethod
    def value(self, x: np.ndarray) -> float: ...

    @abstractmethod
    def grad(self, x: np.ndarray) -> np.ndarray: ...

    def value_and_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        return self.value(x), self.grad(x)

    def grad_rows(self, X: np.ndarray) -> np.ndarray:
        """Gradient at every row of ``X``; override when a vectorized form exists."""
        return np.stack([self.grad(row) for row in X])


NOISE_KINDS = ("none", "uniform-ball", "uniform-per-coordinate")


@dataclass(frozen=True)
class NoiseModel:
    """Additive zero-mean gradient noise with ``||n|| <= sigma`` almost surely.

    ``uniform-per-coordinate`` draws each coordinate uniformly on
    ``[-sigma/sqrt(d), sigma/sqrt(d)]``; ``uniform-ball`` draws each coordinate
    on ``[-sigma, sigma]`` and shrinks the vector radially onto the ball when
    it lands outside. Both reduce to uniform noise on ``[-sigma, sigma]`` in
    one dimension.
    """

    sigma: float = 0.0
    kind: str = "uniform-per-coordinate"

    def __post_init__(self):
        if not (self.sigma >= 0.0 and math.isfinite(self.sigma)):
            raise ConfigError(f"noise sigma must be finite and >= 0, got {self.sigma}")
        if self.kind not in NOISE_KINDS:
            raise ConfigError(f"unknown noise kind {self.kind!r}; expected one of {NOISE_KINDS}")

    @property
    def active(self) -> bool:
        return self.sigma > 0.0 and self.kind != "none"

    def from_uniform(self, U: np.ndarray) -> np.ndarray:
        """Map uniforms on ``[0, 1)`` of shape ``(m, d)`` to noise rows."""
        U = np.asarray(U, dtype=np.float64)
        if not self.active:
            return np.zeros_like(U)
        d = U.shape[-1]
        if self.kind == "uniform-per-coordinate":
            half_width = self.sigma if d == 1 else self.sigma / math.sqrt(d)
            n = (2.0 * U - 1.0) * half_width
        else:
            n = (2.0 * U - 1.0) * self.sigma
        if d == 1:
            return n
        norms = row_norms(n)
        over = norms > self.sigma
        if np.any(over):
            # the (1 - 4 eps) factor absorbs rounding in the rescale
            scale = np.where(over, self.sigma / np.where(over, norms, 1.0) * (1.0 - 4e-16), 1.0)
            n = n * scale[:, None]
        return n


class Purpose(enum.IntEnum):
    """Tags separating independent random streams inside one run."""

    CONTROL = 1
    LOCAL = 2
    PARTITION = 3
    DATA = 4
    INIT = 5
    GRID = 6


_MASK64 = (1 << 64) - 1
_GOLDEN_INT = 0x9E3779B97F4A7C15
_GOLDEN = np.uint64(_GOLDEN_INT)
_KEY_SALTS_INT = (0xD1B54A32D192ED03, 0xABC98388FB8FAC03, 0x8CB92BA72F3D8DD7, 0xDB4F0B9175AE2165)
_KEY_SALTS = tuple(np.uint64(c) for c in _KEY_SALTS_INT)


def _mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer on a uint64 array (wrapping arithmetic)."""
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _mix64_int(z: int) -> int:
    """Scalar twin of :func:`_mix64` on Python ints."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class RngStream:
    """Counter-based random numbers keyed by ``(purpose, round, iteration, client)``.

    A draw is a pure function of the seed and its key, so results do not
    depend on which thread computes them or in which order.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64

    def _keys(self, purpose: int, round_index: int, iteration: int, clients) -> np.ndarray:
        clients = np.atleast_1d(np.asarray(clients, dtype=np.uint64))
        h = _mix64_int(self.seed + _GOLDEN_INT)
        for salt, part in zip(_KEY_SALTS_INT, (purpose, round_index, iteration)):
            h = _mix64_int(h ^ _mix64_int(int(part) + salt))
        with np.errstate(over="ignore"):
            return _mix64(np.uint64(h) ^ _mix64(clients + _KEY_SALTS[3]))

    def uniform(self, purpose: int, round_index: int, iteration: int, clients, size: int) -> np.ndarray:
        """Uniforms on ``[0, 1)`` of shape ``(len(clients), size)``."""
        h = self._keys(purpose, round_index, iteration, clients)
        counters = np.arange(1, size + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = _mix64(h[:, None] + counters[None, :] * _GOLDEN)
        return (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def generator(self, purpose: int, round_index: int = 0, iteration: int = 0, client: int = 0) -> np.random.Generator:
        """A numpy Generator seeded from the same key, for bulk one-off draws."""
        ss = np.random.SeedSequence(
            entropy=self.seed, spawn_key=(int(purpose), int(round_index), int(iteration), int(client))
        )
        return np.random.Generator(np.random.PCG64(ss))

    def derive_seed(self, *key: int) -> int:
        h = self._keys(Purpose.GRID, key[0] if key else 0, key[1] if len(key) > 1 else 0, 0)
        return int(h[0])


def _check_step_args(eta: float, gamma: float):
    if not (eta > 0 and math.isfinite(eta)):
        raise ConfigError(f"eta must be a positive finite number, got {eta}")
    if not (gamma > 0 and math.isfinite(gamma)):
        raise ConfigError(f"gamma must be a positive finite number, got {gamma}")


def clip_step(x, g, eta: float, gamma: float, clip: bool) -> np.ndarray:
    """One local update: ``x - eta*g`` or, when ``clip``, ``x - gamma*g/||g||``.

    A zero direction in the clipped branch leaves ``x`` unchanged.
    """
    _check_step_args(eta, gamma)
    x = as_vector(x, name="x")
    g = as_vector(g, dim=x.size, name="g")
    if not clip:
        return x - eta * g
    norm = float(row_norms(g[None, :])[0])
    if norm == 0.0:
        return x
    return x - gamma * (g / norm)


def clip_rows(X: np.ndarray, G: np.ndarray, eta: float, gamma: float, clip) -> np.ndarray:
    """Row-wise :func:`clip_step` for stacked iterates; ``clip`` is a bool or per-row mask.

    Non-finite values propagate instead of raising, so the engine can flag
    divergence after the round.
    """
    out = X - eta * G
    if clip is False or clip is np.False_:
        return out
    clip = np.broadcast_to(np.asarray(clip, dtype=bool), (X.shape[0],))
    if np.any(clip):
        norms = row_norms(G)
        moving = clip & (norms > 0.0)
        safe = np.where(moving, norms, 1.0)
        clipped = X - gamma * (G / safe[:, None])
        out = np.where(moving[:, None], clipped, out)
        out = np.where((clip & ~moving)[:, None], X, out)
    return out


def finite_diff_gradient(obj: Objective, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``obj`` at ``x``."""
    if not h > 0:
        raise ConfigError(f"finite-difference step must be positive, got {h}")
    x = as_vector(x, dim=getattr(obj, "dim", None))
    out = np.empty_like(x)
    for j in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        fp, fm = obj.value(xp), obj.value(xm)
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"objective is not finite near x along coordinate {j}")
        out[j] = (fp - fm) / (2.0 * h)
    return out


def mean_rows(X: np.ndarray) -> np.ndarray:
    """Average of the rows of ``X``, summed in ascending row order."""
    acc = X[0].copy()
    for row in X[1:]:
        acc += row
    return acc / X.shape[0]


def validate_dims(vectors: Sequence[np.ndarray]):
    dims = {np.asarray(v).shape[-1] for v in vectors}
    if len(dims) > 1:
        raise DimensionError(f"mismatched dimensions {sorted(dims)}")
