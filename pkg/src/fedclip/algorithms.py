"""Round-level federated algorithms and the training loop.

All clients' local iterates are held as one ``(N, d)`` array. Local phases may
be split across worker threads by contiguous client blocks; every random draw
comes from a keyed :class:`~fedclip.core.RngStream`, so the result does not
depend on the number of workers.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from fedclip.core import (
    ConfigError,
    NoiseModel,
    Purpose,
    RngStream,
    as_vector,
    clip_rows,
    mean_rows,
    row_norms,
    validate_dims,
)
from fedclip.objectives import FederatedProblem

__all__ = [
    "ALGORITHMS",
    "DIVERGENCE_LIMIT",
    "HyperParams",
    "RoundState",
    "ClientState",
    "RoundResult",
    "RoundRecord",
    "Trajectory",
    "LocalRunner",
    "resample_controls",
    "corrected_gradient",
    "episode_round",
    "celgc_round",
    "fedavg_round",
    "scaffold_round",
    "naive_parallel_step",
    "run_training",
    "TRAJECTORY_COLUMNS",
]

ALGORITHMS = (
    "episode",
    "episode_unclipped",
    "celgc",
    "fedavg",
    "scaffold",
    "scaffold_clipped",
    "naive_parallel_clip",
)

DIVERGENCE_LIMIT = 1e12


@dataclass(frozen=True)
class HyperParams:
    """Local step size ``eta``, clipping length ``gamma``, interval ``I``,
    round count ``R`` (rounds actually executed) and client count ``N``."""

    eta: float
    gamma: float
    I: int
    R: int
    N: int

    def __post_init__(self):
        if not (self.eta > 0 and math.isfinite(self.eta)):
            raise ConfigError(f"eta must be positive and finite, got {self.eta}")
        if not (self.gamma > 0 and math.isfinite(self.gamma)):
            raise ConfigError(f"gamma must be positive and finite, got {self.gamma}")
        if int(self.I) != self.I or self.I < 1:
            raise ConfigError(f"I must be an integer >= 1, got {self.I}")
        if int(self.R) != self.R or self.R < 0:
            raise ConfigError(f"R must be an integer >= 0, got {self.R}")
        if int(self.N) != self.N or self.N < 1:
            raise ConfigError(f"N must be an integer >= 1, got {self.N}")

    @property
    def threshold(self) -> float:
        """Gradient-norm level ``gamma / eta`` above which updates are clipped."""
        return self.gamma / self.eta

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RoundState:
    round_index: int
    client_controls: np.ndarray  # (N, d)
    global_control: np.ndarray  # (d,)
    clip_round: bool


@dataclass
class ClientState:
    """Per-client state, stacked over clients.

    ``iterates[i]`` is client i's local model and ``controls[i]`` its SCAFFOLD
    control variate; ``server_control`` is SCAFFOLD's global control.
    """

    iterates: np.ndarray
    controls: np.ndarray
    server_control: np.ndarray

    @classmethod
    def synchronized(cls, xbar: np.ndarray, n_clients: int) -> "ClientState":
        d = xbar.size
        return cls(np.tile(xbar, (n_clients, 1)), np.zeros((n_clients, d)), np.zeros(d))

    def broadcast(self, xbar: np.ndarray) -> None:
        self.iterates[:] = xbar


@dataclass
class RoundResult:
    xbar: np.ndarray
    clipped: bool
    max_discrepancy: float
    round_state: RoundState | None = None
    trace: np.ndarray | None = None  # (I, N, d): iterates after each local step


class LocalRunner:
    """Runs a per-client local phase over contiguous client blocks.

    With ``threads > 1`` blocks run on a thread pool; the merged result is
    identical to the single-block run because rows never interact.
    """

    def __init__(self, n_clients: int, threads: int = 1):
        threads = max(1, min(int(threads), n_clients))
        self.blocks = [b for b in np.array_split(np.arange(n_clients), threads) if b.size]
        self._pool = ThreadPoolExecutor(max_workers=len(self.blocks)) if len(self.blocks) > 1 else None

    def close(self):
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def run(self, step: Callable[[np.ndarray, np.ndarray, int], np.ndarray],
            X0: np.ndarray, xbar: np.ndarray, I: int, record: bool = False):
        """Apply ``step(clients, X, t)`` for ``t = 0..I-1``.

        Returns the final iterates, the largest distance of any local iterate
        from ``xbar`` and, when ``record``, the ``(I, N, d)`` iterate history.
        """

        def block(idx):
            X = X0[idx].copy()
            disc = 0.0
            hist = [] if record else None
            # errstate is per thread, so it is set inside the worker
            with np.errstate(invalid="ignore", over="ignore"):
                for t in range(I):
                    X = step(idx, X, t)
                    m = float(row_norms(X - xbar).max())
                    disc = m if not (m <= disc) else disc  # keeps NaN visible
                    if record:
                        hist.append(X.copy())
            return X, disc, hist

        if self._pool is None:
            parts = [block(b) for b in self.blocks]
        else:
            parts = list(self._pool.map(block, self.blocks))
        X = np.concatenate([p[0] for p in parts])
        discs = [p[1] for p in parts]
        disc = float("nan") if any(math.isnan(v) for v in discs) else max(discs)
        trace = None
        if record:
            trace = np.concatenate([np.stack(p[2]) for p in parts], axis=1) if I else np.empty((0,) + X.shape)
        return X, disc, trace


def _runner(runner: LocalRunner | None, n: int) -> LocalRunner:
    return runner if runner is not None else LocalRunner(n, 1)


def resample_controls(problem: FederatedProblem, xbar, noise: NoiseModel, rng: RngStream,
                      round_index: int = 0, threshold: float | None = None) -> RoundState:
    """Fresh stochastic gradient per client at ``xbar`` and their mean.

    ``clip_round`` is set when ``threshold`` is given and the mean's norm
    strictly exceeds it.
    """
    xbar = as_vector(xbar, dim=problem.dim, name="xbar")
    clients = np.arange(problem.n_clients)
    X = np.tile(xbar, (problem.n_clients, 1))
    Gi = problem.stochastic_grads(clients, X, noise, rng, Purpose.CONTROL, round_index, 0)
    G = mean_rows(Gi)
    clip = bool(threshold is not None and float(np.sqrt((G * G).sum())) > threshold)
    return RoundState(round_index, Gi, G, clip)


def corrected_gradient(local, G_i, G) -> np.ndarray:
    """``local - G_i + G``.

    Evaluated as ``local + (G - G_i)`` so that the correction vanishes exactly
    when ``G == G_i`` (for instance with a single client).
    """
    local = np.asarray(local, dtype=np.float64)
    G_i = np.asarray(G_i, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    validate_dims([local, G_i, G])
    return local + (G - G_i)


def episode_round(state: ClientState, xbar, hp: HyperParams, problem: FederatedProblem,
                  noise: NoiseModel, rng: RngStream, round_index: int = 0, *,
                  clipping: bool = True, runner: LocalRunner | None = None,
                  record: bool = False) -> RoundResult:
    """One round of episodic clipping with resampled corrections.

    The clip decision is made once from the resampled global control and
    applies to every local step of every client. ``clipping=False`` gives
    the unclipped ablation.
    """
    xbar = as_vector(xbar, dim=problem.dim, name="xbar")
    rs = resample_controls(problem, xbar, noise, rng, round_index, hp.threshold if clipping else None)
    Gi, G = rs.client_controls, rs.global_control
    shift = G[None, :] - Gi  # (N, d) per-client correction

    def step(idx, X, t):
        local = problem.stochastic_grads(idx, X, noise, rng, Purpose.LOCAL, round_index, t)
        return clip_rows(X, local + shift[idx], hp.eta, hp.gamma, rs.clip_round)

    X, disc, trace = _runner(runner, problem.n_clients).run(step, state.iterates, xbar, hp.I, record)
    new_xbar = mean_rows(X)
    state.iterates = X
    return RoundResult(new_xbar, rs.clip_round, disc, rs, trace)


def celgc_round(state: ClientState, xbar, hp: HyperParams, problem: FederatedProblem,
                noise: NoiseModel, rng: RngStream, round_index: int = 0, *,
                runner: LocalRunner | None = None, record: bool = False) -> RoundResult:
    """Local clipped SGD on each client's own gradient, then averaging."""
    xbar = as_vector(xbar, dim=problem.dim, name="xbar")
    clipped_any = [False]

    def step(idx, X, t):
        g = problem.stochastic_grads(idx, X, noise, rng, Purpose.LOCAL, round_index, t)
        mask = row_norms(g) > hp.threshold
        if mask.any():
            clipped_any[0] = True
        return clip_rows(X, g, hp.eta, hp.gamma, mask)

    X, disc, trace = _runner(runner, problem.n_clients).run(step, state.iterates, xbar, hp.I, record)
    state.iterates = X
    return RoundResult(mean_rows(X), clipped_any[0], disc, None, trace)


def fedavg_round(state: ClientState, xbar, hp: HyperParams, problem: FederatedProblem,
                 noise: NoiseModel, rng: RngStream, round_index: int = 0, *,
                 runner: LocalRunner | None = None, record: bool = False) -> RoundResult:
    xbar = as_vector(xbar, dim=problem.dim, name="xbar")

    def step(idx, X, t):
        g = problem.stochastic_grads(idx, X, noise, rng, Purpose.LOCAL, round_index, t)
        return clip_rows(X, g, hp.eta, hp.gamma, False)

    X, disc, trace = _runner(runner, problem.n_clients).run(step, state.iterates, xbar, hp.I, record)
    state.iterates = X
    return RoundResult(mean_rows(X), False, disc, None, trace)


def scaffold_round(state: ClientState, xbar, hp: HyperParams, problem: FederatedProblem,
                   noise: NoiseModel, rng: RngStream, round_index: int = 0, *,
                   clipped: bool = False, runner: LocalRunner | None = None,
                   record: bool = False) -> RoundResult:
    """SCAFFOLD with full participation and the difference-quotient control update.

    Local direction is ``grad - c_i + c``; with ``clipped`` that corrected
    direction is clipped per step at ``gamma / eta``. After the local phase
    ``c_i <- c_i - c + (xbar - y_i) / (I eta)`` and ``c`` moves by the mean
    change of the ``c_i``.
    """
    xbar = as_vector(xbar, dim=problem.dim, name="xbar")
    shift = state.server_control[None, :] - state.controls
    clipped_any = [False]

    def step(idx, X, t):
        g = problem.stochastic_grads(idx, X, noise, rng, Purpose.LOCAL, round_index, t)
        d = g + shift[idx]
        mask = False
        if clipped:
            mask = row_norms(d) > hp.threshold
            if mask.any():
                clipped_any[0] = True
        return clip_rows(X, d, hp.eta, hp.gamma, mask)

    X, disc, trace = _runner(runner, problem.n_clients).run(step, state.iterates, xbar, hp.I, record)
    with np.errstate(invalid="ignore", over="ignore"):
        new_controls = state.controls - state.server_control[None, :] + (xbar[None, :] - X) / (hp.I * hp.eta)
        state.server_control = state.server_control + mean_rows(new_controls - state.controls)
    state.controls = new_controls
    state.iterates = X
    return RoundResult(mean_rows(X), clipped_any[0], disc, None, trace)


def naive_parallel_step(xbar, hp: HyperParams, problem: FederatedProblem, noise: NoiseModel,
                        rng: RngStream, round_index: int = 0, iteration: int = 0) -> tuple[np.ndarray, bool]:
    """One clipped SGD step on the average of N fresh stochastic gradients at ``xbar``.

    Returns the new iterate and whether the step was clipped.
    """
    xbar = np.asarray(xbar, dtype=np.float64)
    clients = np.arange(problem.n_clients)
    g = mean_rows(problem.stochastic_grads(clients, np.tile(xbar, (problem.n_clients, 1)),
                                           noise, rng, Purpose.LOCAL, round_index, iteration))
    clip = bool(float(np.sqrt((g * g).sum())) > hp.threshold)
    return clip_rows(xbar[None, :], g[None, :], hp.eta, hp.gamma, clip)[0], clip


def _naive_round(state, xbar, hp, problem, noise, rng, round_index, *, runner=None, record=False):
    # I synchronized steps per round keeps the gradient budget equal to the
    # local-update methods.
    x = as_vector(xbar, dim=problem.dim, name="xbar")
    clipped = False
    hist = []
    with np.errstate(invalid="ignore", over="ignore"):
        for t in range(hp.I):
            x, c = naive_parallel_step(x, hp, problem, noise, rng, round_index, t)
            clipped |= c
            if record:
                hist.append(np.tile(x, (problem.n_clients, 1)))
    state.iterates = np.tile(x, (problem.n_clients, 1))
    trace = np.stack(hist) if record else None
    return RoundResult(x, clipped, 0.0, None, trace)


_ROUND_FUNCS = {
    "episode": episode_round,
    "episode_unclipped": lambda *a, **k: episode_round(*a, clipping=False, **k),
    "celgc": celgc_round,
    "fedavg": fedavg_round,
    "scaffold": lambda *a, **k: scaffold_round(*a, clipped=False, **k),
    "scaffold_clipped": lambda *a, **k: scaffold_round(*a, clipped=True, **k),
    "naive_parallel_clip": _naive_round,
}


TRAJECTORY_COLUMNS = ("round", "loss", "grad_norm", "clipped", "max_discrepancy", "elapsed_ms")


@dataclass
class RoundRecord:
    """Metrics at the averaged iterate after ``round`` rounds.

    ``clipped`` and ``max_discrepancy`` describe the round that produced this
    iterate (both are off/zero for the initial point).
    """

    round: int
    loss: float
    grad_norm: float
    clipped: bool
    max_discrepancy: float
    elapsed_ms: float = 0.0


@dataclass
class RoundTrace:
    round_index: int
    clipped: bool
    xbar: np.ndarray
    iterates: np.ndarray  # (I, N, d)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


@dataclass
class Trajectory:
    algorithm: str
    hp: HyperParams
    records: list[RoundRecord] = field(default_factory=list)
    xbars: list[np.ndarray] = field(default_factory=list)
    traces: list[RoundTrace] = field(default_factory=list)
    status: str = "completed"
    diverged_at: int | None = None

    @property
    def rounds_executed(self) -> int:
        return len(self.records) - 1

    @property
    def final(self) -> RoundRecord:
        return self.records[-1]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for r in self.records:
            w.writerow([r.round, _fmt(r.loss), _fmt(r.grad_norm), int(r.clipped),
                        _fmt(r.max_discrepancy), _fmt(r.elapsed_ms)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.csv_text())

    def sha256(self) -> str:
        return hashlib.sha256(self.csv_text().encode()).hexdigest()


def _diverged(x: np.ndarray) -> bool:
    return not np.all(np.isfinite(x)) or bool(np.max(np.abs(x)) > DIVERGENCE_LIMIT)


def run_training(algo: str, hp: HyperParams, problem: FederatedProblem, noise: NoiseModel,
                 seed: int, x0=None, *, monitor: bool = False, threads: int = 1,
                 timing: bool = False) -> Trajectory:
    """Run ``hp.R`` rounds of ``algo`` from ``x0`` (zeros by default).

    A non-finite iterate or any coordinate beyond ``DIVERGENCE_LIMIT`` ends the
    run with status ``"diverged"``; completed rounds are kept. ``timing``
    fills ``elapsed_ms`` with wall-clock time, otherwise it is written as zero
    so that trajectories are byte-reproducible.
    """
    if algo not in _ROUND_FUNCS:
        raise ConfigError(f"unknown algorithm {algo!r}; expected one of {ALGORITHMS}")
    if hp.N != problem.n_clients:
        raise ConfigError(f"hp.N={hp.N} but the problem has {problem.n_clients} clients")
    xbar = np.zeros(problem.dim) if x0 is None else as_vector(x0, dim=problem.dim, name="x0")
    rng = RngStream(seed)
    round_fn = _ROUND_FUNCS[algo]
    state = ClientState.synchronized(xbar, problem.n_clients)
    traj = Trajectory(algo, hp)
    start = time.perf_counter()

    def record(r, x, clipped, disc):
        g = problem.global_grad(x)
        elapsed = (time.perf_counter() - start) * 1e3 if timing else 0.0
        traj.records.append(RoundRecord(r, problem.global_value(x), float(np.sqrt((g * g).sum())),
                                        bool(clipped), float(disc), elapsed))
        traj.xbars.append(x.copy())

    record(0, xbar, False, 0.0)
    with LocalRunner(problem.n_clients, threads) as runner:
        for r in range(hp.R):
            with np.errstate(over="ignore", invalid="ignore"):
                res = round_fn(state, xbar, hp, problem, noise, rng, r, runner=runner, record=monitor)
            if _diverged(res.xbar) or _diverged(state.iterates):
                traj.status = "diverged"
                traj.diverged_at = r + 1
                break
            if monitor:
                traj.traces.append(RoundTrace(r, res.clipped, xbar.copy(), res.trace))
            xbar = res.xbar
            state.broadcast(xbar)
            record(r + 1, xbar, res.clipped, res.max_discrepancy)
    return traj
