"""Experiment support: step-size theory, partitioning, monitors and sweeps."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from fedclip.algorithms import HyperParams, RoundTrace, Trajectory, run_training
from fedclip.core import (
    ConfigError,
    FedClipError,
    NoiseModel,
    Purpose,
    RngStream,
    UnsupportedConfiguration,
    row_norms,
)
from fedclip.objectives import FederatedProblem, QuarticObjective

__all__ = [
    "ProblemConstants",
    "TheoremResolution",
    "PartitionSpec",
    "Violation",
    "MonitorReport",
    "GridResult",
    "smoothness_constants_AB",
    "theorem1_hyperparams",
    "lemma1_premises",
    "partition_by_similarity",
    "discrepancy_monitor",
    "monitor_trajectory",
    "stationarity_metric",
    "heterogeneity_check",
    "grid_search",
    "relaxed_smoothness_L0",
    "quartic_constants",
    "DivergedTrajectoryWarning",
    "THEOREM_CONSTANTS",
]


def smoothness_constants_AB(C: float = 1.0) -> tuple[float, float]:
    """``A = 1 + e^C - (e^C - 1)/C`` and ``B = (e^C - 1)/C`` for ``C >= 1``."""
    if not C >= 1:
        raise ConfigError(f"C must be >= 1 so that A, B >= 1; got {C}")
    em1 = math.expm1(C)
    B = em1 / C
    # grouped so that C = 1 gives A = 2 exactly
    return 2.0 + (em1 - B), B


@dataclass(frozen=True)
class ProblemConstants:
    L0: float
    L1: float
    kappa: float
    rho: float
    sigma: float
    Delta: float
    epsilon: float
    C: float = 1.0

    def __post_init__(self):
        for name in ("L0", "L1", "kappa", "sigma"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
        if not self.rho >= 1:
            raise ConfigError(f"rho must be >= 1, got {self.rho}")
        if not self.Delta > 0:
            raise ConfigError(f"Delta must be > 0, got {self.Delta}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        smoothness_constants_AB(self.C)

    @property
    def A(self) -> float:
        return smoothness_constants_AB(self.C)[0]

    @property
    def B(self) -> float:
        return smoothness_constants_AB(self.C)[1]

    def to_dict(self) -> dict:
        return asdict(self)


# (first-term divisor, second-term divisor, third-term divisor)
THEOREM_CONSTANTS = {"main": (216.0, 180.0, 16.0), "appendix": (856.0, 180.0, 8.0)}


@dataclass(frozen=True)
class TheoremResolution:
    eta: float
    gamma: float
    Gamma: float
    R_min: int
    terms: tuple[float, float, float]
    constants: str

    def to_dict(self) -> dict:
        d = asdict(self)
        d["terms"] = [t if math.isfinite(t) else None for t in self.terms]
        return d


def theorem1_hyperparams(pc: ProblemConstants, N: int, I: int, constants: str = "appendix") -> TheoremResolution:
    """Largest admissible step size and matching clip length for EPISODE.

    ``gamma / eta`` is fixed at ``11 sigma + A L0 / (B L1 rho)``, which makes
    ``Gamma`` independent of ``eta``; ``eta`` is then the minimum of the three
    step-size caps (the two noise-driven caps are vacuous at ``sigma = 0``).
    ``R_min = ceil(4 Delta / (epsilon^2 eta I))``.
    """
    if constants not in THEOREM_CONSTANTS:
        raise ConfigError(f"theorem_constants must be one of {sorted(THEOREM_CONSTANTS)}")
    if N < 1 or I < 1:
        raise ConfigError("N and I must be >= 1")
    if pc.L1 == 0:
        raise UnsupportedConfiguration(
            "L1 = 0 makes the clipping length formula undefined; set eta and gamma explicitly"
        )
    if pc.L0 <= 0:
        raise UnsupportedConfiguration("L0 must be > 0 for the step-size formula; set eta and gamma explicitly")
    A, B = pc.A, pc.B
    eps_cap = 3.0 * A * pc.L0 / (5.0 * B * pc.L1 * pc.rho)
    if pc.epsilon > eps_cap:
        raise ConfigError(f"epsilon={pc.epsilon} exceeds the admissible tolerance {eps_cap:.6g}")
    c1, c2, c3 = THEOREM_CONSTANTS[constants]
    ratio = 11.0 * pc.sigma + A * pc.L0 / (B * pc.L1 * pc.rho)
    Gamma = A * pc.L0 + B * pc.L1 * pc.kappa + B * pc.L1 * pc.rho * (pc.sigma + ratio)
    t1 = 1.0 / (c1 * Gamma * I)
    if pc.sigma > 0:
        t2 = pc.epsilon / (c2 * Gamma * I * pc.sigma)
        q = pc.epsilon / pc.sigma  # squared below; sigma**2 alone can underflow
        t3 = N * (q * q) / (c3 * A * pc.L0)
    else:
        t2 = t3 = math.inf
    eta = min(t1, t2, t3)
    rounds = 4.0 * pc.Delta / (pc.epsilon * pc.epsilon * eta * I)
    if not math.isfinite(rounds):
        raise ConfigError("the required round count is not representable; check epsilon and Delta")
    R_min = math.ceil(rounds)
    return TheoremResolution(eta, ratio * eta, Gamma, R_min, (t1, t2, t3), constants)


def lemma1_premises(hp: HyperParams, pc: ProblemConstants) -> tuple[bool, str]:
    """Check the two step-size premises under which the drift bounds are guaranteed."""
    A, B = pc.A, pc.B
    ratio = hp.gamma / hp.eta
    lhs1 = 2.0 * hp.eta * hp.I * (A * pc.L0 + B * pc.L1 * pc.kappa + B * pc.L1 * pc.rho * (pc.sigma + ratio))
    radius = max(2.0 * hp.eta * hp.I * (2.0 * pc.sigma + ratio), hp.gamma * hp.I)
    cap = math.inf if pc.L1 == 0 else pc.C / pc.L1
    problems = []
    if lhs1 > 1.0:
        problems.append(f"2*eta*I*Gamma = {lhs1:.6g} > 1")
    if radius > cap:
        problems.append(f"drift radius {radius:.6g} > C/L1 = {cap:.6g}")
    return not problems, "; ".join(problems)


@dataclass
class Violation:
    round_index: int
    iteration: int
    client: int
    distance: float
    bound: float
    clipped: bool


@dataclass
class MonitorReport:
    violations: list[Violation] = field(default_factory=list)
    premise_satisfied: bool = True
    notes: list[str] = field(default_factory=list)
    rounds_checked: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations


# Relative slack for rounding in the per-step lengths (clipped steps are
# gamma only up to one ulp each).
_BOUND_RTOL = 1e-9


def discrepancy_monitor(trace: RoundTrace, hp: HyperParams, pc: ProblemConstants,
                        report: MonitorReport | None = None) -> MonitorReport:
    """Check every local iterate of one round against the drift bound.

    Clipped rounds: ``||x_t^i - xbar|| <= gamma I`` (always asserted).
    Non-clipped rounds: ``||x_t^i - xbar|| <= 2 eta I (2 sigma + gamma/eta)``,
    asserted only when :func:`lemma1_premises` holds; otherwise a note is
    recorded instead.
    """
    report = report if report is not None else MonitorReport()
    report.rounds_checked += 1
    if trace.clipped:
        bound = hp.gamma * hp.I
    else:
        ok, why = lemma1_premises(hp, pc)
        if not ok:
            report.premise_satisfied = False
            note = f"premise unsatisfied, bound not asserted ({why})"
            if note not in report.notes:
                report.notes.append(note)
            return report
        bound = 2.0 * hp.eta * hp.I * (2.0 * pc.sigma + hp.gamma / hp.eta)
    limit = bound * (1.0 + _BOUND_RTOL)
    for t, X in enumerate(trace.iterates):
        dist = row_norms(X - trace.xbar)
        for i in np.nonzero(~(dist <= limit))[0]:
            report.violations.append(Violation(trace.round_index, t, int(i), float(dist[i]), bound, trace.clipped))
    return report


def monitor_trajectory(traj: Trajectory, pc: ProblemConstants) -> MonitorReport:
    if traj.algorithm not in ("episode", "episode_unclipped"):
        raise FedClipError("the drift monitor applies to episodic runs only")
    report = MonitorReport()
    for tr in traj.traces:
        discrepancy_monitor(tr, traj.hp, pc, report)
    return report


class DivergedTrajectoryWarning(UserWarning):
    pass


def stationarity_metric(traj: Trajectory | Sequence[float]) -> float:
    """Mean exact global gradient norm over the recorded rounds.

    For a diverged run the mean covers the completed rounds and a
    :class:`DivergedTrajectoryWarning` is issued.
    """
    if isinstance(traj, Trajectory):
        if traj.status == "diverged":
            warnings.warn(f"trajectory diverged at round {traj.diverged_at}; metric covers completed rounds",
                          DivergedTrajectoryWarning, stacklevel=2)
        norms = traj.column("grad_norm")
    else:
        norms = np.asarray(traj, dtype=float)
    if norms.size == 0:
        raise FedClipError("empty trajectory")
    return float(norms.mean())


def _grid_points(grid) -> np.ndarray:
    if isinstance(grid, tuple) and len(grid) == 3:
        lo, hi, step = grid
        return np.linspace(lo, hi, int(round((hi - lo) / step)) + 1)
    return np.asarray(grid, dtype=float)


def heterogeneity_check(problem: FederatedProblem, grid, rho: float, kappa: float) -> tuple[bool, float]:
    """Scan ``||grad f_i(x)|| <= kappa + rho ||grad f(x)||`` over a grid.

    ``grid`` is ``(lo, hi, step)`` for one-dimensional problems or an array of
    points (shape ``(m,)`` or ``(m, d)``). Returns whether it holds everywhere
    and the smallest slack.
    """
    pts = _grid_points(grid)
    pts = pts.reshape(-1, problem.dim) if pts.ndim == 1 else pts
    per_client = np.stack([row_norms(problem.client_grads(np.full(len(pts), c), pts))
                           for c in range(problem.n_clients)])
    total = problem.client_grads(np.zeros(len(pts), dtype=int), pts)
    for c in range(1, problem.n_clients):
        total = total + problem.client_grads(np.full(len(pts), c), pts)
    global_norm = row_norms(total / problem.n_clients)
    slack = kappa + rho * global_norm[None, :] - per_client
    worst = float(slack.min())
    return worst >= 0.0, worst


@dataclass(frozen=True)
class PartitionSpec:
    s: int
    N: int
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.s <= 100):
            raise ConfigError(f"similarity s must be in [0, 100], got {self.s}")
        if self.N < 1:
            raise ConfigError(f"N must be >= 1, got {self.N}")


def partition_by_similarity(labels, spec: PartitionSpec, rng: RngStream | None = None) -> list[np.ndarray]:
    """Split sample indices across clients with an ``s``% i.i.d. share.

    ``s``% of the samples are drawn uniformly without replacement and dealt
    evenly to the clients; the rest are sorted by label and handed out as
    contiguous blocks in client order. Client sizes differ by at most one.
    """
    labels = np.asarray(labels)
    n = labels.size
    if n == 0:
        raise FedClipError("cannot partition an empty dataset")
    if n < spec.N:
        raise ConfigError(f"dataset of size {n} is smaller than N={spec.N}")
    rng = rng if rng is not None else RngStream(spec.seed)
    gen = rng.generator(Purpose.PARTITION)
    perm = gen.permutation(n)
    n_iid = int(round(n * spec.s / 100.0))
    iid, rest = perm[:n_iid], np.sort(perm[n_iid:])
    rest = rest[np.argsort(labels[rest], kind="stable")]
    sizes = [n // spec.N + (1 if c < n % spec.N else 0) for c in range(spec.N)]
    # the i.i.d. share is dealt evenly; the sorted pool then tops every client
    # up to its target size
    iid_parts = np.array_split(iid, spec.N)
    out, pos = [], 0
    for c in range(spec.N):
        need = sizes[c] - len(iid_parts[c])
        if need < 0:
            raise FedClipError("internal partition size mismatch")
        out.append(np.concatenate([iid_parts[c], rest[pos:pos + need]]).astype(np.int64))
        pos += need
    if pos != rest.size:
        raise FedClipError("internal partition size mismatch")
    return out


@dataclass
class GridResult:
    table: list[dict]
    best: dict | None

    @property
    def viable(self) -> bool:
        return self.best is not None

    def to_dict(self) -> dict:
        return {"viable": self.viable, "best": self.best, "table": self.table}


def grid_search(algo: str, problem: FederatedProblem, noise: NoiseModel, I: int, rounds: int,
                gamma_over_eta: Sequence[float], etas: Sequence[float], seed: int,
                x0=None, threads: int = 1, workers: int = 1, keep: bool = False) -> GridResult:
    """Run every ``(gamma/eta, eta)`` cell and pick the lowest final global loss.

    Ties go to the smaller ``eta``. Diverged cells are reported but never
    chosen; if every cell diverges ``best`` is ``None``. Cell seeds are
    derived from ``seed`` and the cell index. ``keep`` attaches each cell's
    trajectory under the ``"trajectory"`` key.
    """
    cells = [(float(ratio), float(eta)) for ratio in gamma_over_eta for eta in etas]
    if not cells:
        raise ConfigError("grid must contain at least one cell")
    master = RngStream(seed)

    def run_cell(item):
        idx, (ratio, eta) = item
        hp = HyperParams(eta, ratio * eta, I, rounds, problem.n_clients)
        cell_seed = master.derive_seed(idx)
        traj = run_training(algo, hp, problem, noise, cell_seed, x0, threads=threads)
        row = {
            "cell": idx,
            "gamma_over_eta": ratio,
            "eta": eta,
            "gamma": hp.gamma,
            "seed": cell_seed,
            "status": traj.status,
            "final_loss": traj.final.loss,
            "final_grad_norm": traj.final.grad_norm,
            "final_x": [float(v) for v in traj.xbars[-1]],
            "stationarity": float(traj.column("grad_norm").mean()),
        }
        if keep:
            row["trajectory"] = traj
        return row

    items = list(enumerate(cells))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            table = list(pool.map(run_cell, items))
    else:
        table = [run_cell(it) for it in items]
    viable = [row for row in table if row["status"] == "completed" and math.isfinite(row["final_loss"])]
    best = min(viable, key=lambda row: (row["final_loss"], row["eta"])) if viable else None
    return GridResult(table, best)


def relaxed_smoothness_L0(objectives: Sequence[QuarticObjective], L1: float,
                          lo: float = -50.0, hi: float = 50.0, step: float = 1e-3) -> float:
    """Smallest ``L0`` with ``|f''| <= L0 + L1 |f'|`` for each scalar objective on a grid.

    A 1% margin covers the grid resolution.
    """
    x = np.linspace(lo, hi, int(round((hi - lo) / step)) + 1)
    worst = -math.inf
    for obj in objectives:
        d1 = obj.grad_rows(x)
        d2 = obj.hessian(x)
        worst = max(worst, float(np.max(np.abs(d2) - L1 * np.abs(d1))))
    return max(worst, 0.0) * 1.01


def quartic_constants(H: float, sigma: float, epsilon: float, x0: float, L1: float = 1.0,
                      C: float = 1.0) -> ProblemConstants:
    """Problem constants for the quartic pair started at ``x0``.

    ``rho = 2`` with the closed-form heterogeneity offset; ``L0`` comes from a
    grid scan at the given ``L1``; ``Delta`` is the exact gap to the brute-force
    global minimum.
    """
    from fedclip.objectives import kappa_H, quartic_global_minimizer

    objs = [QuarticObjective(H, 1), QuarticObjective(H, 2)]
    L0 = relaxed_smoothness_L0(objs, L1)
    f = lambda x: x**4 - 3 * x**3 - 0.5 * H * x**2 + x  # noqa: E731
    x_star = quartic_global_minimizer(H)
    Delta = max(f(x0) - f(x_star), 1e-12)
    return ProblemConstants(L0=L0, L1=L1, kappa=kappa_H(H), rho=2.0, sigma=sigma,
                            Delta=Delta, epsilon=epsilon, C=C)
