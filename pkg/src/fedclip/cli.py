"""Command-line entry point: ``fedclip run|compare|grid|plot|check-hetero|hyperparams``.

Exit codes: 0 for a completed experiment (including one that diverged, which
is reported in ``summary.json``), 2 for configuration or input errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from fedclip.algorithms import Trajectory, run_training
from fedclip.config import ResolvedRun, build_problem, load_config, resolve_run, x0_of
from fedclip.core import FedClipError
from fedclip.harness import (
    DivergedTrajectoryWarning,
    grid_search,
    heterogeneity_check,
    monitor_trajectory,
    stationarity_metric,
)
from fedclip.objectives import kappa_H
from fedclip.plotting import COMPARE_COLUMNS, emit_plots

log = logging.getLogger("fedclip")

EXIT_OK = 0
EXIT_USAGE = 2


def worker_threads(requested: int | None = None) -> int:
    """Worker count: ``requested`` or the CPU count, capped by ``FEDCLIP_THREADS``."""
    n = requested or os.cpu_count() or 1
    cap = os.environ.get("FEDCLIP_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise FedClipError(f"FEDCLIP_THREADS must be an integer, got {cap!r}") from None
    return max(1, n)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _dump(obj, path: Path):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def execute(run: ResolvedRun, threads: int = 1) -> tuple[Trajectory, dict]:
    """Run a resolved config; returns the trajectory and the summary dict."""
    cfg = run.cfg
    monitor = bool(cfg.raw.get("monitor", False))
    traj = run_training(cfg.algorithm, run.hp, run.built.problem, run.noise, cfg.seed, run.x0,
                        monitor=monitor, threads=threads, timing=bool(cfg.raw.get("timing", False)))
    with warnings.catch_warnings():
        # divergence is already reported through "status"
        warnings.simplefilter("ignore", DivergedTrajectoryWarning)
        stationarity = stationarity_metric(traj)
    report = None
    if monitor and run.constants is not None and cfg.algorithm in ("episode", "episode_unclipped"):
        report = monitor_trajectory(traj, run.constants)
    summary = {
        "algorithm": cfg.algorithm,
        "label": cfg.label,
        "objective": cfg.raw["objective"],
        "status": traj.status,
        "diverged_at": traj.diverged_at,
        "rounds_executed": traj.rounds_executed,
        "final_loss": traj.final.loss,
        "final_grad_norm": traj.final.grad_norm,
        "final_x": traj.xbars[-1],
        "stationarity": stationarity,
        "hyperparams": run.hp.to_dict(),
        "theorem": run.theorem.to_dict() if run.theorem else None,
        "constants": run.constants.to_dict() if run.constants else None,
        "violations": len(report.violations) if report else None,
        "monitor_notes": report.notes if report else [],
        "trajectory_sha256": traj.sha256(),
        "resolved_config": run.resolved_config(),
    }
    return traj, summary


def _write_trace(traj: Trajectory, report_violations, out: Path):
    tdir = out / "trace"
    tdir.mkdir(exist_ok=True)
    with (tdir / "iterates.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        d = traj.xbars[0].size
        w.writerow(["round", "iteration", "client", "clipped", "distance"] + [f"x{j}" for j in range(d)])
        for tr in traj.traces:
            for t, X in enumerate(tr.iterates):
                dist = np.sqrt(((X - tr.xbar) ** 2).sum(axis=1))
                for i, row in enumerate(X):
                    w.writerow([tr.round_index, t, i, int(tr.clipped), format(dist[i], ".17g")]
                               + [format(v, ".17g") for v in row])
    _dump(report_violations, tdir / "violations.json")


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    run = resolve_run(cfg)
    out = Path(args.out or cfg.raw.get("output_dir") or "out")
    traj, summary = execute(run, worker_threads(args.threads))
    out.mkdir(parents=True, exist_ok=True)
    traj.write_csv(out / "trajectory.csv")
    _dump(summary, out / "summary.json")
    if run.built.data is not None:
        run.built.data.to_csv(out / "dataset.csv")
        _dump({"s": cfg.raw["objective"].get("similarity", 0), "N": run.hp.N,
               "seed": cfg.raw["objective"].get("data_seed", 0),
               "clients": [p.tolist() for p in run.built.partitions]}, out / "partition.json")
    if cfg.raw.get("monitor"):
        violations = []
        if run.constants is not None and cfg.algorithm in ("episode", "episode_unclipped"):
            violations = [vars(v) for v in monitor_trajectory(traj, run.constants).violations]
        _write_trace(traj, violations, out)
    print(json.dumps({k: summary[k] for k in ("status", "final_loss", "stationarity", "violations")},
                     default=_json_default))
    return EXIT_OK


def cmd_compare(args) -> int:
    cfgs = [load_config(p) for p in args.configs]
    families = {c.family for c in cfgs}
    if len(families) > 1:
        raise FedClipError(f"configs mix objective families {sorted(families)}")
    runs = [resolve_run(c) for c in cfgs]
    labels = []
    for c in cfgs:
        base = c.label
        lab = base if base not in labels else f"{base}#seed{c.seed}"
        k = 2
        while lab in labels:
            lab = f"{base}#{k}"
            k += 1
        labels.append(lab)
    threads = worker_threads(args.threads)
    results = [execute(r, 1)[0] for r in runs] if threads == 1 or len(runs) == 1 else None
    if results is None:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=min(threads, len(runs))) as pool:
            results = [t for t, _ in pool.map(lambda r: execute(r, 1), runs)]
    out = Path(args.out or "compare_out")
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "compare.csv"
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARE_COLUMNS)
        for lab, traj in zip(labels, results):
            for line in traj.csv_text().splitlines()[1:]:
                w.writerow([lab, traj.algorithm] + line.split(","))
    emit_plots(csv_path, out / "compare.svg")
    finals = {lab: {"final_loss": t.final.loss, "status": t.status} for lab, t in zip(labels, results)}
    _dump(finals, out / "compare_summary.json")
    print(json.dumps(finals))
    return EXIT_OK


def cmd_grid(args) -> int:
    cfg = load_config(args.config)
    if cfg.mode != "grid":
        raise FedClipError(f"{cfg.source}: the grid command needs a 'grid' block")
    built = build_problem(cfg)
    g = cfg.raw["grid"]
    rounds = cfg.raw["rounds"]
    res = grid_search(cfg.algorithm, built.problem, cfg.noise(), cfg.interval, rounds,
                      g["gamma_over_eta"], g["eta"], cfg.seed, x0_of(cfg, built.problem.dim),
                      workers=worker_threads(args.threads))
    out = Path(args.out or cfg.raw.get("output_dir") or "grid_out")
    out.mkdir(parents=True, exist_ok=True)
    payload = res.to_dict()
    if not res.viable:
        payload["message"] = "no viable configuration: every cell diverged"
    _dump(payload, out / "grid.json")
    print(json.dumps({"viable": res.viable, "best": res.best}, default=_json_default))
    return EXIT_OK


def cmd_plot(args) -> int:
    path = emit_plots(args.csv, args.out)
    print(path)
    return EXIT_OK


def cmd_check_hetero(args) -> int:
    cfg = load_config(args.config)
    built = build_problem(cfg)
    h = dict(cfg.raw.get("hetero", {}))
    if cfg.family == "quartic":
        h.setdefault("rho", 2.0)
        h.setdefault("kappa", kappa_H(cfg.raw["objective"]["H"]))
    if "rho" not in h or "kappa" not in h:
        raise FedClipError(f"{cfg.source}: hetero.rho and hetero.kappa are required for this family")
    dim = built.problem.dim
    if dim == 1:
        grid = (h.get("lo", -10.0), h.get("hi", 10.0), h.get("step", 0.01))
    else:
        gen = np.random.default_rng(cfg.seed)
        grid = gen.normal(size=(h.get("points", 1000), dim))
    holds, worst = heterogeneity_check(built.problem, grid, h["rho"], h["kappa"])
    print(json.dumps({"holds": holds, "worst_margin": worst, "rho": h["rho"], "kappa": h["kappa"]}))
    return EXIT_OK


def cmd_hyperparams(args) -> int:
    cfg = load_config(args.config)
    if cfg.mode != "theorem":
        raise FedClipError(f"{cfg.source}: hyperparams needs \"hyperparams\": \"theorem\"")
    run = resolve_run(cfg)
    print(json.dumps({"theorem": run.theorem.to_dict(), "constants": run.constants.to_dict(),
                      "hyperparams": run.hp.to_dict()}, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedclip", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment config")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (overrides output_dir)")
    r.add_argument("--threads", type=int)
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="run several configs and plot them together")
    c.add_argument("configs", nargs="+")
    c.add_argument("--out")
    c.add_argument("--threads", type=int)
    c.set_defaults(func=cmd_compare)

    g = sub.add_parser("grid", help="grid search over gamma/eta and eta")
    g.add_argument("config")
    g.add_argument("--out")
    g.add_argument("--threads", type=int)
    g.set_defaults(func=cmd_grid)

    pl = sub.add_parser("plot", help="render a trajectory or compare CSV to SVG")
    pl.add_argument("csv")
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_plot)

    h = sub.add_parser("check-hetero", help="grid-check the heterogeneity bound")
    h.add_argument("config")
    h.set_defaults(func=cmd_check_hetero)

    hp = sub.add_parser("hyperparams", help="print step sizes derived from problem constants")
    hp.add_argument("config")
    hp.set_defaults(func=cmd_hyperparams)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FedClipError, OSError) as exc:
        print(f"fedclip: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
