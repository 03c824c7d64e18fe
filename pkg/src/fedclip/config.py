"""Experiment configuration: JSON schema, validation with line numbers, resolution."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from jsonschema import Draft202012Validator

from fedclip.algorithms import ALGORITHMS, HyperParams
from fedclip.core import NOISE_KINDS, ConfigError, NoiseModel
from fedclip.harness import (
    THEOREM_CONSTANTS,
    PartitionSpec,
    ProblemConstants,
    TheoremResolution,
    partition_by_similarity,
    quartic_constants,
    theorem1_hyperparams,
)
from fedclip.objectives import (
    FederatedProblem,
    SyntheticClassification,
    make_classification,
    make_logistic_problem,
    make_quadratic_problem,
    make_quartic_problem,
)

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_POS_LIST = {"type": "array", "items": _POS, "minItems": 1}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["algorithm", "objective", "interval", "rounds"],
    "properties": {
        "algorithm": {"enum": list(ALGORITHMS)},
        "label": {"type": "string"},
        "objective": {
            "type": "object",
            "required": ["family"],
            "oneOf": [
                {
                    "additionalProperties": False,
                    "properties": {"family": {"const": "quartic"}, "H": {"type": "number", "minimum": 1}},
                    "required": ["family", "H"],
                },
                {
                    "additionalProperties": False,
                    "properties": {"family": {"const": "quadratic"}, "gamma": {"type": "number", "exclusiveMinimum": 1}},
                    "required": ["family", "gamma"],
                },
                {
                    "additionalProperties": False,
                    "properties": {
                        "family": {"const": "logistic"},
                        "n": {"type": "integer", "minimum": 1},
                        "d": {"type": "integer", "minimum": 1},
                        "k": {"type": "integer", "minimum": 2},
                        "separation": _NONNEG,
                        "similarity": {"type": "integer", "minimum": 0, "maximum": 100},
                        "data_seed": {"type": "integer", "minimum": 0},
                        "path": {"type": "string"},
                    },
                    "required": ["family"],
                },
            ],
        },
        "clients": {"type": "integer", "minimum": 1},
        "interval": {"type": "integer", "minimum": 1},
        "rounds": {"oneOf": [{"type": "integer", "minimum": 0}, {"const": "theorem"}]},
        "max_rounds": {"type": "integer", "minimum": 0},
        "eta": _POS,
        "gamma": _POS,
        "hyperparams": {"const": "theorem"},
        "theorem_constants": {"enum": sorted(THEOREM_CONSTANTS)},
        "constants": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "L0": _NONNEG, "L1": _NONNEG, "kappa": _NONNEG, "rho": {"type": "number", "minimum": 1},
                "sigma": _NONNEG, "Delta": _POS, "epsilon": _POS, "C": {"type": "number", "minimum": 1},
            },
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "required": ["gamma_over_eta", "eta"],
            "properties": {"gamma_over_eta": _POS_LIST, "eta": _POS_LIST},
        },
        "noise": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"sigma": _NONNEG, "kind": {"enum": list(NOISE_KINDS)}},
        },
        "x0": {"oneOf": [_NUM, {"type": "array", "items": _NUM, "minItems": 1}]},
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "monitor": {"type": "boolean"},
        "timing": {"type": "boolean"},
        "scaffold_variant": {"const": "option-ii"},
        "hetero": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "rho": {"type": "number", "minimum": 1}, "kappa": _NONNEG,
                "lo": _NUM, "hi": _NUM, "step": _POS, "points": {"type": "integer", "minimum": 1},
            },
        },
    },
}

_VALIDATOR = Draft202012Validator(CONFIG_SCHEMA)


def _line_of(text: str, path, extra_key: str | None = None) -> int:
    """Best-effort line number for a JSON path inside ``text``."""
    offset = 0
    keys = [p for p in path if isinstance(p, str)]
    if extra_key is not None:
        keys.append(extra_key)
    for key in keys:
        pos = text.find(json.dumps(key), offset)
        if pos < 0:
            break
        offset = pos
    return text.count("\n", 0, offset) + 1


def _describe(err, text: str) -> str:
    where = "/".join(str(p) for p in err.absolute_path) or "<root>"
    extra = None
    if err.validator == "additionalProperties" and isinstance(err.instance, dict):
        allowed = set(err.schema.get("properties", {}))
        unknown = sorted(k for k in err.instance if k not in allowed)
        if unknown:
            extra = unknown[0]
            return f"line {_line_of(text, err.absolute_path, extra)}: unknown key {extra!r} at {where}"
    if err.validator == "oneOf" and list(err.absolute_path) == ["objective"]:
        fam = err.instance.get("family") if isinstance(err.instance, dict) else None
        for sub in err.context or []:
            if sub.schema_path and sub.schema_path[0] == {"quartic": 0, "quadratic": 1, "logistic": 2}.get(fam):
                return _describe(sub, text)
    return f"line {_line_of(text, err.absolute_path)}: {where}: {err.message}"


@dataclass
class ExperimentConfig:
    raw: dict
    source: str = "<config>"

    # convenience accessors -------------------------------------------------
    @property
    def algorithm(self) -> str:
        return self.raw["algorithm"]

    @property
    def family(self) -> str:
        return self.raw["objective"]["family"]

    @property
    def label(self) -> str:
        return self.raw.get("label", self.algorithm)

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 0))

    @property
    def interval(self) -> int:
        return int(self.raw["interval"])

    @property
    def mode(self) -> str:
        """``explicit``, ``theorem`` or ``grid``."""
        if "grid" in self.raw:
            return "grid"
        return "theorem" if self.raw.get("hyperparams") == "theorem" else "explicit"

    @property
    def theorem_constants(self) -> str:
        return self.raw.get("theorem_constants", "appendix")

    def noise(self) -> NoiseModel:
        n = self.raw.get("noise", {})
        return NoiseModel(float(n.get("sigma", 0.0)), n.get("kind", "uniform-per-coordinate"))

    def n_clients(self) -> int:
        default = 4 if self.family == "logistic" else 2
        return int(self.raw.get("clients", default))


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse and validate config text; errors carry a line reference."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: line {exc.lineno}: invalid JSON: {exc.msg}") from None
    errors = sorted(_VALIDATOR.iter_errors(raw), key=lambda e: (len(e.absolute_path), e.message))
    if errors:
        raise ConfigError(f"{source}: " + _describe(errors[0], text))
    has_explicit = "eta" in raw or "gamma" in raw
    modes = [has_explicit, raw.get("hyperparams") == "theorem", "grid" in raw]
    if sum(modes) != 1:
        raise ConfigError(f"{source}: line 1: exactly one of explicit eta/gamma, "
                          "\"hyperparams\": \"theorem\" or a \"grid\" block is required")
    if has_explicit and not ("eta" in raw and "gamma" in raw):
        raise ConfigError(f"{source}: line {_line_of(text, ['eta' if 'eta' in raw else 'gamma'])}: "
                          "explicit mode needs both eta and gamma")
    if raw["rounds"] == "theorem" and raw.get("hyperparams") != "theorem":
        raise ConfigError(f"{source}: line {_line_of(text, ['rounds'])}: rounds=\"theorem\" needs theorem mode")
    fam = raw["objective"]["family"]
    if fam in ("quartic", "quadratic") and "clients" in raw:
        n = raw["clients"]
        if fam == "quadratic" and n != 2 or fam == "quartic" and n % 2:
            raise ConfigError(f"{source}: line {_line_of(text, ['clients'])}: "
                              f"{fam} family needs {'2' if fam == 'quadratic' else 'an even number of'} clients")
    if fam == "logistic" and "path" not in raw["objective"]:
        missing = [k for k in ("n", "d", "k") if k not in raw["objective"]]
        if missing:
            raise ConfigError(f"{source}: line {_line_of(text, ['objective'])}: "
                              f"logistic objective needs {missing} or a data path")
    return ExperimentConfig(raw, source)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    return parse_config(text, str(path))


# -- resolution ---------------------------------------------------------------

@dataclass
class BuiltProblem:
    problem: FederatedProblem
    data: SyntheticClassification | None = None
    partitions: list | None = None


def build_problem(cfg: ExperimentConfig) -> BuiltProblem:
    obj = cfg.raw["objective"]
    n = cfg.n_clients()
    if cfg.family == "quartic":
        return BuiltProblem(make_quartic_problem(obj["H"], n))
    if cfg.family == "quadratic":
        return BuiltProblem(make_quadratic_problem(obj["gamma"]))
    data_seed = int(obj.get("data_seed", 0))
    if "path" in obj:
        data = SyntheticClassification.from_csv(obj["path"], obj.get("k"))
    else:
        data = make_classification(obj["n"], obj["d"], obj["k"], obj.get("separation", 2.0), data_seed)
    parts = partition_by_similarity(data.labels, PartitionSpec(obj.get("similarity", 0), n, data_seed))
    data.partitions = parts
    return BuiltProblem(make_logistic_problem(data, parts), data, parts)


def x0_of(cfg: ExperimentConfig, dim: int) -> np.ndarray:
    x0 = cfg.raw.get("x0")
    if x0 is None:
        return np.zeros(dim)
    v = np.atleast_1d(np.asarray(x0, dtype=float))
    if v.size == 1 and dim > 1:
        v = np.full(dim, float(v[0]))
    if v.size != dim:
        raise ConfigError(f"{cfg.source}: x0 has {v.size} coordinates, problem has {dim}")
    return v


def problem_constants(cfg: ExperimentConfig, built: BuiltProblem) -> ProblemConstants | None:
    """Constants from the ``constants`` block, with quartic defaults filled in."""
    given = dict(cfg.raw.get("constants", {}))
    monitor_only = cfg.mode != "theorem" and cfg.family == "quartic" and cfg.raw.get("monitor", False)
    if not given and cfg.mode != "theorem" and not monitor_only:
        return None
    given.setdefault("sigma", cfg.noise().sigma)
    if cfg.family == "quartic":
        # the drift monitor never reads epsilon, so a monitored explicit run may omit it
        eps = given.get("epsilon", 0.1 if cfg.mode != "theorem" else None)
        if eps is None:
            raise ConfigError(f"{cfg.source}: constants.epsilon is required")
        x0 = float(x0_of(cfg, 1)[0])
        base = quartic_constants(cfg.raw["objective"]["H"], given["sigma"], eps, x0,
                                 L1=given.get("L1", 1.0), C=given.get("C", 1.0)).to_dict()
        base.update(given)
        given = base
    missing = [k for k in ("L0", "L1", "kappa", "rho", "Delta", "epsilon") if k not in given]
    if missing:
        raise ConfigError(f"{cfg.source}: constants block is missing {missing}")
    return ProblemConstants(**given)


@dataclass
class ResolvedRun:
    cfg: ExperimentConfig
    built: BuiltProblem
    hp: HyperParams
    noise: NoiseModel
    x0: np.ndarray
    constants: ProblemConstants | None
    theorem: TheoremResolution | None

    def resolved_config(self) -> dict:
        """A config equivalent to this run with explicit hyperparameters."""
        raw = copy.deepcopy(self.cfg.raw)
        raw.pop("hyperparams", None)
        raw.pop("max_rounds", None)
        raw.pop("grid", None)
        raw["eta"] = self.hp.eta
        raw["gamma"] = self.hp.gamma
        raw["rounds"] = self.hp.R
        raw["x0"] = [float(v) for v in self.x0]
        return raw


def resolve_run(cfg: ExperimentConfig, eta: float | None = None, gamma: float | None = None) -> ResolvedRun:
    if cfg.mode == "grid" and (eta is None or gamma is None):
        raise ConfigError(f"{cfg.source}: grid configs are run with the 'grid' command")
    built = build_problem(cfg)
    pc = problem_constants(cfg, built)
    theorem = None
    rounds = cfg.raw["rounds"]
    if cfg.mode == "theorem":
        theorem = theorem1_hyperparams(pc, built.problem.n_clients, cfg.interval, cfg.theorem_constants)
        eta, gamma = theorem.eta, theorem.gamma
        if rounds == "theorem":
            rounds = theorem.R_min
            if "max_rounds" in cfg.raw:
                rounds = min(rounds, cfg.raw["max_rounds"])
    elif eta is None:
        eta, gamma = cfg.raw["eta"], cfg.raw["gamma"]
    if not (math.isfinite(eta) and math.isfinite(gamma)):
        raise ConfigError(f"{cfg.source}: resolved hyperparameters are not finite")
    hp = HyperParams(float(eta), float(gamma), cfg.interval, int(rounds), built.problem.n_clients)
    return ResolvedRun(cfg, built, hp, cfg.noise(), x0_of(cfg, built.problem.dim), pc, theorem)
