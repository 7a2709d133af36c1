"""Experiment configuration: sectioned ``key = value`` files with strict keys.

Each subcommand owns a table of defaults. A user file may override any
known key; unknown sections or keys are rejected with their ``section.key``
path. The fully resolved configuration (defaults included) can be written
back out so every run records exactly what it used.

Values are parsed according to the type of the default: ints, floats,
booleans (``true``/``false``), strings, and comma-separated lists. Combination
lists use ``;`` between entries.
"""

from __future__ import annotations

import configparser
import io
from pathlib import Path
from typing import Any, Mapping

from .core import ContractError


class ConfigError(ContractError):
    """A configuration file that cannot be used as written."""


_BOOL = {"true": True, "false": False, "yes": True, "no": False, "1": True, "0": False}


class Config:
    """Resolved configuration: ``cfg["inner"]["k"]`` or ``cfg.get("inner.k")``."""

    def __init__(self, command: str, sections: dict[str, dict[str, Any]]):
        self.command = command
        self.sections = sections

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.sections[section]

    def get(self, path: str) -> Any:
        section, key = path.split(".", 1)
        return self.sections[section][key]

    def set(self, path: str, value: Any) -> None:
        section, key = path.split(".", 1)
        default = DEFAULTS[self.command][section][key]
        self.sections[section][key] = _coerce(value, default, path) if isinstance(value, str) else value

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for section, values in self.sections.items():
            parser[section] = {k: _format(v) for k, v in values.items()}
        buf = io.StringIO()
        buf.write(f"# resolved configuration for {self.command}\n")
        parser.write(buf)
        return buf.getvalue()

    def write(self, path: Path) -> None:
        Path(path).write_text(self.to_text())


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return "; ".join(",".join(_format(x) for x in item) for item in value)
        return ",".join(_format(x) for x in value)
    return str(value)


def _scalar(text: str, kind: type, path: str):
    text = text.strip()
    try:
        if kind is bool:
            return _BOOL[text.lower()]
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except (KeyError, ValueError):
        raise ConfigError(f"{path}: cannot read {text!r} as {kind.__name__}") from None
    return text


def _coerce(text: str, default: Any, path: str) -> Any:
    if isinstance(default, tuple):
        if default and isinstance(default[0], tuple):
            kind = type(default[0][0])
            items = [item for item in text.split(";") if item.strip()]
            return tuple(tuple(_scalar(x, kind, path) for x in item.split(",")) for item in items)
        kind = type(default[0]) if default else str
        return tuple(_scalar(x, kind, path) for x in text.split(",") if x.strip())
    return _scalar(text, type(default), path)


def load_config(command: str, path: str | Path | None = None, text: str | None = None) -> Config:
    """Merge a config file (or ``text``) over the defaults of ``command``."""
    if command not in DEFAULTS:
        raise ConfigError(f"unknown command {command!r}")
    sections = {s: dict(v) for s, v in DEFAULTS[command].items()}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from None
    if text:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as err:
            raise ConfigError(f"malformed config: {err}") from None
        for section in parser.sections():
            if section not in sections:
                raise ConfigError(f"{section}: unknown section for {command}")
            for key, raw in parser.items(section):
                if key not in sections[section]:
                    raise ConfigError(f"{section}.{key}: unknown key")
                sections[section][key] = _coerce(raw, DEFAULTS[command][section][key], f"{section}.{key}")
    cfg = Config(command, sections)
    _validate(cfg)
    return cfg


def _validate(cfg: Config) -> None:
    for section, values in cfg.sections.items():
        for key, value in values.items():
            path = f"{section}.{key}"
            numbers = value if isinstance(value, tuple) else (value,)
            for v in numbers:
                if isinstance(v, (int, float)) and not isinstance(v, bool) and v < 0 and key not in _SIGNED:
                    raise ConfigError(f"{path}: must be non-negative")
    check = _CHECKS.get(cfg.command)
    if check:
        check(cfg)


_SIGNED = {"weights"}


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _check_inner(cfg: Config) -> None:
    inner = cfg["inner"]
    _require(inner["k"] >= 1, "inner.k: must be >= 1")
    _require(inner["batch_size"] >= 1, "inner.batch_size: must be >= 1")
    _require(inner["optimizer"] in ("sgd", "adam"), "inner.optimizer: must be sgd or adam")
    if "sampling" in inner:
        _require(inner["sampling"] in ("cycle", "replacement"), "inner.sampling: must be cycle or replacement")
    _require(cfg["outer"]["meta_batch"] >= 1, "outer.meta_batch: must be >= 1")


def _check_sine(cfg):
    _check_inner(cfg)
    for name in cfg["run"]["algorithms"]:
        _require(name in ("reptile", "fomaml", "maml"), f"run.algorithms: unknown algorithm {name!r}")
    if "maml" in cfg["run"]["algorithms"]:
        _require(cfg["inner"]["optimizer"] == "sgd", "inner.optimizer: exact MAML needs sgd")


def _check_fewshot(cfg):
    _check_inner(cfg)
    for name in cfg["run"]["algorithms"]:
        _require(name in ("reptile", "fomaml", "maml", "joint"), f"run.algorithms: unknown algorithm {name!r}")
    if "maml" in cfg["run"]["algorithms"]:
        _require(cfg["inner"]["optimizer"] == "sgd", "inner.optimizer: exact MAML needs sgd")
    _require(cfg["task"]["n_way"] >= 2, "task.n_way: must be >= 2")
    _require(1 <= cfg["task"]["signal_dim"] <= cfg["task"]["dim"], "task.signal_dim: must lie in [1, task.dim]")


def _check_combo(cfg):
    _check_inner(cfg)
    k, bs = cfg["inner"]["k"], cfg["inner"]["batch_size"]
    train = cfg["task"]["n_way"] * cfg["task"]["train_shots"]
    _require(k * bs == train, f"inner.batch_size: {k} batches of {bs} must cover the {train} training examples exactly")
    for combo in cfg["run"]["combos"]:
        _require(len(combo) == k, f"run.combos: each entry needs {k} weights")
        _require(any(combo), "run.combos: all-zero weights")
    for norm in cfg["run"]["normalizations"]:
        _require(norm in ("sum", "average"), f"run.normalizations: unknown {norm!r}")


def _check_overlap(cfg):
    _check_inner(cfg)
    axis = cfg["sweep"]["axis"]
    _require(axis in ("iterations", "batch_size", "step_size"), "sweep.axis: must be iterations, batch_size or step_size")
    _require(len(cfg["sweep"]["values"]) >= 1, "sweep.values: empty")
    for arm in cfg["sweep"]["arms"]:
        _require(arm in OVERLAP_ARMS, f"sweep.arms: unknown arm {arm!r}")


def _check_taylor(cfg):
    s = cfg["study"]
    _require(cfg["task"]["family"] in ("sine", "quadratic"), "task.family: must be sine or quadratic")
    _require(len(s["alphas"]) >= 4 and all(b > a for a, b in zip(s["alphas"], s["alphas"][1:])), "study.alphas: need >= 4 increasing values")
    _require(s["n_samples"] >= 2, "study.n_samples: must be >= 2")
    for a in s["algorithms"]:
        _require(a in ("maml", "fomaml", "reptile"), f"study.algorithms: unknown {a!r}")
    for k in s["ks"]:
        _require(k >= 2, "study.ks: each k must be >= 2")


def _check_manifold(cfg):
    m = cfg["manifold"]
    _require(m["scenario"] in ("lines", "random"), "manifold.scenario: must be lines or random")
    _require(0 < m["eps"] <= 1, "manifold.eps: must lie in (0, 1]")
    _require(m["order"] in ("alternate", "random"), "manifold.order: must be alternate or random")
    _require(1 <= m["codim"] < m["dim"], "manifold.codim: must lie in [1, dim)")
    _require(m["n_manifolds"] >= 2, "manifold.n_manifolds: need at least 2")


OVERLAP_ARMS = ("shared-cycle", "shared-replacement", "separate-tail", "reptile")

_EXPERIMENT = {"seed": 0, "workers": 1}

_FEWSHOT_TASK = {
    "n_way": 5,
    "train_shots": 10,
    "eval_shots": 1,
    "tail_shots": 0,
    "query_per_class": 1,
    "dim": 20,
    "signal_dim": 5,
    "noise": 0.3,
    "nuisance": 3.0,
    "basis_seed": 0,
}

DEFAULTS: dict[str, dict[str, dict[str, Any]]] = {
    "sine-demo": {
        "experiment": dict(_EXPERIMENT),
        "task": {"train_points": 10, "eval_points": 10},
        "model": {"hidden": (64, 64), "activation": "tanh"},
        "inner": {"k": 10, "batch_size": 10, "step_size": 0.01, "optimizer": "sgd"},
        "outer": {"step_size": 0.3, "iterations": 30000, "paper_iterations": 30000, "meta_batch": 1},
        "eval": {"steps": 32, "batch_size": 10, "step_size": 0.01, "trials": 100, "every": 0, "reduction": 0.9},
        "run": {"algorithms": ("reptile", "maml"), "maml_iterations": 3000},
    },
    "fewshot": {
        "experiment": dict(_EXPERIMENT),
        "task": dict(_FEWSHOT_TASK),
        "model": {"hidden": 32},
        "inner": {"k": 5, "batch_size": 10, "step_size": 0.1, "optimizer": "sgd", "beta1": 0.0, "beta2": 0.999},
        "outer": {"step_size": 1.0, "gradient_step_size": 5.0, "iterations": 5000, "paper_iterations": 100000, "meta_batch": 5},
        "eval": {"steps": 50, "batch_size": 5, "step_size": 0.1, "trials": 1000, "every": 500, "curve_trials": 100},
        "run": {"algorithms": ("reptile", "fomaml", "maml", "joint")},
    },
    "combo-sweep": {
        "experiment": dict(_EXPERIMENT),
        "task": dict(_FEWSHOT_TASK, train_shots=20, eval_shots=5),
        "model": {"hidden": 32},
        "inner": {"k": 4, "batch_size": 25, "step_size": 0.1, "optimizer": "sgd", "beta1": 0.0, "beta2": 0.999},
        "outer": {"step_size": 1.0, "iterations": 3000, "paper_iterations": 40000, "meta_batch": 1},
        "eval": {"steps": 5, "batch_size": 25, "step_size": 0.1, "trials": 1000, "every": 500, "curve_trials": 100},
        "run": {
            "combos": ((1, 0, 0, 0), (0, 1, 0, 0), (1, 1, 0, 0), (0, 0, 1, 0), (1, 1, 1, 0), (0, 0, 0, 1), (1, 1, 1, 1)),
            "normalizations": ("sum", "average"),
        },
    },
    "overlap-sweep": {
        "experiment": dict(_EXPERIMENT),
        "task": dict(_FEWSHOT_TASK, train_shots=20, eval_shots=5, tail_shots=5),
        "model": {"hidden": 32},
        "inner": {"k": 4, "batch_size": 25, "step_size": 0.1, "optimizer": "sgd", "sampling": "cycle", "beta1": 0.0, "beta2": 0.999},
        "outer": {"step_size": 1.0, "gradient_step_size": 4.0, "iterations": 3000, "paper_iterations": 40000, "meta_batch": 1},
        "eval": {"steps": 5, "batch_size": 25, "step_size": 0.1, "trials": 1000, "every": 0, "curve_trials": 100},
        "sweep": {"axis": "iterations", "values": (1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0), "arms": OVERLAP_ARMS},
    },
    "taylor-check": {
        "experiment": dict(_EXPERIMENT),
        "task": {"family": "sine", "points": 10, "batch_size": 5, "hidden": (64, 64), "quadratic_dim": 3},
        "study": {
            "algorithms": ("maml", "fomaml", "reptile"),
            "ks": (2, 3),
            "alphas": (0.003, 0.01, 0.03, 0.1),
            "n_samples": 2000,
            "slope_target": 2.0,
            "slope_tolerance": 0.3,
            "check": ("maml", "fomaml"),
        },
    },
    "manifold-demo": {
        "experiment": dict(_EXPERIMENT),
        "manifold": {
            "scenario": "random",
            "dim": 10,
            "codim": 6,
            "n_manifolds": 2,
            "eps": 0.5,
            "iterations": 400000,
            "anneal": True,
            "order": "alternate",
            "record_every": 1000,
            "tolerance": 1e-6,
        },
    },
}

_CHECKS = {
    "sine-demo": _check_sine,
    "fewshot": _check_fewshot,
    "combo-sweep": _check_combo,
    "overlap-sweep": _check_overlap,
    "taylor-check": _check_taylor,
    "manifold-demo": _check_manifold,
}


def defaults_text(command: str) -> str:
    return load_config(command).to_text()


def as_dict(cfg: Config) -> Mapping[str, Mapping[str, Any]]:
    return {s: dict(v) for s, v in cfg.sections.items()}
