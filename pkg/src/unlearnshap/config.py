"""Experiment configuration: an INI-style ``key = value`` file with sections.

Every key has a typed default; defaults for training and unlearning are the
reference hyperparameters (AdamW lr 3e-4, 10 epochs, batch 32; 100 unlearning
steps at lr 2e-5, lambda1 = lambda2 = 1.0; 1000 permutations at point level,
10 at subset level).
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Callable

from .errors import ParseError, ValidationError

KINDS = ("value", "eval-noisy", "eval-removal", "partial", "audit", "bench")
METHODS = ("unlearning-shapley", "data-shapley", "beta-shapley", "knn-shapley", "influence")


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(" ", "").split(",") if t)


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(" ", "").split(",") if t)


def _optional_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "auto", "none") else int(text)


@dataclass(frozen=True)
class Option:
    parse: Callable[[str], Any]
    default: Any
    check: Callable[[Any], bool] = lambda v: True
    rule: str = ""
    choices: tuple = ()


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _unit(v):
    return 0 < v < 1


SCHEMA: dict[str, dict[str, Option]] = {
    "experiment": {
        "kind": Option(str, None, choices=KINDS),
        "seed": Option(int, 0, _nonneg, ">= 0"),
        "output_dir": Option(str, "results"),
        "workers": Option(int, 1, lambda v: v >= 1, ">= 1"),
    },
    "data": {
        "source": Option(str, "synthetic", choices=("synthetic", "csv")),
        "n": Option(int, 200, lambda v: v >= 2, ">= 2"),
        "n_test": Option(int, 200, lambda v: v >= 1, ">= 1"),
        "dim": Option(int, 2, lambda v: v >= 1, ">= 1"),
        "num_classes": Option(int, 2, lambda v: v >= 2, ">= 2"),
        "separation": Option(float, 3.0, _nonneg, ">= 0"),
        "path": Option(str, ""),
        "test_path": Option(str, ""),
        "label_column": Option(str, "label"),
        "flip_fraction": Option(float, 0.0, lambda v: 0 <= v <= 1, "in [0, 1]"),
        "granularity": Option(str, "point", choices=("point", "subset")),
        "num_players": Option(_optional_int, None, lambda v: v is None or v >= 1, ">= 1 or auto"),
    },
    "model": {
        "hidden_dims": Option(_int_list, (512,), lambda v: all(h >= 1 for h in v), "positive integers"),
        "activation": Option(str, "relu", choices=("relu", "tanh")),
    },
    "train": {
        "epochs": Option(int, 10, lambda v: v >= 1, ">= 1"),
        "batch_size": Option(int, 32, lambda v: v >= 1, ">= 1"),
        "learning_rate": Option(float, 3e-4, _pos, "> 0"),
        "beta1": Option(float, 0.9, _unit, "in (0, 1)"),
        "beta2": Option(float, 0.999, _unit, "in (0, 1)"),
        "eps": Option(float, 1e-8, _pos, "> 0"),
        "weight_decay": Option(float, 0.01, _nonneg, ">= 0"),
    },
    "unlearn": {
        "steps": Option(int, 100, _nonneg, ">= 0"),
        "batch_size": Option(int, 32, lambda v: v >= 1, ">= 1"),
        "learning_rate": Option(float, 2e-5, _pos, "> 0"),
        "lambda1": Option(float, 1.0, _nonneg, ">= 0"),
        "lambda2": Option(float, 1.0, _nonneg, ">= 0"),
        "optimizer": Option(str, "sgd", choices=("sgd", "adamw")),
        "l2_reduction": Option(str, "sum", choices=("sum", "mean")),
        "split_test": Option(_bool, False),
    },
    "valuation": {
        "method": Option(str, "unlearning-shapley", choices=METHODS),
        "estimator": Option(str, "mc", choices=("mc", "exact")),
        "mode": Option(str, "approx", choices=("approx", "oracle")),
        "max_permutations": Option(_optional_int, None, lambda v: v is None or v >= 1, ">= 1 or auto"),
        "window": Option(int, 50, lambda v: v >= 1, ">= 1"),
        "threshold": Option(float, 0.005, _pos, "> 0"),
        "relative_threshold": Option(_bool, True),
        "beta_alpha": Option(float, 16.0, _pos, "> 0"),
        "beta_beta": Option(float, 1.0, _pos, "> 0"),
        "k": Option(int, 5, lambda v: v >= 1, ">= 1"),
    },
    "task": {
        "bin_fraction": Option(float, 0.05, lambda v: 0 < v <= 1, "in (0, 1]"),
        "removal_fractions": Option(_float_list, tuple(round(0.05 * k, 2) for k in range(20)),
                                    lambda v: len(v) > 0 and all(0 <= f <= 0.95 for f in v)
                                    and all(b > a for a, b in zip(v, v[1:])),
                                    "strictly increasing within [0, 0.95]"),
        "num_subsets": Option(int, 10, lambda v: v >= 4, ">= 4"),
        "target_subset": Option(int, 0, _nonneg, ">= 0"),
        "replicates": Option(int, 1, lambda v: v >= 1, ">= 1"),
        "subtract_empty": Option(_bool, False),
        "repeats": Option(int, 3, lambda v: v >= 3, ">= 3"),
        "kr_on": Option(str, "forget", choices=("forget", "remain")),
        "histogram_bins": Option(int, 20, lambda v: v >= 2, ">= 2"),
    },
}


class ConfigError(ValidationError):
    """Invalid configuration; ``field`` names the offending ``section.key``."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        super().__init__(message)
        self.field = field
        self.line = line


@dataclass
class ExperimentConfig:
    values: dict[str, dict[str, Any]]
    defaulted: list[str] = field(default_factory=list)

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def get(self, dotted: str):
        section, key = dotted.split(".")
        return self.values[section][key]

    def override(self, dotted: str, value) -> None:
        section, key = dotted.split(".")
        option = SCHEMA[section][key]
        _validate(option, value, dotted)
        self.values[section][key] = value
        if dotted in self.defaulted:
            self.defaulted.remove(dotted)

    def resolved_permutations(self) -> int:
        explicit = self.values["valuation"]["max_permutations"]
        if explicit is not None:
            return explicit
        return 10 if self.values["data"]["granularity"] == "subset" else 1000

    def to_json(self) -> dict:
        return {s: {k: (list(v) if isinstance(v, tuple) else v) for k, v in opts.items()}
                for s, opts in self.values.items()}

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _validate(option: Option, value, dotted: str) -> None:
    if option.choices and value not in option.choices:
        raise ConfigError(f"{dotted} = {value!r}: accepted values are {', '.join(option.choices)}", dotted)
    if not option.check(value):
        raise ConfigError(f"{dotted} = {value!r} violates constraint: must be {option.rule}", dotted)


def _line_of(text: str, section: str, key: str) -> int | None:
    current = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
        elif current == section and line.split("=", 1)[0].strip().lower() == key:
            return no
    return None


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as exc:
        raise ParseError(f"{source}: line {exc.lineno}: expected a [section] header", exc.lineno) from None
    except configparser.DuplicateOptionError as exc:
        raise ParseError(f"{source}: line {exc.lineno}: duplicate key {exc.option!r}", exc.lineno) from None
    except configparser.DuplicateSectionError as exc:
        raise ParseError(f"{source}: line {exc.lineno}: duplicate section [{exc.section}]", exc.lineno) from None
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if exc.errors else None
        raise ParseError(f"{source}: line {lineno}: malformed line", lineno) from None

    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]; known: {', '.join(SCHEMA)}", section,
                              _line_of(text, section, ""))
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(
                    f"unknown key {section}.{key}; accepted keys: {', '.join(SCHEMA[section])}",
                    f"{section}.{key}", _line_of(text, section, key))

    values: dict[str, dict[str, Any]] = {}
    defaulted = []
    for section, options in SCHEMA.items():
        values[section] = {}
        for key, option in options.items():
            dotted = f"{section}.{key}"
            if parser.has_option(section, key):
                raw = parser.get(section, key)
                try:
                    value = option.parse(raw)
                except ValueError as exc:
                    raise ConfigError(f"{dotted}: cannot parse {raw!r} ({exc})", dotted,
                                      _line_of(text, section, key)) from None
                _validate(option, value, dotted)
            else:
                if option.default is None and key == "kind":
                    raise ConfigError(f"{dotted} is required; accepted values are {', '.join(KINDS)}", dotted)
                value = option.default
                defaulted.append(dotted)
            values[section][key] = value
    cfg = ExperimentConfig(values, defaulted)
    if cfg["data"]["source"] == "csv" and not cfg["data"]["path"]:
        raise ConfigError("data.path is required when data.source = csv", "data.path")
    return cfg


def load_config(path: str) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), source=str(path))


@dataclass
class ValidationReport:
    ok: bool
    errors: list[str]
    defaulted: dict[str, Any]

    def render(self) -> str:
        lines = ["config OK" if self.ok else "config INVALID"]
        lines += [f"error: {e}" for e in self.errors]
        if self.defaulted:
            lines.append("defaults applied:")
            lines += [f"  {k} = {v}" for k, v in self.defaulted.items()]
        return "\n".join(lines)


def validate(config_path: str) -> ValidationReport:
    """Check a config file without running anything."""
    try:
        cfg = load_config(config_path)
    except (ConfigError, ParseError) as exc:
        return ValidationReport(False, [str(exc)], {})
    return ValidationReport(True, [], {k: cfg.get(k) for k in cfg.defaulted})
