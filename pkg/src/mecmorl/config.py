"""Experiment configuration as a flat ``section.key = value`` text file.

Values are Python literals (``ast.literal_eval``); bare words are read as
strings. Lines starting with ``#`` are comments. Writing uses ``repr`` so a
file survives a load/dump cycle unchanged.
"""

from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .momdp import Context, ContextSpace
from .sac import TrainerConfig, preference_grid
from .sim import SimConfig

MODES = ("train", "eval", "front", "baseline", "check")


class ConfigError(ValueError):
    """Invalid or incomplete configuration."""


@dataclass
class ExperimentSection:
    seed: int = None  # required
    mode: str = "train"
    output_dir: str = "runs/default"
    threads: int = 1


@dataclass
class ContextSection:
    n_preferences: int = 64
    train_edges_max: int = 8
    train_cloud_ghz: tuple = (3.5, 4.5)
    train_edge_ghz: tuple = (1.75, 2.25)
    test_edges_max: int = 10
    test_cloud_ghz: tuple = (3.0, 5.0)
    test_edge_ghz: tuple = (1.5, 2.5)


@dataclass
class EvalSection:
    episodes: int = 1000
    seed: int = 12345
    n_preferences: int = 101
    num_edges: int = 6
    cloud_ghz: float = 4.0
    edge_ghz: float = 2.0


@dataclass
class BaselineSection:
    random_grid: int = 11
    sa_budget: int = 10000
    sa_cooling: float = 0.995
    sa_calibration: int = 20
    sa_search_seed: int = 777
    linucb_episodes: int = 50
    linucb_alpha: float = 1.0


SECTIONS = {"experiment": ExperimentSection, "context": ContextSection, "sim": SimConfig,
            "trainer": TrainerConfig, "eval": EvalSection, "baseline": BaselineSection}
REQUIRED = {("experiment", "seed")}


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    context: ContextSection = field(default_factory=ContextSection)
    sim: SimConfig = field(default_factory=SimConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    baseline: BaselineSection = field(default_factory=BaselineSection)

    # derived objects -------------------------------------------------
    def training_space(self) -> ContextSpace:
        c = self.context
        return ContextSpace(preference_grid(c.n_preferences), tuple(range(1, c.train_edges_max + 1)),
                            _ghz(c.train_cloud_ghz), _ghz(c.train_edge_ghz))

    def testing_space(self) -> ContextSpace:
        c = self.context
        return ContextSpace(preference_grid(self.eval.n_preferences),
                            tuple(range(1, c.test_edges_max + 1)),
                            _ghz(c.test_cloud_ghz), _ghz(c.test_edge_ghz))

    def eval_context(self, preference=(0.5, 0.5)) -> Context:
        e = self.eval
        return Context.fixed(e.num_edges, e.cloud_ghz * 1e9, e.edge_ghz * 1e9, preference)

    def eval_preferences(self):
        return preference_grid(self.eval.n_preferences)

    # serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def dumps(self) -> str:
        lines = []
        for name in SECTIONS:
            sec = getattr(self, name)
            for f in fields(sec):
                lines.append(f"{name}.{f.name} = {getattr(sec, f.name)!r}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        values: dict[str, dict[str, Any]] = {s: {} for s in SECTIONS}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'section.key = value'")
            key, val = (p.strip() for p in line.split("=", 1))
            if "." not in key:
                raise ConfigError(f"line {lineno}: key {key!r} lacks a section prefix")
            sec, name = key.split(".", 1)
            if sec not in SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section {sec!r}")
            known = {f.name: f for f in fields(SECTIONS[sec])}
            if name not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if name in values[sec]:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            default = known[name].default
            if default is None and str(known[name].type).startswith("int"):
                default = 0
            values[sec][name] = _coerce(key, _literal(val), default)
        for sec, name in REQUIRED:
            if values[sec].get(name) is None:
                raise ConfigError(f"missing required field {sec}.{name}")
        mode = values["experiment"].get("mode", "train")
        if mode not in MODES:
            raise ConfigError(f"experiment.mode must be one of {MODES}, got {mode!r}")
        kwargs = {}
        for sec, klass in SECTIONS.items():
            try:
                kwargs[sec] = klass(**values[sec])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"section {sec}: {exc}") from None
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.loads(text)

    def override(self, assignments) -> "ExperimentConfig":
        """Apply ``section.key=value`` strings on top of this config."""
        text = self.dumps() + "\n".join(assignments)
        merged = {}
        for line in text.splitlines():
            if "=" in line:
                merged[line.split("=", 1)[0].strip()] = line
        return type(self).loads("\n".join(merged.values()))


def _ghz(pair) -> tuple[float, float]:
    return (float(pair[0]) * 1e9, float(pair[1]) * 1e9)


def _literal(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _coerce(key: str, value, default):
    if value is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected True/False, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a tuple, got {value!r}")
        return tuple(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value
