"""YAML experiment configuration: parsing, validation, dotted overrides and grid expansion.

A config document has three optional top-level sections besides plain
``SimConfig`` fields::

    output_dir: results
    grid:
      aggregators: [fedavg, fedidm]
      attacks: [NONE, DYN_OPT]
      seeds: [0, 1, 2]
    total_rounds: 60
    attack: {malicious_fraction: 0.5}
    ra: {lam: 0.5}

Every other key must name a ``SimConfig`` field; nested sections map onto the
nested config dataclasses. Unknown keys are rejected.
"""
from __future__ import annotations

import copy
import dataclasses
import itertools
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .attacks import AttackKind
from .sim import SimConfig


class ConfigError(ValueError):
    """Malformed or out-of-range configuration."""


GRID_KEYS = ("aggregators", "attacks", "seeds")


@dataclass(frozen=True)
class GridCell:
    name: str
    sim: SimConfig


@dataclass(frozen=True)
class ExperimentConfig:
    sim: SimConfig
    output_dir: Path = Path("results")
    aggregators: tuple[str, ...] = ()
    attacks: tuple[str, ...] = ()
    seeds: tuple[int, ...] = ()

    def cells(self) -> list[GridCell]:
        """One cell per (aggregator, attack, seed); absent axes fall back to ``sim``."""
        aggs = self.aggregators or (self.sim.aggregator,)
        attacks = self.attacks or (self.sim.attack.kind.value,)
        seeds = self.seeds or (self.sim.seed,)
        out = []
        for a, k, s in itertools.product(aggs, attacks, seeds):
            sim = dataclasses.replace(self.sim, aggregator=a, seed=s,
                                      attack=dataclasses.replace(self.sim.attack, kind=k))
            out.append(GridCell(f"{a}_{AttackKind(k).value}_s{s}", sim))
        return out


def _build(cls, raw: Any, where: str):
    """Instantiate dataclass ``cls`` from a mapping, recursing into nested dataclasses."""
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(map(str, unknown))}")
    kwargs = {}
    for key, value in raw.items():
        path = f"{where}.{key}" if where else key
        kwargs[key] = _coerce(hints[key], value, path)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def _coerce(tp, value, path: str):
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None:
            return None
        return _coerce(next(a for a in args if a is not type(None)), value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        return tuple(_coerce(args[0], v, path) for v in value)
    if tp is AttackKind:
        try:
            return AttackKind(str(value).upper())
        except ValueError:
            raise ConfigError(f"{path}: unknown attack {value!r}") from None
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def sim_from_dict(raw: dict) -> SimConfig:
    cfg = _build(SimConfig, raw, "")
    try:
        return cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(raw: Any) -> ExperimentConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    raw = copy.deepcopy(raw)
    out_dir = raw.pop("output_dir", "results")
    grid = raw.pop("grid", None) or {}
    if not isinstance(grid, dict):
        raise ConfigError("grid: expected a mapping")
    bad = sorted(set(grid) - set(GRID_KEYS))
    if bad:
        raise ConfigError(f"grid: unknown key(s) {', '.join(bad)}")
    sim = sim_from_dict(raw)
    exp = ExperimentConfig(
        sim=sim,
        output_dir=Path(str(out_dir)),
        aggregators=_coerce(tuple[str, ...], grid.get("aggregators", []), "grid.aggregators"),
        attacks=tuple(a.value for a in _coerce(tuple[AttackKind, ...], grid.get("attacks", []),
                                                "grid.attacks")),
        seeds=_coerce(tuple[int, ...], grid.get("seeds", []), "grid.seeds"),
    )
    # validate every cell before any compute starts
    for cell in exp.cells():
        try:
            cell.sim.validate()
        except ValueError as exc:
            raise ConfigError(f"grid cell {cell.name}: {exc}") from exc
    return exp


def apply_overrides(raw: dict | None, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` assignments; values are parsed as YAML scalars."""
    raw = copy.deepcopy(raw) if raw else {}
    for item in overrides:
        key, sep, text = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        parts = key.split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {p} is not a section")
        try:
            node[parts[-1]] = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"--set {key}: {exc}") from exc
    return raw


def load_config(path: str | Path, overrides: list[str] = ()) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(apply_overrides(raw, list(overrides)))
