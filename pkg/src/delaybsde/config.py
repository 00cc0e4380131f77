"""YAML experiment configuration with line-numbered validation errors."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigurationError

SECTIONS = ("grid", "ensemble", "forward", "generator", "payoff", "solver", "outputs",
            "market", "risk", "surface", "convergence", "validate")

REQUIRED = {
    "grid": ("T", "N"),
    "ensemble": ("M", "seed"),
    "forward": ("name",),
    "generator": ("name",),
    "payoff": ("name",),
}


def _line_map(node, prefix="", out=None):
    """Dotted key path -> 1-based source line, from the composed YAML node tree."""
    out = {} if out is None else out
    out.setdefault(prefix, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = f"{prefix}.{k.value}" if prefix else str(k.value)
            out[key] = k.start_mark.line + 1
            _line_map(v, key, out)
    return out


@dataclass
class ExperimentConfig:
    data: dict
    source: str = "<config>"
    lines: dict = field(default_factory=dict)

    def error(self, key: str, msg: str) -> ConfigurationError:
        probe = key
        while probe and probe not in self.lines:
            probe = probe.rpartition(".")[0]
        line = self.lines.get(probe)
        where = f"{self.source}:{line}" if line else self.source
        return ConfigurationError(f"{where}: {key}: {msg}")

    def section(self, name: str) -> dict:
        return self.data.get(name) or {}

    def get(self, key: str, default=None):
        cur = self.data
        for part in key.split("."):
            if not isinstance(cur, dict) or part not in cur:
                return default
            cur = cur[part]
        return cur

    def number(self, key: str, default=None, kind=float, minimum=None):
        v = self.get(key, default)
        if v is None:
            raise self.error(key, "missing required value")
        try:
            out = kind(v) if kind is float else _as_int(v)
        except (TypeError, ValueError):
            raise self.error(key, f"expected a number, got {v!r}") from None
        if minimum is not None and out < minimum:
            raise self.error(key, f"must be >= {minimum}, got {out}")
        return out

    def dump(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=False, default_flow_style=False)


def _as_int(v):
    if isinstance(v, bool):
        raise TypeError
    f = float(v)
    if f != int(f):
        raise ValueError
    return int(f)


def _parse_scalar(text: str):
    v = yaml.safe_load(text)
    if isinstance(v, str):
        try:
            return float(v)
        except ValueError:
            return v
    return v


def apply_override(data: dict, assignment: str) -> None:
    """``a.b.c=value`` sets a nested key; the value is parsed as YAML."""
    key, sep, value = assignment.partition("=")
    if not sep or not key:
        raise ConfigurationError(f"override {assignment!r} is not of the form key=value")
    parts = key.strip().split(".")
    cur = data
    for p in parts[:-1]:
        nxt = cur.get(p)
        if nxt is None:
            nxt = cur[p] = {}
        if not isinstance(nxt, dict):
            raise ConfigurationError(f"override {key!r}: {p!r} is not a mapping")
        cur = nxt
    cur[parts[-1]] = _parse_scalar(value)


def parse_config(text: str, source: str = "<config>", overrides=()) -> ExperimentConfig:
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        mark = getattr(err, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        raise ConfigurationError(f"{where}: invalid YAML: {getattr(err, 'problem', err)}") from None
    if not isinstance(data, dict):
        raise ConfigurationError(f"{source}: top level must be a mapping")
    lines = _line_map(node) if node is not None else {}
    data = copy.deepcopy(data)
    for o in overrides:
        apply_override(data, o)
    cfg = ExperimentConfig(data, source, lines)
    validate(cfg)
    return cfg


def load_config(path, overrides=()) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as err:
        raise ConfigurationError(f"{path}: cannot read config ({err.strerror})") from None
    return parse_config(text, str(path), overrides)


def validate(cfg: ExperimentConfig) -> None:
    """Check names, required keys and discretisation consistency."""
    from .forward import MODELS
    from .generators import G_FUNCTIONS, MARKOVIAN
    from .payoffs import PAYOFFS

    for key in cfg.data:
        if key not in SECTIONS:
            raise cfg.error(key, f"unknown section (expected one of {', '.join(SECTIONS)})")
    for sec, keys in REQUIRED.items():
        if sec not in cfg.data:
            raise cfg.error(sec, "missing section")
        if not isinstance(cfg.data[sec], dict):
            raise cfg.error(sec, "must be a mapping")
        for k in keys:
            if cfg.data[sec].get(k) is None:
                raise cfg.error(f"{sec}.{k}" if f"{sec}.{k}" in cfg.lines else sec,
                                f"missing required key {k!r}")
    t0 = cfg.number("grid.t0", 0.0, minimum=0.0)
    T = cfg.number("grid.T")
    if T <= t0:
        raise cfg.error("grid.T", f"horizon must exceed t0={t0}")
    N = cfg.number("grid.N", kind=int, minimum=1)
    cfg.number("ensemble.M", kind=int, minimum=2)
    cfg.number("ensemble.seed", kind=int, minimum=0)
    if not isinstance(cfg.get("ensemble.antithetic", False), bool):
        raise cfg.error("ensemble.antithetic", "must be true or false")
    if cfg.get("ensemble.antithetic", False) and cfg.number("ensemble.M", kind=int) % 2:
        raise cfg.error("ensemble.M", "antithetic sampling needs an even number of paths")
    dt = (T - t0) / N

    if cfg.get("forward.name") not in MODELS:
        raise cfg.error("forward.name", f"unknown forward model {cfg.get('forward.name')!r}")
    if cfg.get("payoff.name") not in PAYOFFS:
        raise cfg.error("payoff.name", f"unknown payoff {cfg.get('payoff.name')!r}")
    gname = cfg.get("generator.name")
    if gname not in ("moving_average", "lagged", "weighted_linear", "markovian") and gname not in MARKOVIAN:
        raise cfg.error("generator.name", f"unknown generator {gname!r}")
    if gname == "markovian" and cfg.get("generator.params.name", "zero") not in MARKOVIAN:
        raise cfg.error("generator.params.name", "unknown Markovian driver")
    if gname == "weighted_linear" and cfg.get("generator.params.g", "one") not in G_FUNCTIONS:
        raise cfg.error("generator.params.g", "unknown weight function")
    for key in ("generator.params.delta", "risk.delta", "market.params.delta"):
        if cfg.get(key) is not None:
            delta = cfg.number(key)
            if delta > 0:
                k = round(delta / dt)
                if k < 1 or abs(delta / dt - k) > 1e-9 * max(1.0, k):
                    raise cfg.error(key, f"delay {delta} is not a multiple of dt={dt:g}")
    if cfg.get("solver") is not None:
        cfg.number("solver.picard_tol", 1e-6)
        cfg.number("solver.picard_max_iter", 50, kind=int, minimum=1)
        if cfg.get("solver.contraction_policy", "warn") not in ("warn", "abort"):
            raise cfg.error("solver.contraction_policy", "must be 'warn' or 'abort'")
        kind = cfg.get("solver.basis.kind", "polynomial")
        from .regression import make_basis
        try:
            make_basis(kind, 3)
        except ValueError as err:
            raise cfg.error("solver.basis.kind", str(err)) from None
