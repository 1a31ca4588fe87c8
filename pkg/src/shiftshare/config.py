"""Flat key=value run configuration.

One line per setting, ``key = value``, ``#`` comments, blank lines
ignored.  Grid axes for the specification curve use the same file with
a ``grid.`` prefix and ``|``-separated alternatives, e.g.::

    tax_field = atr95
    instruments = all,interstate
    grid.tax_field = atr95|atr99
    grid.instruments = all|all,interstate

Every key is typed; unknown keys are an error so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass
from pathlib import Path

__all__ = ["ConfigError", "RunConfig", "SpecGrid", "parse_config", "load_config"]

GRID_AXES = ("tax_field", "outcome_transform", "instruments", "state_year_fe", "controls", "outcome_scope")


class ConfigError(ValueError):
    pass


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _parse_str_tuple(raw: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in raw.split(",") if part.strip())


def _parse_int_pair(raw: str) -> tuple[int, int]:
    parts = _parse_str_tuple(raw)
    if len(parts) != 2:
        raise ConfigError(f"expected two comma-separated integers, got {raw!r}")
    return int(parts[0]), int(parts[1])


def _parse_float_tuple(raw: str) -> tuple[float, ...]:
    return tuple(float(p) for p in _parse_str_tuple(raw))


def _parse_opt_int_pair(raw: str):
    return None if not raw.strip() else _parse_int_pair(raw)


@dataclass(frozen=True)
class RunConfig:
    data_dir: str = ""
    out_dir: str = "out"
    seed: int = 0
    threads: int = 1

    tax_field: str = "atr95"
    firm_fields: tuple[str, ...] = ("citr", "itc", "rtc")
    outcome_scope: str = "y_all"
    outcome_transform: str = "log1p"  # or "log" (drops zero-outcome cells)
    choice_fe: tuple[str, ...] = ("pair", "year")
    choice_cluster: tuple[str, ...] = ("pair", "origin_state_year", "dest_state_year")
    impute_rule: str = "zero_mean"
    instruments: tuple[str, ...] = ("all", "interstate")
    state_year_fe: bool = False
    controls: tuple[str, ...] = ()
    window: tuple[int, int] = (-5, 5)
    share_window: tuple[int, int] | None = None
    ring_edges: tuple[float, ...] = (50.0, 100.0, 150.0, 200.0)
    placebo_draws: int = 200
    counterfactual_fields: tuple[str, ...] = ("atr95", "atr99", "atr50", "mtr", "aptr")
    filter_tau: float = 0.10

    sim_zones: int = 30
    sim_states: int = 6
    sim_years: int = 20
    sim_stock: int = 200
    sim_share_exogeneity: bool = True
    sim_endogenous_flows: bool = False
    sim_flow_mode: str = "multinomial"

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out


_PARSERS = {
    "data_dir": str,
    "out_dir": str,
    "seed": int,
    "threads": int,
    "tax_field": str,
    "firm_fields": _parse_str_tuple,
    "outcome_scope": str,
    "outcome_transform": str,
    "choice_fe": _parse_str_tuple,
    "choice_cluster": _parse_str_tuple,
    "impute_rule": str,
    "instruments": _parse_str_tuple,
    "state_year_fe": _parse_bool,
    "controls": _parse_str_tuple,
    "window": _parse_int_pair,
    "share_window": _parse_opt_int_pair,
    "ring_edges": _parse_float_tuple,
    "placebo_draws": int,
    "counterfactual_fields": _parse_str_tuple,
    "filter_tau": float,
    "sim_zones": int,
    "sim_states": int,
    "sim_years": int,
    "sim_stock": int,
    "sim_share_exogeneity": _parse_bool,
    "sim_endogenous_flows": _parse_bool,
    "sim_flow_mode": str,
}

_AXIS_PARSERS = {
    "tax_field": str,
    "outcome_transform": str,
    "instruments": _parse_str_tuple,
    "state_year_fe": _parse_bool,
    "controls": _parse_str_tuple,
    "outcome_scope": str,
}


@dataclass(frozen=True)
class SpecGrid:
    """Named axes of alternatives for the specification curve."""

    axes: dict

    @property
    def size(self) -> int:
        n = 1
        for values in self.axes.values():
            n *= len(values)
        return n

    def cells(self):
        """Yield (spec_id, overrides) in deterministic axis order."""
        names = list(self.axes)
        for i, combo in enumerate(itertools.product(*(self.axes[n] for n in names))):
            yield i, dict(zip(names, combo))


def parse_config(text: str, defaults: RunConfig | None = None) -> tuple[RunConfig, SpecGrid | None]:
    values = {}
    axes = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw_line!r}")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key.startswith("grid."):
            axis = key[len("grid.") :]
            if axis not in _AXIS_PARSERS:
                raise ConfigError(f"line {lineno}: unknown grid axis {axis!r}; known: {GRID_AXES}")
            parser = _AXIS_PARSERS[axis]
            try:
                axes[axis] = [parser(alt.strip()) for alt in raw.split("|")]
            except ConfigError:
                raise
            except ValueError as e:
                raise ConfigError(f"line {lineno}: {e}") from e
            continue
        if key not in _PARSERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _PARSERS[key](raw)
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(f"line {lineno}: {e}") from e
    base = defaults or RunConfig()
    config = base.replace(**values)
    _validate(config)
    return config, (SpecGrid(axes) if axes else None)


def load_config(path, defaults: RunConfig | None = None) -> tuple[RunConfig, SpecGrid | None]:
    return parse_config(Path(path).read_text(encoding="utf-8"), defaults)


def _validate(config: RunConfig):
    if config.outcome_transform not in ("log1p", "log"):
        raise ConfigError(f"outcome_transform must be log1p or log, got {config.outcome_transform!r}")
    if config.impute_rule not in ("zero_mean", "drop", "strict"):
        raise ConfigError(f"impute_rule must be zero_mean, drop, or strict, got {config.impute_rule!r}")
    from .instruments import VARIANTS

    for v in config.instruments:
        if v not in VARIANTS:
            raise ConfigError(f"unknown instrument variant {v!r}; known: {VARIANTS}")
    if not config.instruments:
        raise ConfigError("instrument set must be nonempty")
    if "canonical" in config.instruments and config.share_window is None:
        raise ConfigError("canonical instruments require share_window")
    j_lo, j_hi = config.window
    if j_lo > -1 or j_hi < 0:
        raise ConfigError(f"window must satisfy lower <= -1 <= 0 <= upper, got {config.window}")
    if config.threads < 1:
        raise ConfigError("threads must be >= 1")
    if not 0 < config.filter_tau < 1:
        raise ConfigError("filter_tau must be in (0, 1)")
