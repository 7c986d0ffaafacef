"""Logic-layer labels from actuator/sensor consistency rules.

Three checks run independently on every row and are OR-ed together:

* pump-level: the pump has been ON for the whole trailing window but the
  tank level has not moved by more than a tolerance;
* valve-flow: the valve reads OPEN while the downstream flow is near zero;
* sensor freeze: the pump changed state recently and the level has stayed
  flat ever since.

Rules work on row index; a 1 Hz cadence is assumed.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dataio import TagTable
from .errors import ConfigError, DataError


@dataclass(frozen=True)
class RuleConfig:
    pump_tag: str = "P101"
    level_tag: str = "LIT101"
    valve_tag: str = "MV101"
    flow_tag: str = "FIT101"
    pump_window: int = 10
    level_tolerance: float = 0.5
    flow_zero_threshold: float = 0.05
    transition_window: int = 5
    freeze_tolerance: float = 0.1
    pump_on_value: float = 2
    valve_open_value: float = 2

    def __post_init__(self) -> None:
        if self.pump_window < 1 or self.transition_window < 1:
            raise ConfigError("rule windows must be >= 1")
        if min(self.level_tolerance, self.flow_zero_threshold, self.freeze_tolerance) < 0:
            raise ConfigError("rule tolerances must be >= 0")
        tags = (self.pump_tag, self.level_tag, self.valve_tag, self.flow_tag)
        if len(set(tags)) != 4:
            raise ConfigError(f"rule tags must be distinct, got {tags}")

    @property
    def tags(self) -> tuple[str, str, str, str]:
        return (self.pump_tag, self.level_tag, self.valve_tag, self.flow_tag)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> RuleConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown rule config keys {unknown}; valid: {sorted(known)}")
        return cls(**doc)


@dataclass(frozen=True)
class RuleEvaluation:
    delta_pump: np.ndarray
    delta_valve: np.ndarray
    delta_freeze: np.ndarray


def _col(table: TagTable, name: str) -> np.ndarray:
    if name not in table.names:
        raise DataError(f"rule tag {name!r} missing from table")
    return table.column(name)


def _trailing_range(x: np.ndarray, w: int) -> np.ndarray:
    """max - min over x[t-w+1 : t+1]; NaN for the first w-1 rows."""
    out = np.full(x.shape, np.nan)
    if x.size >= w:
        view = sliding_window_view(x, w)
        out[w - 1 :] = view.max(axis=1) - view.min(axis=1)
    return out


def eval_pump_level(table: TagTable, cfg: RuleConfig = RuleConfig()) -> np.ndarray:
    pump = _col(table, cfg.pump_tag)
    level = _col(table, cfg.level_tag)
    w = cfg.pump_window
    if w > table.n_rows:
        raise DataError(f"pump_window {w} exceeds table length {table.n_rows}")
    on = (pump == cfg.pump_on_value).astype(np.int64)
    # ON count over the trailing window; == w means continuously ON
    csum = np.concatenate(([0], np.cumsum(on)))
    on_run = np.zeros(on.size, dtype=bool)
    on_run[w - 1 :] = (csum[w:] - csum[:-w]) == w
    flat = np.zeros(on.size, dtype=bool)
    flat[w - 1 :] = _trailing_range(level, w)[w - 1 :] <= cfg.level_tolerance
    return (on_run & flat).astype(np.int8)


def eval_valve_flow(table: TagTable, cfg: RuleConfig = RuleConfig()) -> np.ndarray:
    valve = _col(table, cfg.valve_tag)
    flow = _col(table, cfg.flow_tag)
    return ((valve == cfg.valve_open_value) & (np.abs(flow) <= cfg.flow_zero_threshold)).astype(
        np.int8
    )


def eval_sensor_freeze(table: TagTable, cfg: RuleConfig = RuleConfig()) -> np.ndarray:
    pump = _col(table, cfg.pump_tag)
    level = _col(table, cfg.level_tag)
    w = cfg.transition_window
    n = table.n_rows
    if w > n:
        raise DataError(f"transition_window {w} exceeds table length {n}")
    out = np.zeros(n, dtype=np.int8)
    for t0 in np.flatnonzero(pump[1:] != pump[:-1]) + 1:
        seg = level[t0 : min(t0 + w, n)]
        rng = np.maximum.accumulate(seg) - np.minimum.accumulate(seg)
        # the running range only grows, so the flagged rows form a prefix
        k = int(np.argmax(rng > cfg.freeze_tolerance)) if np.any(rng > cfg.freeze_tolerance) else seg.size
        out[t0 : t0 + k] = 1
    return out


def evaluate_rules(table: TagTable, cfg: RuleConfig = RuleConfig()) -> RuleEvaluation:
    return RuleEvaluation(
        eval_pump_level(table, cfg),
        eval_valve_flow(table, cfg),
        eval_sensor_freeze(table, cfg),
    )


def aggregate_labels(ev: RuleEvaluation) -> np.ndarray:
    """Per-row OR of the three indicators."""
    n = len(ev.delta_pump)
    if len(ev.delta_valve) != n or len(ev.delta_freeze) != n:
        raise DataError("rule indicator sequences differ in length")
    return np.maximum.reduce(
        [np.asarray(ev.delta_pump), np.asarray(ev.delta_valve), np.asarray(ev.delta_freeze)]
    ).astype(np.int8)


def derive_labels(table: TagTable, cfg: RuleConfig = RuleConfig()) -> np.ndarray:
    return aggregate_labels(evaluate_rules(table, cfg))
