"""Toy two-tank water plant with injectable logic-layer anomalies.

Tank 1 (``LIT101``) is filled through intake valve ``MV101`` (flow
``FIT101``) and emptied by pump ``P101`` into tank 3 (``LIT301``), which is
drained by an unlogged transfer pump through valve ``MV302`` and a filter
whose differential pressure is ``DPIT301``. Three chemical analysers drift slowly.
Both pumps run hysteresis controllers on their tank levels.

Injections only rewrite readings, the way a deception attack would. The
ground truth they return is the set of injected rows on which the matching
consistency rule fires.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .dataio import TagMapping, TagTable
from .errors import ConfigError, DataError
from .rng import make_rng
from .rules import RuleConfig, derive_labels, eval_pump_level, eval_sensor_freeze, eval_valve_flow

OFF, ON = 1.0, 2.0
CANONICAL = (
    "FIT101",
    "LIT101",
    "MV101",
    "AIT202",
    "AIT203",
    "AIT302",
    "DPIT301",
    "LIT301",
    "MV302",
    "P101",
)
COPY_DECOYS = {"FIT102": "FIT101", "LIT102": "LIT101", "LIT302": "LIT301", "DPIT302": "DPIT301"}
MIX_DECOYS = {
    "MIX401": {"LIT101": 0.6, "LIT301": 0.5, "AIT202": 0.4},
    "MIX402": {"FIT101": 0.5, "DPIT301": 0.5, "AIT203": 0.5},
}
NOISE_DECOYS = ("NOISE1", "NOISE2", "NOISE3", "NOISE4", "NOISE5")
STANDBY = "P102"

# WADI-style names for the transfer plant
PLANT_B_NAMES = {
    "FIT101": "1_FIT_001_PV",
    "LIT101": "1_LT_001_PV",
    "MV101": "1_MV_001_STATUS",
    "AIT202": "2A_AIT_002_PV",
    "AIT203": "2A_AIT_003_PV",
    "AIT302": "2B_AIT_002_PV",
    "DPIT301": "2_DPIT_001_PV",
    "LIT301": "2_LT_002_PV",
    "MV302": "2_MV_006_STATUS",
    "P101": "1_P_001_STATUS",
    "FIT102": "1_FIT_002_PV",
    "LIT102": "1_LS_001_AL",
    "LIT302": "2_LS_101_AH",
    "DPIT302": "2_PIT_001_PV",
    "MIX401": "3_AIT_001_PV",
    "MIX402": "3_AIT_004_PV",
    "NOISE1": "2_FIC_101_CO",
    "NOISE2": "2_FIC_201_CO",
    "NOISE3": "2_FIC_301_CO",
    "NOISE4": "2_MCV_101_CO",
    "NOISE5": "2_MCV_201_CO",
    "P102": "1_P_002_STATUS",
}
KINDS = ("pump_level_freeze", "valve_flow_block", "sensor_freeze_on_transition")


@dataclass(frozen=True)
class PlantConfig:
    n_rows: int = 3000
    seed: int = 0
    tank1_capacity: float = 1000.0
    tank3_capacity: float = 1200.0
    inflow_rate: float = 2.5
    inflow_swing: float = 0.8
    p101_rate: float = 12.5
    p3_rate: float = 4.5
    tank1_low: float = 200.0
    tank1_high: float = 800.0
    tank3_low: float = 500.0
    tank3_high: float = 1000.0
    tank1_start: float = 500.0
    tank3_start: float = 700.0
    valve_period: int = 700
    valve_closed: int = 60
    backwash_period: int = 1500
    backwash_len: int = 120
    valve_lag: int = 4
    level_noise: float = 0.05
    flow_noise: float = 0.02
    dp_noise: float = 0.05
    analyser_noise: float = 0.01
    decoys: bool = True

    def __post_init__(self) -> None:
        if self.n_rows < 2:
            raise ConfigError("n_rows must be >= 2")
        if not self.tank1_low < self.tank1_high <= self.tank1_capacity:
            raise ConfigError("need tank1_low < tank1_high <= tank1_capacity")
        if not self.tank3_low < self.tank3_high <= self.tank3_capacity:
            raise ConfigError("need tank3_low < tank3_high <= tank3_capacity")
        if min(self.inflow_rate, self.p101_rate, self.p3_rate) <= 0:
            raise ConfigError("flow rates must be > 0")
        if self.valve_lag < 0:
            raise ConfigError("valve_lag must be >= 0")
        if min(self.level_noise, self.flow_noise, self.dp_noise, self.analyser_noise) < 0:
            raise ConfigError("noise std must be >= 0")


@dataclass(frozen=True)
class AnomalySpec:
    """One injected attack.

    ``intensity`` is the fraction of the genuine signal suppressed: 1.0 pins
    the reading completely, 0.0 leaves it untouched.
    """

    kind: str
    start: int
    duration: int
    intensity: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown anomaly kind {self.kind!r}; valid: {list(KINDS)}")
        if self.duration < 1 or self.start < 0:
            raise ConfigError("anomaly start must be >= 0 and duration >= 1")
        if not 0.0 <= self.intensity <= 1.0:
            raise ConfigError("intensity must be in [0, 1]")

    @property
    def stop(self) -> int:
        return self.start + self.duration


def _ou(rng: np.random.Generator, n: int, mean: float, theta: float, sigma: float) -> np.ndarray:
    x = np.empty(n)
    x[0] = mean
    shocks = rng.normal(0.0, sigma, n)
    for t in range(1, n):
        x[t] = x[t - 1] + theta * (mean - x[t - 1]) + shocks[t]
    return x


def simulate(cfg: PlantConfig) -> tuple[TagTable, np.ndarray]:
    """Run the plant at 1 Hz for ``cfg.n_rows`` steps; truth is all zeros."""
    n = cfg.n_rows
    rng = make_rng(cfg.seed, "plant/dynamics")
    t = np.arange(n, dtype=np.float64)

    phase = rng.uniform(0, 2 * np.pi)
    supply = cfg.inflow_rate + cfg.inflow_swing * np.sin(2 * np.pi * t / 911.0 + phase)
    supply = supply + _ou(rng, n, 0.0, 0.02, 0.01)
    offset = int(rng.integers(0, cfg.valve_period))
    mv101 = np.where((t + offset) % cfg.valve_period < cfg.valve_closed, OFF, ON)
    bw_offset = int(rng.integers(0, cfg.backwash_period))
    backwash = (t + bw_offset) % cfg.backwash_period < cfg.backwash_len

    lit101 = np.empty(n)
    lit301 = np.empty(n)
    p101 = np.empty(n)
    p3 = np.empty(n)
    fit101 = np.empty(n)
    level1, level3 = cfg.tank1_start, cfg.tank3_start
    pump1 = ON if level1 > 0.5 * (cfg.tank1_low + cfg.tank1_high) else OFF
    pump3 = OFF
    for k in range(n):
        # controllers act on the previous reading
        if level1 >= cfg.tank1_high:
            pump1 = ON
        elif level1 <= cfg.tank1_low:
            pump1 = OFF
        if level3 >= cfg.tank3_high:
            pump3 = ON
        elif level3 <= cfg.tank3_low:
            pump3 = OFF
        q_in = supply[k] if mv101[k] == ON else 0.0
        q_pump = cfg.p101_rate if pump1 == ON else 0.0
        q_out3 = cfg.p3_rate if (pump3 == ON and not backwash[k]) else 0.0
        level1 = min(max(level1 + q_in - q_pump, 0.0), cfg.tank1_capacity)
        level3 = min(max(level3 + q_pump - q_out3, 0.0), cfg.tank3_capacity)
        lit101[k], lit301[k] = level1, level3
        p101[k], p3[k] = pump1, pump3
        fit101[k] = q_in

    noise = make_rng(cfg.seed, "plant/sensor-noise")
    fit101 = np.abs(fit101 + noise.normal(0, cfg.flow_noise, n) * (fit101 > 0))
    lit101 = np.clip(lit101 + noise.normal(0, cfg.level_noise, n), 0, cfg.tank1_capacity)
    lit301 = np.clip(lit301 + noise.normal(0, cfg.level_noise, n), 0, cfg.tank3_capacity)
    fouling = ((t + bw_offset) % cfg.backwash_period) / cfg.backwash_period
    through = (p3 == ON) & ~backwash
    # tank-3 inlet valve follows the running pump after an actuation lag
    lag = min(cfg.valve_lag, n)
    mv302 = np.concatenate([np.full(lag, p101[0]), p101[: n - lag]]) if lag else p101.copy()
    dpit301 = 10.0 + 6.0 * fouling + 4.0 * through + noise.normal(0, cfg.dp_noise, n)
    ait202 = _ou(rng, n, 8.3, 0.002, 0.01) + noise.normal(0, cfg.analyser_noise, n)
    ait203 = _ou(rng, n, 320.0, 0.002, 0.4) + noise.normal(0, cfg.analyser_noise, n)
    ait302 = _ou(rng, n, 250.0, 0.002, 0.3) + noise.normal(0, cfg.analyser_noise, n)

    cols = {
        "FIT101": fit101,
        "LIT101": lit101,
        "MV101": mv101,
        "AIT202": ait202,
        "AIT203": ait203,
        "AIT302": ait302,
        "DPIT301": dpit301,
        "LIT301": lit301,
        "MV302": mv302,
        "P101": p101,
    }
    kinds = {"MV101": "state", "MV302": "state", "P101": "state"}
    names = tuple(cols)
    table = TagTable(
        timestamps=t,
        names=names,
        kinds=tuple(kinds.get(c, "analog") for c in names),
        values=np.column_stack([cols[c] for c in names]),
    )
    if cfg.decoys:
        table = add_decoys(table, cfg.seed)
    return table, np.zeros(n, dtype=np.int8)


def add_decoys(table: TagTable, seed: int, labels: np.ndarray | None = None) -> TagTable:
    """Append redundant, collinear, noise and constant tags.

    Decoys are computed from the table's current readings, so adding them
    after injection makes redundant sensors echo the spoofed values. When
    ``labels`` is given, the error of each redundant copy is made exactly
    uncorrelated with it, so the copy is always the less label-relevant
    member of its pair.
    """
    rng = make_rng(seed, "plant/decoys")
    n = table.n_rows
    cols = {name: table.values[:, j] for j, name in enumerate(table.names)}
    kinds = dict(zip(table.names, table.kinds))
    _add_decoys(cols, kinds, rng, n, labels)
    names = tuple(cols)
    return TagTable(
        table.timestamps,
        names,
        tuple(kinds.get(c, "analog") for c in names),
        np.column_stack([cols[c] for c in names]),
        table.labels,
    )


def _add_decoys(
    cols: dict, kinds: dict, rng: np.random.Generator, n: int, labels: np.ndarray | None = None
) -> None:
    def z(x: np.ndarray) -> np.ndarray:
        s = x.std()
        return (x - x.mean()) / (s if s > 0 else 1.0)

    for name, src in COPY_DECOYS.items():
        # near-duplicate sensors on the same stage (|r| ~ 0.99)
        x = cols[src]
        err = rng.normal(0, 0.1 * x.std(), n)
        if labels is not None and np.ptp(labels) > 0:
            yc = labels - labels.mean()
            err = err - yc * (err @ yc) / (yc @ yc)
        cols[name] = 1.02 * x + err
    for name, weights in MIX_DECOYS.items():
        mix = sum(w * z(cols[src]) for src, w in weights.items())
        cols[name] = 50.0 + 10.0 * (mix + rng.normal(0, 0.05, n))
    for i, name in enumerate(NOISE_DECOYS):
        if i % 2:
            cols[name] = rng.uniform(0, 100, n)
        else:
            cols[name] = rng.normal(40.0, 5.0, n)
    cols[STANDBY] = np.full(n, OFF)
    kinds[STANDBY] = "state"


def _rule_for(kind: str):
    return {
        "pump_level_freeze": eval_pump_level,
        "valve_flow_block": eval_valve_flow,
        "sensor_freeze_on_transition": eval_sensor_freeze,
    }[kind]


def inject(
    table: TagTable,
    truth: np.ndarray,
    spec: AnomalySpec,
    rules: RuleConfig = RuleConfig(),
    *,
    occupied: dict[str, list[tuple[int, int]]] | None = None,
) -> tuple[TagTable, np.ndarray]:
    """Rewrite readings on ``[spec.start, spec.stop)`` to break one rule.

    * ``pump_level_freeze``: the level reading is pinned; the pump is held ON
      because the controller never sees the level fall.
    * ``valve_flow_block``: the flow reading drops to zero while the valve
      state is left as logged.
    * ``sensor_freeze_on_transition``: the pump reading is flipped at
      ``start`` and the level reading pinned for the interval.

    ``occupied`` tracks earlier intervals per kind; overlapping injections of
    the same kind are rejected.
    """
    if spec.stop > table.n_rows:
        raise DataError(
            f"injection [{spec.start}, {spec.stop}) outside trace of {table.n_rows} rows"
        )
    if occupied is not None:
        for a, b in occupied.get(spec.kind, []):
            if spec.start < b and a < spec.stop:
                raise DataError(f"{spec.kind} injection overlaps [{a}, {b})")
        occupied.setdefault(spec.kind, []).append((spec.start, spec.stop))

    vals = np.array(table.values)
    sl = slice(spec.start, spec.stop)
    keep = 1.0 - spec.intensity
    li, pi = table.index(rules.level_tag), table.index(rules.pump_tag)
    if spec.kind == "pump_level_freeze":
        pinned = vals[spec.start, li]
        vals[sl, li] = pinned + keep * (vals[sl, li] - pinned)
        vals[sl, pi] = rules.pump_on_value
    elif spec.kind == "valve_flow_block":
        fi = table.index(rules.flow_tag)
        vals[sl, fi] = keep * vals[sl, fi]
    else:
        prev = vals[spec.start - 1, pi] if spec.start > 0 else vals[spec.start, pi]
        flipped = OFF if prev == ON else ON
        vals[sl, pi] = flipped
        pinned = vals[spec.start, li]
        vals[sl, li] = pinned + keep * (vals[sl, li] - pinned)
    out = table.with_values(vals)
    # rules only look back max(window) rows, so a local slice suffices
    margin = max(rules.pump_window, rules.transition_window) + 1
    lo, hi = max(0, spec.start - margin), min(table.n_rows, spec.stop + margin)
    local = TagTable(out.timestamps[lo:hi], out.names, out.kinds, out.values[lo:hi])
    fired = _rule_for(spec.kind)(local, rules).astype(bool)
    new_truth = np.array(truth, dtype=np.int8)
    span = slice(spec.start - lo, spec.stop - lo)
    new_truth[sl] |= fired[span].astype(np.int8)
    return out, new_truth


@dataclass(frozen=True)
class Benchmark:
    train: TagTable
    train_truth: np.ndarray
    eval: TagTable
    eval_truth: np.ndarray
    mapping: TagMapping
    injections: dict = field(default_factory=dict)


PROFILES = {"small": 3000, "baseline": 30000}


SHARES = {"valve_flow_block": 0.45, "pump_level_freeze": 0.42, "sensor_freeze_on_transition": 0.13}


def _plan_injections(
    table: TagTable,
    truth: np.ndarray,
    rng: np.random.Generator,
    rules: RuleConfig,
    target_fraction: float,
) -> tuple[TagTable, np.ndarray, list[AnomalySpec]]:
    """Walk the trace left to right placing attacks.

    Gaps between attacks shrink while the running anomalous fraction lags
    ``target_fraction`` and grow when it leads, which spreads the attacks
    evenly over the trace.
    """
    n = table.n_rows
    pump = table.column(rules.pump_tag)
    valve = table.column(rules.valve_tag)
    occupied: dict = {}
    specs: list[AnomalySpec] = []
    got = dict.fromkeys(SHARES, 1e-9)
    pos = int(rng.integers(20, 60))
    while pos < n - 20:
        kind = min(SHARES, key=lambda k: got[k] / SHARES[k])
        if kind == "sensor_freeze_on_transition":
            dur = rules.transition_window
        else:
            dur = int(rng.integers(60, 240))
        if kind == "pump_level_freeze":
            ok = np.flatnonzero(pump[pos:] == rules.pump_on_value)
        elif kind == "valve_flow_block":
            ok = np.flatnonzero(valve[pos:] == rules.valve_open_value)
        else:
            ok = np.arange(n - pos)
        if ok.size == 0:
            got[kind] = np.inf
            if all(np.isinf(v) for v in got.values()):
                break
            continue
        start = pos + int(ok[0])
        if kind == "valve_flow_block":
            closed = np.flatnonzero(valve[start : start + dur] != rules.valve_open_value)
            if closed.size:
                dur = int(closed[0])
        dur = min(dur, n - start - 1)
        if dur < rules.transition_window:
            pos = start + 1
            continue
        spec = AnomalySpec(kind, start, dur)
        before = int(truth.sum())
        table, truth = inject(table, truth, spec, rules, occupied=occupied)
        got[kind] += int(truth.sum()) - before
        specs.append(spec)
        lagging = truth[: spec.stop].mean() < target_fraction
        pos = spec.stop + int(rng.integers(10, 40) if lagging else rng.integers(60, 200))
    return table, truth, specs


def make_benchmark(
    profile: str = "small",
    seed: int = 0,
    *,
    n_rows: int | None = None,
    target_fraction: float = 0.44,
    rules: RuleConfig = RuleConfig(),
) -> Benchmark:
    """Training plant A and renamed transfer plant B with all three attacks."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; valid profiles: {sorted(PROFILES)}")
    rows = n_rows or PROFILES[profile]
    cfg_a = PlantConfig(n_rows=rows, seed=seed, decoys=False)
    # plant B: different seed and slightly different process constants
    cfg_b = replace(
        cfg_a,
        seed=seed + 1,
        inflow_rate=2.7,
        p101_rate=12.0,
        tank1_low=230.0,
        tank1_high=780.0,
        valve_period=800,
        level_noise=0.07,
    )
    out = []
    for cfg, label in ((cfg_a, "A"), (cfg_b, "B")):
        table, truth = simulate(cfg)
        rng = make_rng(seed, f"benchmark/{label}/injections")
        table, truth, specs = _plan_injections(table, truth, rng, rules, target_fraction)
        table = add_decoys(table, cfg.seed, derive_labels(table, rules).astype(np.float64))
        out.append((table, truth, specs))
    (ta, ya, sa), (tb, yb, sb) = out
    renamed = TagTable(
        tb.timestamps,
        tuple(PLANT_B_NAMES[c] for c in tb.names),
        tb.kinds,
        tb.values,
        tb.labels,
    )
    mapping = TagMapping(tuple((PLANT_B_NAMES[c], c) for c in CANONICAL))
    return Benchmark(ta, ya, renamed, yb, mapping, {"A": sa, "B": sb})
