"""Command-line entry point: ``tiilstm synth|label|select|train|eval|sweep``.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric failure.
Precedence for every setting: command-line flag, then ``--config`` file, then
built-in default. The effective configuration is echoed into each artifact.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import TagMapping, load_csv, write_csv
from .errors import ConfigError, TiiLstmError
from .evaluation import (
    FULL_GRID,
    SWEEP_KEYS,
    check_grid,
    report_from_scores,
    score_table,
    sweep,
    train_model,
    write_sweep_csv,
)
from .featsel import CorrelationMatrix, FeatureReport, select_features
from .metrics import roc_curve
from .rules import RuleConfig, derive_labels
from .synthplant import PROFILES, make_benchmark
from .tinylstm import load_model
from .trainer import TrainConfig

logger = logging.getLogger("tiilstm")

SCHEMA = "tiilstm.cli/1"


# ------------------------------------------------------------ run config


@dataclass(frozen=True)
class SelectConfig:
    target: int = 10
    corr_threshold: float = 0.9
    vif_threshold: float = 10.0
    n_trees: int = 200

    @classmethod
    def from_dict(cls, doc: dict) -> SelectConfig:
        _reject_unknown(doc, cls, "select")
        return cls(**doc)


PATH_KEYS = ("data", "features", "model", "log", "mapping", "grid", "out")


@dataclass(frozen=True)
class RunConfig:
    """Aggregated settings loaded from ``--config``; unknown keys are rejected."""

    seed: int = 0
    rules: RuleConfig = RuleConfig()
    train: TrainConfig = TrainConfig()
    select: SelectConfig = SelectConfig()
    paths: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict) -> RunConfig:
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        _reject_unknown(doc, cls, "config")
        paths = dict(doc.get("paths", {}))
        bad = sorted(set(paths) - set(PATH_KEYS))
        if bad:
            raise ConfigError(f"unknown paths keys {bad}; valid: {list(PATH_KEYS)}")
        seed = doc.get("seed", 0)
        if not isinstance(seed, int) or seed < 0 or seed >= 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
        try:
            return cls(
                seed=seed,
                rules=RuleConfig.from_dict(doc.get("rules", {})),
                train=TrainConfig.from_dict(doc.get("train", {})),
                select=SelectConfig.from_dict(doc.get("select", {})),
                paths=paths,
            )
        except TypeError as exc:
            raise ConfigError(f"bad config value: {exc}") from exc

    @classmethod
    def read(cls, path: str | None) -> RunConfig:
        if not path:
            return cls()
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "rules": self.rules.to_dict(),
            "train": self.train.to_dict(),
            "select": {f.name: getattr(self.select, f.name) for f in fields(self.select)},
            "paths": dict(self.paths),
        }


def _reject_unknown(doc: dict, cls, what: str) -> None:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown {what} keys {unknown}; valid: {sorted(known)}")


def _overrides(args, names) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


def effective(args) -> RunConfig:
    cfg = RunConfig.read(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    rules = replace(cfg.rules, **_overrides(args, [f.name for f in fields(RuleConfig)]))
    train_kw = _overrides(args, [f.name for f in fields(TrainConfig) if f.name != "seed"])
    train = replace(cfg.train, seed=seed, **train_kw)
    sel = replace(cfg.select, **_overrides(args, [f.name for f in fields(SelectConfig)]))
    return replace(cfg, seed=seed, rules=rules, train=train, select=sel)


def _path(args, attr: str, cfg: RunConfig, key: str | None = None, required: bool = True):
    v = getattr(args, attr, None) or cfg.paths.get(key or attr)
    if v is None and required:
        raise ConfigError(f"missing required path --{attr.replace('_', '-')}")
    return v


def _created() -> str:
    # a fixed stamp keeps artifacts byte-identical across replays
    epoch = int(os.environ.get("SOURCE_DATE_EPOCH", "0"))
    return datetime.fromtimestamp(epoch, timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


# --------------------------------------------------------------- commands


def cmd_synth(args, cfg: RunConfig) -> dict:
    if args.profile not in PROFILES:
        raise ConfigError(f"unknown profile {args.profile!r}; valid profiles: {sorted(PROFILES)}")
    out = Path(_path(args, "out", cfg))
    out.mkdir(parents=True, exist_ok=True)
    bm = make_benchmark(args.profile, cfg.seed, n_rows=args.rows, rules=cfg.rules)
    files = {
        "plant_a": out / "plant_a.csv",
        "plant_b": out / "plant_b.csv",
        "truth": out / "truth.csv",
        "mapping": out / "mapping_b.json",
    }
    write_csv(bm.train, files["plant_a"])
    write_csv(bm.eval, files["plant_b"])
    with open(files["truth"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "plant_a", "plant_b"])
        for i, (a, b) in enumerate(zip(bm.train_truth, bm.eval_truth)):
            w.writerow([i, int(a), int(b)])
    files["mapping"].write_text(bm.mapping.to_json() + "\n", encoding="utf-8")
    return {
        "profile": args.profile,
        "rows": bm.train.n_rows,
        "files": {k: str(v) for k, v in files.items()},
        "truth_fraction": {"plant_a": float(bm.train_truth.mean()), "plant_b": float(bm.eval_truth.mean())},
    }


def _check_rule_tags(table, rules: RuleConfig) -> None:
    missing = [t for t in rules.tags if t not in table.names]
    if missing:
        raise ConfigError(f"rule tags not in data: {missing}")


def cmd_label(args, cfg: RunConfig) -> dict:
    table = load_csv(_path(args, "input", cfg, "data"))
    _check_rule_tags(table, cfg.rules)
    y = derive_labels(table, cfg.rules)
    write_csv(table.with_labels(y), _path(args, "out", cfg))
    n1 = int(y.sum())
    fraction = n1 / len(y)
    print(f"rows={len(y)} normal={len(y) - n1} anomalous={n1} fraction={fraction:.6f}", file=sys.stderr)
    return {"rows": len(y), "normal": len(y) - n1, "anomalous": n1, "fraction": fraction, "rule_config": cfg.rules.to_dict()}


def _labels_for(table, rules: RuleConfig) -> np.ndarray:
    if table.labels is not None:
        return np.asarray(table.labels)
    _check_rule_tags(table, rules)
    return derive_labels(table, rules)


def cmd_select(args, cfg: RunConfig) -> dict:
    table = load_csv(_path(args, "input", cfg, "data"))
    y = _labels_for(table, cfg.rules)
    s = cfg.select
    if not 1 <= s.target <= len(table.names):
        raise ConfigError(f"target {s.target} must be in [1, {len(table.names)}]")
    rep = select_features(
        table, y, target=s.target, corr_threshold=s.corr_threshold, vif_threshold=s.vif_threshold,
        n_trees=s.n_trees, seed=cfg.seed, n_jobs=args.jobs,
    )
    doc = rep.to_dict()
    doc["config"] = cfg.to_dict()
    Path(_path(args, "out", cfg)).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    if args.corr_csv:
        CorrelationMatrix.from_matrix(table.values, table.names).to_csv(args.corr_csv)
    return {"selected": rep.selected, "removed": {
        "stage1": [r.name for r in rep.stage1_removed],
        "stage2": [r.name for r in rep.stage2_removed],
        "stage3": [r.name for r in rep.stage3_removed],
    }}


def _read_features(path: str) -> FeatureReport:
    if not path or not Path(path).is_file():
        raise ConfigError(f"feature report not found: {path}")
    return FeatureReport.read(path)


def _read_model(path: str):
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read model {path}: {exc}") from exc
    return load_model(blob)


def cmd_train(args, cfg: RunConfig) -> dict:
    table = load_csv(_path(args, "input", cfg, "data"))
    feats = _read_features(_path(args, "features", cfg))
    resume = _read_model(args.resume) if args.resume else None
    y = _labels_for(table, cfg.rules)
    tm = train_model(
        table, feats, cfg.train, cfg.rules, labels=y, created=_created(), resume=resume,
        extra={"run_config": cfg.to_dict()},
    )
    Path(_path(args, "out", cfg, "model")).write_bytes(tm.blob)
    log = _path(args, "log", cfg, required=False)
    summary = tm.report.to_dict()
    summary.update({"train_time_s": tm.train_time_s, "config": cfg.to_dict()})
    if log:
        tm.report.write_csv(log)
        Path(str(log) + ".json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return {k: summary[k] for k in ("chunks_processed", "total_chunks", "stopped_early", "stop_reason", "final_val_f1", "final_val_roc_auc", "train_time_s")}


def cmd_eval(args, cfg: RunConfig) -> dict:
    model = _read_model(args.model)
    table = load_csv(_path(args, "input", cfg, "data"), label_column=None if args.derive_labels else "logic_label")
    mapping = None
    mpath = args.mapping or cfg.paths.get("mapping")
    if mpath:
        try:
            mapping = TagMapping.read(mpath)
        except OSError as exc:
            raise ConfigError(f"cannot read mapping {mpath}: {exc}") from exc
    tau = args.tau if args.tau is not None else model.tau
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"tau must be in [0, 1], got {tau}")
    s = score_table(model, table, mapping)
    rep = report_from_scores(s.scores, s.targets, tau)
    rep.extra = {
        "n_windows": int(len(s.targets)),
        "positive_predictions": int(rep.cm.tp + rep.cm.fp),
        "rss_before_mb": s.rss_before_mb,
        "rss_after_mb": s.rss_after_mb,
        "inference_time_s": s.inference_time_s,
    }
    doc = rep.to_dict()
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    if args.emit_roc:
        fpr, tpr, thr = roc_curve(s.scores, s.targets)
        with open(args.emit_roc, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fpr", "tpr", "threshold"])
            for row in zip(fpr, tpr, thr):
                w.writerow([repr(float(v)) for v in row])
    if args.scores:
        with open(args.scores, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["window_end", "score", "target"])
            for e, p, t in zip(s.ends, s.scores, s.targets):
                w.writerow([int(e), repr(float(p)), int(t)])
    return doc


def cmd_sweep(args, cfg: RunConfig) -> dict:
    table = load_csv(_path(args, "input", cfg, "data"))
    feats = _read_features(_path(args, "features", cfg))
    gpath = _path(args, "grid", cfg, required=False)
    if gpath == "full":
        grid = FULL_GRID
    elif gpath:
        try:
            grid = json.loads(Path(gpath).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read grid {gpath}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"grid {gpath} is not valid JSON: {exc}") from exc
        if not isinstance(grid, dict):
            raise ConfigError("grid must be a JSON object of parameter -> list of values")
    else:
        grid = {}
    grid = check_grid(grid)
    y = _labels_for(table, cfg.rules)
    rows = sweep(table.with_labels(y), cfg.train, grid, feats, cfg.rules, jobs=args.jobs or 1)
    out = _path(args, "out", cfg)
    write_sweep_csv(rows, out)
    summary = {"rows": [r.row() for r in rows], "config": cfg.to_dict(), "grid": grid}
    Path(str(out) + ".json").write_text(json.dumps(summary, indent=2, default=_json_default) + "\n", encoding="utf-8")
    return {"rows": len(rows), "out": str(out)}


def _json_default(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    raise TypeError(type(v))


# ----------------------------------------------------------------- parser


def _add_rule_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("rule overrides")
    for f in fields(RuleConfig):
        kind = str if f.type in ("str", str) else (int if f.type in ("int", int) else float)
        g.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=kind, default=None)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training overrides")
    g.add_argument("--w", "-W", dest="w", type=int)
    g.add_argument("--C", "-C", dest="C", type=int)
    g.add_argument("--B", "-B", dest="B", type=int)
    g.add_argument("--U", "-U", dest="U", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--patience", type=int)
    g.add_argument("--plateau-epsilon", dest="plateau_epsilon", type=float)
    g.add_argument("--val-every", dest="val_every", type=int)
    g.add_argument("--split-ratio", dest="split_ratio", type=float)
    g.add_argument("--smote-k", dest="smote_k", type=int)
    g.add_argument("--smote-on", dest="smote_on", choices=("windows", "rows"))


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 already; keep one message format
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _global_flags(p: argparse.ArgumentParser, default) -> None:
    p.add_argument("--config", default=default, help="RunConfig JSON file")
    p.add_argument("--seed", type=int, default=default, help="master seed (default 0)")
    p.add_argument("--json", action="store_true", default=default or False, help="print a JSON result document")
    p.add_argument("--jobs", type=int, default=default, help="worker processes for forests/sweeps")


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand; the copy on
    # each subcommand suppresses its defaults so it cannot clobber the first
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, argparse.SUPPRESS)

    p = _Parser(prog="tiilstm", description=__doc__.splitlines()[0])
    _global_flags(p, None)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate the synthetic benchmark")
    s.add_argument("--profile", default="small")
    s.add_argument("--rows", type=int, default=None, help="override the profile row count")
    s.add_argument("--out", required=False)
    _add_rule_flags(s)

    s = sub.add_parser("label", parents=[common], help="append rule-derived logic_label column")
    s.add_argument("input", nargs="?")
    s.add_argument("--out")
    _add_rule_flags(s)

    s = sub.add_parser("select", parents=[common], help="three-stage feature selection")
    s.add_argument("input", nargs="?")
    s.add_argument("--out")
    s.add_argument("--target", type=int)
    s.add_argument("--corr-threshold", dest="corr_threshold", type=float)
    s.add_argument("--vif-threshold", dest="vif_threshold", type=float)
    s.add_argument("--n-trees", dest="n_trees", type=int)
    s.add_argument("--corr-csv", dest="corr_csv", help="also write the correlation matrix")
    _add_rule_flags(s)

    s = sub.add_parser("train", parents=[common], help="incremental chunk training")
    s.add_argument("input", nargs="?")
    s.add_argument("--features")
    s.add_argument("--out")
    s.add_argument("--log", help="per-chunk CSV log (a .json summary is written alongside)")
    s.add_argument("--resume", help="continue from the weights of a saved model")
    s.add_argument("--tau", type=float)
    _add_train_flags(s)
    _add_rule_flags(s)

    s = sub.add_parser("eval", parents=[common], help="score a log with a trained model")
    s.add_argument("model")
    s.add_argument("input", nargs="?")
    s.add_argument("--mapping")
    s.add_argument("--tau", type=float)
    s.add_argument("--out")
    s.add_argument("--emit-roc", dest="emit_roc")
    s.add_argument("--scores", help="write per-window scores")
    s.add_argument(
        "--derive-labels", dest="derive_labels", action="store_true",
        help="ignore a stored logic_label column and derive labels with the model's rules",
    )

    s = sub.add_parser("sweep", parents=[common], help="one-at-a-time parameter sweep")
    s.add_argument("input", nargs="?")
    s.add_argument("--features")
    s.add_argument("--grid", help=f"JSON file of {sorted(SWEEP_KEYS)} -> values, or 'full'")
    s.add_argument("--out")
    s.add_argument("--tau", type=float)
    _add_train_flags(s)
    _add_rule_flags(s)
    return p


COMMANDS = {
    "synth": cmd_synth,
    "label": cmd_label,
    "select": cmd_select,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def _setup_logging() -> None:
    level = os.environ.get("TIILSTM_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        if args.jobs is not None and args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        if args.command == "eval":
            cfg = RunConfig.read(args.config)
            if args.seed is not None:
                cfg = replace(cfg, seed=args.seed)
        else:
            cfg = effective(args)
        result = COMMANDS[args.command](args, cfg)
    except TiiLstmError as exc:
        print(f"tiilstm: error: {exc}", file=sys.stderr)
        if "--json" in (sys.argv[1:] if argv is None else argv):
            print(json.dumps({"schema": SCHEMA, "ok": False, "error": str(exc), "exit_code": exc.exit_code}))
        return exc.exit_code
    if args.json:
        print(json.dumps({"schema": SCHEMA, "ok": True, "command": args.command, "result": result}, default=_json_default))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
