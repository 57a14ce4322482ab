"""Command line: ``mapprune {train,oracle,correlate,prune,baseline-reg}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime or
numeric failure. Outputs contain no timestamps, so identical config and seed
give byte-identical files.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config
from .errors import (ConfigError, DataError, MapPruneError, ModelFormatError, NumericError, PruningError)
from . import experiments as X
from .network import build_testbed, save
from .oracle import write_oracle_csv
from .pruner import check_feasible, run

log = logging.getLogger("mapprune")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _cell(v):
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else v


def _write_rows(path, fields, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for r in rows:
            w.writerow([_cell(r[f]) for f in fields])


def _prepare_out(out: Path, force: bool):
    if out.exists() and not out.is_dir():
        raise ConfigError(f"--out {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"--out {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)


def cmd_train(cfg: ExperimentConfig, out: Path):
    train, test = X.load_data(cfg)
    net, history = X.train_model(cfg, train, test)
    save(net, out / "model.prnb")
    doc = {"seed": cfg.seed, "updates": cfg.train.updates, "history": history, **X.metrics(net, train, test)}
    _write_json(out / "metrics.json", doc)
    log.info("train accuracy %.4f", doc["final_train_accuracy"])


def _oracle_data(cfg, train, test):
    if cfg.oracle_split == "test":
        if test is None:
            raise ConfigError("oracle_split is 'test' but no test split is configured")
        return test
    return train


def cmd_oracle(cfg: ExperimentConfig, out: Path):
    train, test = X.load_data(cfg)
    net = X.model_for(cfg, train, test)
    records, stats = X.oracle_report(net, _oracle_data(cfg, train, test))
    write_oracle_csv(out / "oracle.csv", records)
    _write_json(out / "rank_stats.json", stats)


def cmd_correlate(cfg: ExperimentConfig, out: Path):
    from .oracle import oracle_scores

    train, test = X.load_data(cfg)
    net = X.model_for(cfg, train, test)
    records, _ = X.oracle_report(net, _oracle_data(cfg, train, test))
    tables = X.criterion_tables(net, train, cfg)
    rows = X.correlation_rows(tables, oracle_scores(records, "abs"), cfg.correlate.combination_grid)
    _write_rows(out / "correlation.csv", ("criterion", "scope", "spearman"),
                [dict(zip(("criterion", "scope", "spearman"), r)) for r in rows])


def cmd_prune(cfg: ExperimentConfig, out: Path):
    train, test = X.load_data(cfg)
    pc = cfg.prune.model_copy(update={"seed": cfg.seed})
    if not cfg.model_path:
        # reject unreachable targets before spending time on training
        check_feasible(build_testbed(train.input_shape, train.class_count, tuple(cfg.model.channels),
                                     k=cfg.model.kernel), pc)
    net = X.model_for(cfg, train, test)
    try:
        pruned, trace = run(net, train, pc, test)
    except PruningError as exc:
        if exc.trace is not None:
            exc.trace.to_csv(out / "trace.csv")
            exc.trace.to_json(out / "trace.json")
        raise
    trace.to_csv(out / "trace.csv")
    trace.to_json(out / "trace.json")
    save(pruned, out / "model.prnb")


def cmd_baseline_reg(cfg: ExperimentConfig, out: Path):
    train, test = X.load_data(cfg)
    net = X.model_for(cfg, train, test)
    _write_rows(out / "baseline.csv", X.BASELINE_FIELDS, X.baseline_sweep(net, train, test, cfg))


COMMANDS = {
    "train": cmd_train,
    "oracle": cmd_oracle,
    "correlate": cmd_correlate,
    "prune": cmd_prune,
    "baseline-reg": cmd_baseline_reg,
}


def build_parser():
    p = argparse.ArgumentParser(prog="mapprune", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="JSON experiment config (defaults apply if omitted)")
        s.add_argument("--seed", type=int, help="overrides the config seed")
        s.add_argument("--out", type=Path, required=True, help="output directory (must be empty)")
        s.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    return p


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg.seed = args.seed
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
        _prepare_out(args.out, args.force)
        COMMANDS[args.command](cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ModelFormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, PruningError, MapPruneError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
