"""Command line: ``npbml {run,evaluate,ablate,check}``.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 numerical
failure (divergence), 4 a check failed, 5 missing or unreadable files,
1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .config import ConfigError, ExperimentConfig, load_config, validate

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK, EXIT_IO = 0, 1, 2, 3, 4, 5


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seeds=tuple(args.seed))
    if getattr(args, "out", None):
        cfg = cfg.replace(out_dir=str(args.out))
    if getattr(args, "precision", None):
        cfg = cfg.replace(precision=args.precision)
    if getattr(args, "workers", None):
        cfg = cfg.replace(workers=args.workers)
    validate(cfg)
    return cfg


def _load(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config", "a config file is required")
    return _apply_overrides(load_config(args.config), args)


def _dry_run(cfg: ExperimentConfig) -> int:
    sys.stdout.write(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return EXIT_OK


def cmd_run(args) -> int:
    from .experiment import run_all
    cfg = _load(args)
    if args.dry_run:
        return _dry_run(cfg)
    report = run_all(cfg)
    print(f"{cfg.name}: {report.format()}")
    for s in report.per_seed:
        print(f"  seed {s['seed']}: {s['mean']:.4f} +- {s['half_width']:.4f} ({s['task_count']} tasks)")
    print(f"artifacts in {cfg.out_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .experiment import evaluate, write_records
    cfg = _load(args) if args.config else None
    if args.dry_run:
        return _dry_run(cfg) if cfg else EXIT_OK
    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(args.checkpoint)
    seed = args.seed[0] if args.seed else 0
    report, records = evaluate(args.checkpoint, cfg, args.n_tasks, seed, args.split)
    print(report.format())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_records(out / "records.csv", records)
        (out / "eval_report.json").write_text(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .experiment import ablation, format_table
    cfg = _load(args)
    if args.dry_run:
        return _dry_run(cfg)
    table = ablation(cfg, rows=args.rows)
    metric = next((t.get("metric") for t in table if t.get("metric")), "accuracy")
    print(format_table(table, metric))
    failed = [t["row"] for t in table if t["status"] != "ok"]
    if failed:
        print(f"failed rows: {failed}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_check(args) -> int:
    from .checks import run_checks
    if args.dry_run:
        return EXIT_OK
    results = run_checks(full=args.full, out_dir=args.out)
    for r in results:
        print(r.line(), flush=True)
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="npbml", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="experiment YAML")
        sp.add_argument("--seed", type=int, nargs="+", help="override the seed list")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
        sp.add_argument("--precision", choices=("single", "double"))
        sp.add_argument("--workers", type=int, help="parallel runs (seeds or ablation rows)")

    sp = sub.add_parser("run", help="pretrain, meta-train and evaluate every seed")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("evaluate", help="evaluate a checkpoint on meta-test tasks")
    common(sp, config_required=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--n-tasks", type=int, default=None, help="default: the config's (600)")
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("ablate", help="run the ten-row ablation matrix")
    common(sp)
    sp.add_argument("--rows", type=int, nargs="+", help="subset of rows (1-10)")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("check", help="run the property and oracle suite")
    common(sp, config_required=False)
    sp.add_argument("--full", action="store_true", help="include the long directional experiments")
    sp.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .experiment import SplitError
    from .inner import DivergenceError
    from .outer import AllEpisodesDiverged
    try:
        return args.func(args)
    except (ConfigError, SplitError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, AllEpisodesDiverged, FloatingPointError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, IsADirectoryError, PermissionError) as err:
        print(f"file error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
