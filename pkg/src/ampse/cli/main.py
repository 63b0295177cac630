"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from ..errors import AmpseError, ParseError, StageError, UnknownKey
from ..oracle import load_testbench
from ..oracle.testbench import content_hash
from . import pipeline as pl
from .config import STAGES, default_config, parse_config
from .package import export_package, import_package

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

COMMANDS = ("gen-data", "train", "cepa-train", "search", "refine", "sweep", "verify", "export", "import", "run")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ampse", description="Surrogate-model-based analog design search.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON pipeline configuration (defaults if omitted)")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--stage", choices=STAGES, help="target stage (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="sample per-module datasets")
    sub.add_parser("train", parents=[common], help="train per-module surrogates and export a package")
    sub.add_parser("cepa-train", parents=[common], help="train and assess the early-assertion classifier")
    sub.add_parser("search", parents=[common], help="global search with trained models")
    sub.add_parser("refine", parents=[common], help="search, then oracle refinement of the candidates")
    sub.add_parser("sweep", parents=[common], help="bits-versus-rate feasibility sweep")
    sub.add_parser("verify", parents=[common], help="oracle-verify and rank the refined candidates")
    e = sub.add_parser("export", parents=[common], help="copy the trained model package to a path")
    e.add_argument("package", type=Path)
    i = sub.add_parser("import", parents=[common], help="check a model package against a testbench")
    i.add_argument("package", type=Path)
    i.add_argument("--testbench", help="local testbench (path or builtin:<name>)")
    sub.add_parser("run", parents=[common], help="full pipeline")
    return p


def _config(args):
    cfg = parse_config(args.config) if args.config else default_config()
    return cfg.with_overrides(seed=args.seed, out=args.out, stage=args.stage)


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("AMPSE_WORKERS", "1")))
    except ValueError:
        return 1


def _dispatch(args, cfg) -> int:
    cmd = args.command
    workers = _workers()
    if cmd == "run":
        run = pl.run_pipeline(cfg, workers)
        print(json.dumps({"out": str(run.out), "n_feasible_oracle": run.summary.get("n_feasible_oracle")}))
        return EXIT_OK
    if cmd == "import":
        local = load_testbench(args.testbench) if args.testbench else None
        pkg = import_package(args.package, local)
        print(json.dumps({"testbench": pkg.testbench.id, "hash": pkg.testbench_hash, "stage": pkg.stage,
                          "modules": sorted(pkg.models), "requires_tl": pkg.requires_tl}, sort_keys=True))
        return EXIT_OK

    run = pl.start(cfg, workers)
    if cmd == "gen-data":
        pl.stage_data(run)
    elif cmd == "cepa-train":
        pl.stage_cepa(run)
    elif cmd == "train":
        if cfg["cepa"]["enabled"]:
            pl.stage_cepa(run)
        pl.stage_data(run)
        pl.stage_train(run)
        if run.tb_base is not run.tb_target:
            pl.stage_transfer(run)
    elif cmd == "sweep":
        pl.stage_sweep(run)
    elif cmd == "export":
        pkg = pl.load_models(run)
        export_package(pkg.models, pkg.testbench, args.package, pkg.provenance, pkg.cepa)
        print(str(args.package))
        return EXIT_OK
    else:  # search, refine, verify
        pkg = pl.load_models(run)
        if pkg.requires_tl and run.tb_base is run.tb_target:
            raise StageError("search", AmpseError(
                f"models were trained for testbench {pkg.testbench_hash[:12]} but the target is "
                f"{content_hash(run.tb_target)[:12]}; run 'train' with transfer enabled"))
        pl.stage_search(run)
        if cmd in ("refine", "verify"):
            pl.stage_refine(run)
        if cmd == "verify":
            pl.stage_report(run)
    pl.finish(run)
    print(str(run.out))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
    except (ParseError, UnknownKey) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return _dispatch(args, cfg)
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (AmpseError, OSError, ValueError) as exc:
        print(f"failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
