"""Command-line entry point.

Every subcommand reads the same run configuration: an optional YAML file
(``--config``), an optional named profile (``--profile``) and dotted
overrides (``--set train.epochs=3``). Exit codes: 0 success, 1 config
error, 2 stage failure, 3 infeasible controller constraint.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline as pl
from .config import PROFILES, ConfigError, RunConfig, config_text, load_config
from .controller import ControllerParams, feasible, run_controller
from .rng import stream
from .trainer import load_model

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_INFEASIBLE = 0, 1, 2, 3

log = logging.getLogger("semtok")


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--profile", choices=sorted(PROFILES), help="named preset merged under the file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, e.g. train.epochs=3 (repeatable)")
    parser.add_argument("--seed", type=int, help="global seed (same as --set seed=N)")
    parser.add_argument("--out-dir", help="run directory (same as --set out_dir=PATH)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semtok", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the toy dataset as raster files")
    _common(p)
    p = sub.add_parser("train", help="pretrain the backbone, then fine-tune each regime")
    _common(p)
    p.add_argument("--regime", action="append", help="only this regime (repeatable)")
    p.add_argument("--skip-pretrain", action="store_true", help="reuse an existing backbone checkpoint")
    p = sub.add_parser("eval", help="accuracy per (regime, r, alpha, SNR) into reports/summary.csv")
    _common(p)
    p = sub.add_parser("build-proxy", help="accuracy table for the controller into reports/proxy.csv")
    _common(p)
    p = sub.add_parser("tune", help="grid-search V and mu per rho_th into reports/tune.csv")
    _common(p)
    p = sub.add_parser("run-controller", help="run the controller and write slot traces")
    _common(p)
    p.add_argument("--rho-th", type=float, help="single constraint with explicit --V and --mu")
    p.add_argument("--V", type=float)
    p.add_argument("--mu", type=float)
    p = sub.add_parser("baseline", help="digital baseline sweep into reports/baselines.csv")
    _common(p)
    p = sub.add_parser("export-masks", help="per-token retained flags into reports/masks.csv")
    _common(p)
    p.add_argument("--regime", default=None, help="model to inspect (default: controller.regime)")
    p.add_argument("--alphas", type=float, nargs="+", default=[0.25, 0.5, 0.75, 1.0])
    p.add_argument("--count", type=int, default=8, help="number of test images")
    p = sub.add_parser("pipeline", help="every stage in order")
    _common(p)
    p = sub.add_parser("show-config", help="print the resolved configuration")
    _common(p)
    return parser


def resolve(args: argparse.Namespace) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out_dir is not None:
        overrides.append(f"out_dir={args.out_dir}")
    return load_config(args.config, overrides, args.profile)


def _run_controller(config: RunConfig, args) -> None:
    table = pl.load_proxy(config)
    cc = config.controller
    if args.rho_th is not None:
        if args.V is None or args.mu is None:
            raise ConfigError("--rho-th needs --V and --mu")
        if not feasible(table, args.rho_th):
            raise pl.InfeasibleConstraint(f"rho_th={args.rho_th:g} admits no feasible cell")
        trace = run_controller(table, pl.snr_process(config), ControllerParams(args.V, args.mu, args.rho_th),
                               cc.horizon, stream(config.seed, "controller", 999))
        print(trace.to_csv(config.paths.reports / f"trace_rho{args.rho_th:g}.csv"))
        return
    tuned = pl.read_tuned(config)
    if not any(row[1] for row in tuned):
        raise pl.InfeasibleConstraint("tune.csv lists no feasible rho_th")
    for path in pl.run_tuned(config, table, tuned):
        print(path)


def _export_masks(config: RunConfig, args) -> None:
    regime = args.regime or config.controller.regime
    model, _ = load_model(config.paths.regime(regime) / "model.ckpt")
    _, test_set = pl.load_data(config)
    records = pl.export_masks(model, test_set.images[: args.count], args.alphas)
    print(pl.write_masks(config.paths.reports / "masks.csv", records))


def dispatch(config: RunConfig, args) -> None:
    cmd = args.command
    if cmd == "show-config":
        sys.stdout.write(config_text(config))
        return
    config.paths.reports.mkdir(parents=True, exist_ok=True)
    if cmd == "pipeline":
        for name, path in pl.run_pipeline(config).items():
            print(f"{name}\t{path}")
        return
    stage = {"baseline": "baselines"}.get(cmd, cmd)
    try:
        if cmd == "gen-data":
            pl.gen_data(config)
            print(config.paths.data)
        elif cmd == "train":
            train_set, _ = pl.load_data(config)
            if not (args.skip_pretrain and config.paths.backbone.exists()):
                print(pl.pretrain(config, train_set))
            for regime in args.regime or config.regimes:
                print(pl.finetune_regime(config, regime, train_set))
        elif cmd == "eval":
            _, test_set = pl.load_data(config)
            rows = pl.evaluate_cells(config, test_set)
            print(pl.write_rows(config.paths.reports / "summary.csv", pl.SUMMARY_FIELDS, rows))
        elif cmd == "build-proxy":
            train_set, test_set = pl.load_data(config)
            pl.proxy(config, train_set, test_set)
            print(config.paths.reports / "proxy.csv")
        elif cmd == "tune":
            pl.tune(config, pl.load_proxy(config))
            print(config.paths.reports / "tune.csv")
        elif cmd == "run-controller":
            _run_controller(config, args)
        elif cmd == "baseline":
            _, test_set = pl.load_data(config)
            print(pl.digital_baselines(config, test_set))
        elif cmd == "export-masks":
            _export_masks(config, args)
    except (ConfigError, pl.InfeasibleConstraint):
        raise
    except Exception as exc:  # noqa: BLE001 - reported with the stage name
        raise pl.StageError(stage, exc) from exc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve(args)
        dispatch(config, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pl.InfeasibleConstraint as exc:
        print(f"infeasible constraint: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except pl.StageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
