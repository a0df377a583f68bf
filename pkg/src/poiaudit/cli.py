"""Command-line entry point: ``poiaudit <subcommand>``.

Exit status is 0 on success, 1 on a validation error (bad config, bad
input file) and 2 when a stage fails at runtime.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .data import DatasetError, PreprocessConfig, RecordFormat, dataset_stats, load_checkins, preprocess, synth_generate
from .defenses import DefenseError
from .extraction import LocExtractConfig, TrajExtractConfig
from .membership import ConfigError as MembershipConfigError
from .pipeline import (ATTACKS, MECHANISMS, PRESETS, SWEEP_AXES, ArtifactStore, ConfigError, DefenseSpec,
                       ExperimentConfig, PipelineError, atomic_write, output_dir, run_pipeline, stage_dataset,
                       stage_victim)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _base_config(args) -> ExperimentConfig:
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    if args.config:
        cfg = ExperimentConfig.load(args.config)
    elif args.preset:
        cfg = PRESETS[args.preset]()
    else:
        cfg = ExperimentConfig()
    changes = {}
    if args.seeds is not None:
        changes["n_seeds"] = args.seeds
        changes["seeds"] = None
    if args.output:
        changes["output_dir"] = args.output
    if args.workers is not None:
        changes["workers"] = args.workers
    if getattr(args, "dataset", None):
        changes["dataset"] = {"source": "dataset", "path": args.dataset}
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=1))


def _reports_json(reports) -> dict:
    return {k: {"mean": r.mean, "per_seed": {str(s): m for s, m in r.per_seed.items()}} for k, r in reports.items()}


# -- subcommands ----------------------------------------------------------


def cmd_synth(args) -> int:
    ds, truth = synth_generate(args.users, args.locations, args.days, args.seed)
    digest = ds.save(args.out)
    if args.truth:
        atomic_write(Path(args.truth), json.dumps({"most_common": truth.most_common}, indent=1))
    _emit({"dataset": str(args.out), "sha256": digest, "stats": list(dataset_stats(ds).as_row())})
    return EXIT_OK


def cmd_preprocess(args) -> int:
    fmt = RecordFormat(args.delimiter, args.time_format, args.header)
    cfg = PreprocessConfig(args.min_occurrence, split_ratio=tuple(args.split), seed=args.seed)
    ds = preprocess(load_checkins(args.input, fmt), cfg)
    digest = ds.save(args.out)
    _emit({"dataset": str(args.out), "sha256": digest, "stats": list(dataset_stats(ds).as_row())})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _base_config(args)
    if args.epochs:
        cfg = cfg.with_overrides(train=dataclasses.replace(cfg.train, epochs=args.epochs, snapshot_epochs=tuple(
            e for e in cfg.train.snapshot_epochs if e <= args.epochs)))
    store = ArtifactStore(output_dir(cfg))
    data = stage_dataset(cfg, store)
    out = {}
    for s in cfg.seed_list():
        v = stage_victim(cfg, s, data, store)
        out[str(s)] = {"checkpoint": str(store.path(f"seed_{s}", "victim.ckpt")), "final": v.log_rows[-1]}
    _emit(out)
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = _base_config(args)
    kind = args.kind
    if kind == "locextract":
        lc = cfg.locextract
        cfg = cfg.with_overrides(locextract=LocExtractConfig(
            args.q if args.q is not None else lc.query_budget, args.t if args.t is not None else lc.query_timestamp,
            args.k if args.k is not None else lc.top_k, args.voting or lc.voting, lc.aggregate, lc.seed))
    elif kind == "trajextract":
        tc = cfg.trajextract
        cfg = cfg.with_overrides(trajextract=TrajExtractConfig(
            args.beta if args.beta is not None else tc.beam_width, args.n if args.n is not None else tc.target_length,
            args.t if args.t is not None else tc.query_timestamp, tc.top_beta_out, tc.seed))
    elif kind == "locmia":
        m = cfg.locmia
        cfg = cfg.with_overrides(locmia=dataclasses.replace(
            m, n_shadow=args.shadows or m.n_shadow, n_t=args.nt or m.n_t, n_l=args.nl or m.n_l))
    else:
        cfg = cfg.with_overrides(trajmia=dataclasses.replace(cfg.trajmia, n_shadow=args.shadows or cfg.trajmia.n_shadow))
    cfg = cfg.with_overrides(attacks=(kind,))
    reports = run_pipeline(cfg, attacks=(kind,), defend=False)
    _emit(_reports_json({k: v for k, v in reports.items() if k in (kind, "victim")}))
    return EXIT_OK


def cmd_defend(args) -> int:
    cfg = _base_config(args)
    spec = DefenseSpec(args.mechanism, eps=args.eps, delta=args.delta, clip=args.clip, eps_g=args.eps_g,
                       radius=args.radius, protect=args.protect, attack=args.attack, epochs=args.epochs)
    cfg = cfg.with_overrides(defenses=(spec,), attacks=())
    reports = run_pipeline(cfg, attacks=(), defend=True)
    _emit(_reports_json({k: v for k, v in reports.items() if k == "defenses"}))
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _base_config(args).with_overrides(attacks=("trajmia",))
    run_pipeline(cfg, attacks=("trajmia",), defend=False)
    root = output_dir(cfg)
    _emit({str(s): str(root / f"seed_{s}" / "analysis_user_bins.csv") for s in cfg.seed_list()})
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .pipeline import ablation_sweep

    cfg = _base_config(args)
    values = [v for v in args.values.split(",") if v]
    if not values:
        raise ConfigError("--values needs at least one value")
    rows = ablation_sweep(cfg, args.axis, values, args.attack)
    print("\n".join(rows))
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _base_config(args)
    reports = run_pipeline(cfg)
    _emit(_reports_json(reports))
    return EXIT_OK


# -- parser ---------------------------------------------------------------


def _experiment_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--seeds", type=int, help="number of seeds (overrides the config)")
    p.add_argument("--output", help="output directory (default: $POIAUDIT_OUTPUT_DIR or the config value)")
    p.add_argument("--workers", type=int)
    p.add_argument("--dataset", help="use a saved dataset file instead of the configured source")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="poiaudit", description="Privacy audits of next-POI recommendation models")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic check-in dataset")
    p.add_argument("--users", type=int, default=200)
    p.add_argument("--locations", type=int, default=500)
    p.add_argument("--days", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--truth", help="also write the ground-truth most-common locations here")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("preprocess", help="filter, segment and split raw check-in records")
    p.add_argument("--input", required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--delimiter", default=",")
    p.add_argument("--time-format", default=None)
    p.add_argument("--header", action="store_true")
    p.add_argument("--min-occurrence", type=int, default=10)
    p.add_argument("--split", type=float, nargs=3, default=(0.8, 0.1, 0.1))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("train", help="train (or reuse) the victim model for each seed")
    _experiment_args(p)
    p.add_argument("--epochs", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("attack", help="run one attack against the victim")
    asub = p.add_subparsers(dest="kind", required=True)
    a = asub.add_parser("locextract")
    _experiment_args(a)
    a.add_argument("--q", type=int, help="query budget")
    a.add_argument("--t", type=float, help="query timestamp in [0, 1]")
    a.add_argument("--k", type=int, help="top-k returned")
    a.add_argument("--voting", choices=("soft", "hard"))
    a = asub.add_parser("trajextract")
    _experiment_args(a)
    a.add_argument("--beta", type=int, help="beam width")
    a.add_argument("--n", type=int, help="target trajectory length")
    a.add_argument("--t", type=float, help="query timestamp in [0, 1]")
    for kind in ("locmia", "trajmia"):
        a = asub.add_parser(kind)
        _experiment_args(a)
        a.add_argument("--shadows", type=int, help="N (2N shadow models are trained)")
        if kind == "locmia":
            a.add_argument("--nt", type=int)
            a.add_argument("--nl", type=int)
    for a in asub.choices.values():
        a.set_defaults(fn=cmd_attack)

    p = sub.add_parser("defend", help="train a defended model and measure utility and LocExtract ASR")
    _experiment_args(p)
    p.add_argument("--mechanism", choices=MECHANISMS, default="dpsgd")
    p.add_argument("--eps", type=float, default=5.0)
    p.add_argument("--delta", type=float, default=1e-3)
    p.add_argument("--clip", type=float, default=10.0)
    p.add_argument("--eps-g", type=float, default=0.01)
    p.add_argument("--radius", type=float, default=400.0)
    p.add_argument("--protect", default="all", help="all | targeted[:fraction]")
    p.add_argument("--attack", choices=ATTACKS, default="locextract")
    p.add_argument("--epochs", type=int)
    p.set_defaults(fn=cmd_defend)

    p = sub.add_parser("analyze", help="TrajMIA vulnerability by user aggregate statistics")
    _experiment_args(p)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("sweep", help="ablation over one attack or training parameter")
    _experiment_args(p)
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--attack", choices=ATTACKS)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("report", help="run every configured stage and write the summary report")
    _experiment_args(p)
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, MembershipConfigError, DatasetError, DefenseError, ValueError, FileNotFoundError) as exc:
        print(f"poiaudit: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except PipelineError as exc:
        print(f"poiaudit: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - last-resort runtime failure
        print(f"poiaudit: runtime failure: {exc!r}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
