"""Command line entry point: ``realitygap <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import adaptation, harness
from .config import load_plan
from .errors import RealityGapError
from .repository import Repository
from .rom import ReducedOrderSimulator

log = logging.getLogger("realitygap")


def _rom(plan, out: Path, path=None) -> ReducedOrderSimulator:
    path = Path(path) if path else out / "checkpoints" / "rom.npz"
    if path.exists():
        log.info("loading surrogate from %s", path)
        return ReducedOrderSimulator.load(path)
    log.info("no surrogate at %s, pre-training one", path)
    rom = harness.pretrain_shared_rom(plan)
    path.parent.mkdir(parents=True, exist_ok=True)
    rom.save(path)
    return rom


def cmd_pretrain_rom(args, plan) -> int:
    rom = harness.pretrain_shared_rom(plan)
    path = args.out / "checkpoints" / "rom.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    rom.save(path)
    print(f"surrogate saved to {path} (held-out RMSE {rom.holdout_rmse:.4f} mm, "
          f"{rom.dataset_size} samples)")
    return 0


def cmd_train(args, plan) -> int:
    rom = _rom(plan, args.out, args.rom)
    seed = plan.seeds[0] if args.seed is None else args.seed
    plan = plan.with_physics(not args.no_physics)
    sim = plan.simulator()
    data = harness.build_dataset(plan, seed)
    model, repo, report = harness.initial_state(plan, sim, rom, data)
    ckpt = args.out / "checkpoints" / f"model_seed{seed}"
    model.save(ckpt)
    adaptation.write_history_csv(model, args.out / f"history_{seed}.csv")
    repo.persist(args.out / f"repository_{seed}.jsonl")
    error, rg = harness.evaluate_model(model, sim, data)
    for entry in report.entries:
        print(f"{entry['query']}: {entry['response']} -> {entry['action']}")
    print(f"seed {seed}: test Error {error:.5f}, RG {rg:.5f} mm^2; model saved to {ckpt}")
    return 0


def cmd_run(args, plan) -> int:
    rom = _rom(plan, args.out, args.rom)
    seeds = sorted(plan.seeds) if args.seed is None else [args.seed]
    physics = not args.no_physics
    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in seeds:
        res = harness.run_seed(plan, seed, rom, physics, levels=(args.loi,), out_dir=args.out)
        rows += res.rows
        if args.loi in res.traces:
            harness.write_trace_csv(res.traces[args.loi], args.out / f"trace_{seed}.csv")
        r = res.rows[0]
        print(f"seed {seed} LoI {args.loi} physics={int(physics)}: Error {r['error']:.5f}, "
              f"RG {r['rg']:.5f}, AD {r['ad']}")
    path = args.out / "metrics.csv"
    harness.write_metrics_csv(rows, path)
    summary = harness.MetricReport(args.loi, physics, rows).summary()
    print(json.dumps({k: {"mean": v[0], "std": v[1]} for k, v in summary.items()}))
    print(f"metrics written to {path}")
    return 0


def cmd_report(args, plan) -> int:
    table = harness.report(args.metrics, args.out)
    print(table.read_text(), end="")
    return 0


def cmd_export(args, plan) -> int:
    repo = Repository.load(args.repository)
    args.out.mkdir(parents=True, exist_ok=True)
    repo.export_labeled_csv(args.out / "labeled_pairs.csv")
    repo.export_gaps_csv(args.out / "gap_history.csv")
    print(f"exported {repo.count()} labelled pairs and {len(repo.gap_history())} gap vectors")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="YAML configuration file")
    common.add_argument("--seed", type=int, default=None, help="run a single seed")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="realitygap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain-rom", parents=[common], help="pre-train and freeze the surrogate")
    p.set_defaults(func=cmd_pretrain_rom)

    p = sub.add_parser("train", parents=[common], help="initial domain-adversarial training")
    p.add_argument("--no-physics", action="store_true", help="disable the physics loss")
    p.add_argument("--rom", type=Path, default=None, help="surrogate checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", parents=[common], help="run one level of integration over the seeds")
    p.add_argument("--loi", choices=harness.LEVELS, required=True)
    p.add_argument("--no-physics", action="store_true", help="disable the physics loss")
    p.add_argument("--rom", type=Path, default=None, help="surrogate checkpoint")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", parents=[common], help="merge metrics files into a table")
    p.add_argument("metrics", nargs="+", type=Path, help="metrics.csv files")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("export", parents=[common], help="CSV views of a repository file")
    p.add_argument("repository", type=Path)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        plan = load_plan(args.config)
        return args.func(args, plan)
    except (RealityGapError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
