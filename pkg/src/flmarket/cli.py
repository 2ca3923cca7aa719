"""Command-line entry point: select, contract, train, scenario, compare."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import config as config_mod
from . import he
from .config import ConfigError, ScenarioConfig
from .market import ParameterError
from .data import DataError
from .fl import TrainingError, run_training, write_trace
from .scenario import (EQUILIBRIUM_FILE, PER_TYPE_FILE, NonConvergenceError, csv_bytes,
                       contract_split, conv_fl_split, load_dataset, partition_non_iid,
                       per_type_rows, run_scenario, select_users, solve_contracts,
                       straggler_from_config, summarize_bundle, train_config)
from .selection import write_roster

OUT_ENV = "FLMARKET_OUT"
EXIT_OK, EXIT_VALIDATION, EXIT_NONCONVERGENCE = 0, 2, 3


def _out_dir(args) -> Path:
    path = Path(args.out or os.environ.get(OUT_ENV) or "flmarket-out")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_config(args) -> ScenarioConfig:
    cfg = config_mod.load(args.config) if args.config else ScenarioConfig()
    if args.arm:
        args.set = list(args.set or []) + [f"arms={json.dumps(args.arm)}"]
    return config_mod.apply_overrides(cfg, args.set or [])


def cmd_select(args) -> int:
    cfg = _load_config(args)
    chosen = select_users(cfg)
    out = _out_dir(args) / "selected.csv"
    write_roster(out, chosen)
    print(" ".join(str(c.id) for c in chosen))
    return EXIT_OK


def cmd_contract(args) -> int:
    cfg = _load_config(args)
    outcome = solve_contracts(cfg, tuple(a for a in cfg.arms if a != "conv-fl"))
    out = _out_dir(args)
    (out / EQUILIBRIUM_FILE).write_text(json.dumps(outcome.equilibrium, indent=2, sort_keys=True) + "\n")
    (out / PER_TYPE_FILE).write_bytes(csv_bytes(per_type_rows(cfg, outcome)))
    print(json.dumps({"sweeps": outcome.iterations, "converged": outcome.converged,
                      "checks": outcome.checks}))
    return EXIT_OK if outcome.converged else EXIT_NONCONVERGENCE


def cmd_train(args) -> int:
    cfg = _load_config(args)
    arm = cfg.arms[0] if args.arm else "proposed"
    outcome = solve_contracts(cfg, (arm,) if arm in ("baseline", "info-symmetry") else ())
    ds = load_dataset(cfg)
    plan = partition_non_iid(ds, len(outcome.profiles))
    split = contract_split(ds, plan, outcome, "proposed", cfg.realized_type)
    quorum = 0
    if arm == "conv-fl":
        split, quorum = conv_fl_split(ds, plan, split), cfg.conv_fl.quorum
    elif arm != "proposed":
        split = contract_split(ds, plan, outcome, arm, cfg.realized_type)
    result = run_training(train_config(cfg, quorum), split, straggler_from_config(cfg),
                          [p.id for p in outcome.profiles])
    out = _out_dir(args)
    write_trace(out / f"trace_{arm}.csv", result.rows)
    (out / f"model_{arm}.bin").write_bytes(he.to_bytes(result.checkpoint))
    print(json.dumps({"arm": arm, "rounds": len(result.rows), "final_loss": result.final_loss}))
    return EXIT_OK if outcome.converged else EXIT_NONCONVERGENCE


def cmd_scenario(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    try:
        bundle = run_scenario(cfg, out)
    except NonConvergenceError as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    print(json.dumps({"out": str(out), "arms": list(cfg.arms),
                      "final_loss": bundle.summary.get("final_loss")}))
    return EXIT_OK


def cmd_compare(args) -> int:
    bundle_dir = Path(args.bundle or os.environ.get(OUT_ENV) or "flmarket-out")
    summary = summarize_bundle(bundle_dir)
    print(f"contract sweeps: {summary.get('contract_sweeps')}")
    for row in summary.get("proposed_vs_baseline", []):
        print(f"type {row['type_index']}: welfare delta vs baseline {row['welfare_delta']:.6g}")
    for row in summary.get("welfare_gap_vs_info_symmetry", []):
        print(f"type {row['type_index']}: relative welfare gap vs info-symmetry "
              f"{row['relative_gap']:.6g}")
    for arm, ratio in summary.get("loss_ratio_vs_conv_fl", {}).items():
        print(f"{arm}: final loss / conv-fl = {ratio:.6g}")
    if args.json:
        print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flmarket", description=(
        "Contract-driven federated learning market simulator. Encryption is an "
        f"{he.BACKEND_LABEL} backend with no confidentiality."))
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML scenario config (defaults used when omitted)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted override, e.g. training.lr=0.02 (repeatable; wins over the file)")
        p.add_argument("--out", help=f"output directory (else ${OUT_ENV}, else ./flmarket-out)")
        p.add_argument("--arm", action="append", choices=config_mod.ARMS,
                       help="restrict to these arms (repeatable)")

    for name, fn, text in (("select", cmd_select, "score candidates and pick the top users"),
                           ("contract", cmd_contract, "solve the contract equilibrium"),
                           ("train", cmd_train, "train one arm (first --arm, default proposed)"),
                           ("scenario", cmd_scenario, "run every arm and write the bundle")):
        p = sub.add_parser(name, help=text)
        common(p)
        p.set_defaults(func=fn)
    p = sub.add_parser("compare", help="summarize a scenario bundle")
    p.add_argument("bundle", nargs="?", help=f"bundle directory (else ${OUT_ENV})")
    p.add_argument("--json", action="store_true", help="also print the full summary as JSON")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParameterError, DataError, TrainingError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
