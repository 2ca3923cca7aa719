"""End-to-end scenarios: selection, contracts, data split and training per arm."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, he
from .config import ConfigError, ScenarioConfig, config_hash, to_dict
from .contracts import (SolverConfig, baseline_proportional, check_capacity, check_monotonicity,
                        iterate_contracts, solve_eta_all, solve_info_symmetry, verify_ic, verify_ir)
from .data import (ContractSplit, Dataset, PartitionPlan, apply_contract_split, load_csv,
                   partition_non_iid, synth_dataset)
from .fl import OptimizerConfig, StragglerModel, TrainConfig, TrainingResult, run_training, trace_text
from .market import (ContractBook, MapTypeProfile, MuProfile, PricingParams, map_utility,
                     mu_total_actual_utility, social_welfare)
from .selection import SelectionWeights, generate_candidates, load_roster, select_top_n

CONTRACT_ARMS = ("proposed", "baseline", "info-symmetry")
PER_TYPE_FILE = "per_type.csv"
EQUILIBRIUM_FILE = "equilibrium.json"
MANIFEST_FILE = "manifest.json"
SUMMARY_FILE = "summary.json"


class NonConvergenceError(RuntimeError):
    """The contract iteration or the training run did not converge."""


# ---------------------------------------------------------------------------
# building blocks


def market_from_config(cfg: ScenarioConfig) -> tuple[MapTypeProfile, PricingParams]:
    m = cfg.market
    prior = m.prior if m.prior is not None else [1.0 / len(m.types)] * len(m.types)
    types = MapTypeProfile(tuple(m.types), tuple(prior), m.d_max_enc)
    return types, PricingParams(**to_dict(cfg)["pricing"])


def candidates_from_config(cfg: ScenarioConfig) -> list[MuProfile]:
    u = cfg.users
    if u.roster is not None:
        return load_roster(u.roster)
    return generate_candidates(cfg.seed, u.n_candidates, tuple(u.d_total), tuple(u.local_cap_frac),
                               tuple(u.eps_priv), tuple(u.compute), tuple(u.rate), a_fn=u.a_fn,
                               zeta=u.zeta, cycles_per_sample=u.cycles_per_sample, freq=u.freq)


def select_users(cfg: ScenarioConfig) -> list[MuProfile]:
    """Selected users in ascending id order (their positions in every book)."""
    cands = candidates_from_config(cfg)
    u = cfg.users
    if u.n_select > len(cands):
        raise ConfigError(f"users.n_select ({u.n_select}) exceeds the {len(cands)} candidates")
    ids = set(select_top_n(cands, SelectionWeights(u.w_data, u.w_compute, u.w_rate), u.n_select))
    return sorted((c for c in cands if c.id in ids), key=lambda c: c.id)


def solver_from_config(cfg: ScenarioConfig) -> SolverConfig:
    s = cfg.solver
    return SolverConfig(sigma=s.sigma, grid_step=s.grid_step, max_iters=s.max_iters, seed=cfg.seed,
                        local_upward=s.local_upward)


@dataclass
class ContractOutcome:
    profiles: list[MuProfile]
    types: MapTypeProfile
    pricing: PricingParams
    books: dict[str, ContractBook]
    etas: dict[str, np.ndarray]
    iterations: int
    converged: bool
    checks: dict[str, bool]
    equilibrium: dict


def solve_contracts(cfg: ScenarioConfig, arms=CONTRACT_ARMS) -> ContractOutcome:
    """Proposed equilibrium plus the requested comparator books.

    Info-symmetry needs one book per realized type; ``books['info-symmetry']``
    holds the book for ``cfg.realized_type`` and the per-type table uses the
    book of each row's type.
    """
    types, pricing = market_from_config(cfg)
    profiles = select_users(cfg)
    res = iterate_contracts(profiles, types, pricing, solver_from_config(cfg))
    books = {"proposed": res.book}
    etas = {"proposed": res.eta}
    if "baseline" in arms:
        books["baseline"] = baseline_proportional(profiles, types, pricing)
        etas["baseline"] = solve_eta_all(books["baseline"], types, pricing)
    if "info-symmetry" in arms:
        books["info-symmetry"] = solve_info_symmetry(cfg.realized_type, profiles, types, pricing,
                                                     solver_from_config(cfg))
        etas["info-symmetry"] = solve_eta_all(books["info-symmetry"], types, pricing)
    _, ic_ok = verify_ic(res.book, res.eta, types, pricing)
    checks = {
        "ir": bool(verify_ir(res.book, res.eta, types, pricing)),
        "ic": bool(ic_ok),
        "monotone": bool(check_monotonicity(res.book)),
        "capacity": bool(check_capacity(res.book, res.eta, profiles, types)),
    }
    eq = res.to_dict()
    eq.update({"mu_ids": [p.id for p in profiles], "types": list(types.types),
               "checks": checks, "backend": he.BACKEND_LABEL})
    return ContractOutcome(profiles, types, pricing, books, etas, res.iterations, res.converged,
                           checks, eq)


def per_type_rows(cfg: ScenarioConfig, outcome: ContractOutcome) -> list[dict]:
    """MAP utility, total user utility and welfare for every type and contract arm."""
    types, pricing, profiles = outcome.types, outcome.pricing, outcome.profiles
    sym_books = {}
    rows = []
    for i, value in enumerate(types.types):
        row = {"type_index": i, "type_value": value}
        for arm in CONTRACT_ARMS:
            if arm not in outcome.books:
                continue
            if arm == "info-symmetry":
                if i not in sym_books:
                    sym_books[i] = (outcome.books[arm] if i == cfg.realized_type else
                                    solve_info_symmetry(i, profiles, types, pricing,
                                                        solver_from_config(cfg)))
                book = sym_books[i]
                eta = solve_eta_all(book, types, pricing)
            else:
                book, eta = outcome.books[arm], outcome.etas[arm]
            key = arm.replace("-", "_")
            row[f"map_utility_{key}"] = map_utility(i, eta, book, types, pricing)
            row[f"mu_utility_{key}"] = mu_total_actual_utility(i, book, eta, profiles, pricing)
            row[f"welfare_{key}"] = social_welfare(i, eta, book, profiles, types, pricing)
        rows.append(row)
    return rows


def load_dataset(cfg: ScenarioConfig) -> Dataset:
    if cfg.data.csv is not None:
        return load_csv(cfg.data.csv)
    ds, _ = synth_dataset(cfg.seed, cfg.data.n_samples, cfg.data.d, cfg.data.k, cfg.data.noise_sigma)
    return ds


def contract_split(ds: Dataset, plan: PartitionPlan, outcome: ContractOutcome, arm: str,
                   realized_type: int) -> ContractSplit:
    """Map contract sample counts onto dataset rows, one block per user."""
    unit = np.array([plan.block_size(n) / p.d_total for n, p in enumerate(outcome.profiles)])
    return apply_contract_split(ds, plan, outcome.books[arm], realized_type, outcome.etas[arm], unit)


def conv_fl_split(ds: Dataset, plan: PartitionPlan, proposed: ContractSplit) -> ContractSplit:
    """Every row the user would contribute under the proposed contract stays local."""
    locals_, encs = [], []
    d, k = ds.features.shape[1], ds.labels.shape[1]
    for n in range(len(plan.bounds)):
        used = proposed.plan.encrypted_count[n] + proposed.plan.local_count[n]
        locals_.append(ds.take(plan.block(n)[:used]))
        encs.append(Dataset.empty(d, k))
    counts = [len(x.features) for x in locals_]
    out = PartitionPlan(plan.order, list(plan.bounds), [0] * len(counts), counts)
    return ContractSplit(locals_, encs, out, [])


def train_config(cfg: ScenarioConfig, quorum: int = 0) -> TrainConfig:
    t = cfg.training
    return TrainConfig(rounds=t.rounds, optimizer=OptimizerConfig(t.optimizer, t.lr, t.lr_decay),
                       local_iters=t.local_iters, seed=cfg.seed, tol=t.tol, patience=t.patience,
                       quorum=quorum, key_seed=cfg.seed)


def straggler_from_config(cfg: ScenarioConfig) -> StragglerModel:
    return StragglerModel(cfg.straggler.mode, cfg.straggler.value)


# ---------------------------------------------------------------------------
# output


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def csv_bytes(rows: list[dict]) -> bytes:
    buf = io.StringIO()
    if rows:
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(list(rows[0]))
        for r in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in r.values()])
    return buf.getvalue().encode()


def _trace_bytes(result: TrainingResult) -> bytes:
    return trace_text(result.rows).encode()


@dataclass
class Bundle:
    out_dir: Path
    manifest: dict
    equilibrium: dict | None = None
    per_type: list[dict] = field(default_factory=list)
    results: dict[str, TrainingResult] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)


def run_scenario(cfg: ScenarioConfig, out_dir) -> Bundle:
    """Run every requested arm and write the artifact bundle into ``out_dir``.

    Raises NonConvergenceError after writing the bundle if the contract
    iteration hit its sweep limit or a training loss became non-finite.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files: dict[str, bytes] = {}
    contract_arms = tuple(a for a in CONTRACT_ARMS if a in cfg.arms)
    outcome = solve_contracts(cfg, contract_arms)
    files[EQUILIBRIUM_FILE] = _json_bytes(outcome.equilibrium)
    table = per_type_rows(cfg, outcome) if contract_arms else []
    if table:
        files[PER_TYPE_FILE] = csv_bytes(table)

    ds = load_dataset(cfg)
    plan = partition_non_iid(ds, len(outcome.profiles))
    ids = [p.id for p in outcome.profiles]
    proposed_split = contract_split(ds, plan, outcome, "proposed", cfg.realized_type)
    straggler = straggler_from_config(cfg)
    results, split_info = {}, {}
    for arm in cfg.arms:
        if arm == "conv-fl":
            split = conv_fl_split(ds, plan, proposed_split)
            tcfg = train_config(cfg, cfg.conv_fl.quorum)
        else:
            split = proposed_split if arm == "proposed" else contract_split(
                ds, plan, outcome, arm, cfg.realized_type)
            tcfg = train_config(cfg)
        result = run_training(tcfg, split, straggler, ids)
        results[arm] = result
        split_info[arm] = {"encrypted_rows": split.plan.encrypted_count,
                           "local_rows": split.plan.local_count, "warnings": split.warnings}
        files[f"trace_{arm}.csv"] = _trace_bytes(result)
        files[f"model_{arm}.bin"] = he.to_bytes(result.checkpoint)

    bundle = Bundle(out, {}, outcome.equilibrium, table, results)
    bundle.summary = compare_arms(bundle, outcome)
    files[SUMMARY_FILE] = _json_bytes(bundle.summary)
    for name, blob in files.items():
        _atomic_write(out / name, blob)
    manifest = {
        "package_version": __version__,
        "backend": he.BACKEND_LABEL,
        "config_hash": config_hash(cfg),
        "config": to_dict(cfg),
        "seed": cfg.seed,
        "realized_type": cfg.realized_type,
        "arms": list(cfg.arms),
        "mu_ids": ids,
        "contract_converged": outcome.converged,
        "contract_sweeps": outcome.iterations,
        "splits": split_info,
        "files": {name: hashlib.sha256(blob).hexdigest() for name, blob in sorted(files.items())},
    }
    bundle.manifest = manifest
    _atomic_write(out / MANIFEST_FILE, _json_bytes(manifest))
    if not outcome.converged:
        raise NonConvergenceError(f"contract iteration did not converge in {outcome.iterations} sweeps")
    bad = [arm for arm, r in results.items() if not np.isfinite(r.final_loss)]
    if bad:
        raise NonConvergenceError(f"training diverged for arms {bad}")
    return bundle


def compare_arms(bundle: Bundle, outcome: ContractOutcome | None = None) -> dict:
    """Utility deltas, welfare gap to info-symmetry, loss ratios to conv-fl, sweeps."""
    summary: dict = {}
    table = bundle.per_type
    if table:
        deltas = []
        for r in table:
            if "welfare_baseline" in r:
                deltas.append({
                    "type_index": r["type_index"],
                    "map_utility_delta": r["map_utility_proposed"] - r["map_utility_baseline"],
                    "mu_utility_delta": r["mu_utility_proposed"] - r["mu_utility_baseline"],
                    "welfare_delta": r["welfare_proposed"] - r["welfare_baseline"],
                })
        if deltas:
            summary["proposed_vs_baseline"] = deltas
        gaps = []
        for r in table:
            if "welfare_info_symmetry" in r:
                ref = r["welfare_info_symmetry"]
                gap = ref - r["welfare_proposed"]
                gaps.append({"type_index": r["type_index"], "welfare_gap": gap,
                             "relative_gap": gap / abs(ref) if ref else 0.0})
        if gaps:
            summary["welfare_gap_vs_info_symmetry"] = gaps
    if bundle.results:
        finals = {arm: r.final_loss for arm, r in bundle.results.items()}
        summary["final_loss"] = finals
        if "conv-fl" in finals and finals["conv-fl"] > 0:
            summary["loss_ratio_vs_conv_fl"] = {arm: v / finals["conv-fl"] for arm, v in finals.items()}
    if outcome is not None:
        summary["contract_sweeps"] = outcome.iterations
    elif bundle.equilibrium is not None:
        summary["contract_sweeps"] = bundle.equilibrium.get("iterations")
    return summary


def load_bundle(out_dir) -> Bundle:
    """Re-read a bundle directory written by ``run_scenario``."""
    out = Path(out_dir)
    manifest = json.loads((out / MANIFEST_FILE).read_text())
    eq_path = out / EQUILIBRIUM_FILE
    equilibrium = json.loads(eq_path.read_text()) if eq_path.exists() else None
    table = []
    pt = out / PER_TYPE_FILE
    if pt.exists():
        with pt.open(newline="") as fh:
            for r in csv.DictReader(fh):
                table.append({k: (int(v) if k == "type_index" else float(v)) for k, v in r.items()})
    bundle = Bundle(out, manifest, equilibrium, table)
    summary_path = out / SUMMARY_FILE
    if summary_path.exists():
        stored = json.loads(summary_path.read_text())
        if "final_loss" in stored:
            bundle.summary["final_loss"] = stored["final_loss"]
    return bundle


def summarize_bundle(out_dir) -> dict:
    """``compare_arms`` over a bundle on disk; final losses come from the stored summary."""
    bundle = load_bundle(out_dir)
    summary = compare_arms(bundle)
    finals = bundle.summary.get("final_loss")
    if finals:
        summary["final_loss"] = finals
        if finals.get("conv-fl"):
            summary["loss_ratio_vs_conv_fl"] = {a: v / finals["conv-fl"] for a, v in finals.items()}
    return summary
