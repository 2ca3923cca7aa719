import json

import numpy as np
import pytest
import yaml

from flmarket import config as config_mod
from flmarket import he
from flmarket.cli import main
from flmarket.config import ConfigError, ScenarioConfig
from flmarket.scenario import (MANIFEST_FILE, NonConvergenceError, Bundle, compare_arms,
                               load_bundle, run_scenario, summarize_bundle)

FAST = ["training.rounds=30", "data.n_samples=1000", "users.n_candidates=30"]


def _fast(*extra):
    return config_mod.apply_overrides(ScenarioConfig(), FAST + list(extra))


# ---------------------------------------------------------------------------
# config

def test_defaults_match_experiment_constants():
    cfg = ScenarioConfig()
    assert cfg.market.types == [float(t) for t in range(1, 11)] and cfg.market.prior is None
    assert cfg.market.d_max_enc == 5e5
    p = cfg.pricing
    assert (p.upsilon_enc, p.upsilon_local, p.alpha_enc, p.alpha_local) == (0.125, 3.0, 0.001, 0.005)
    assert (p.beta_priv, p.gamma_tx) == (1.0, 1e-4)
    u = cfg.users
    assert (u.zeta, u.freq, u.cycles_per_sample) == (0.5e-26, 2e9, 44880.0)
    assert u.rate[0] <= 293e6 <= u.rate[1]
    assert cfg.training.optimizer == "adam" and cfg.training.lr == 0.01
    assert cfg.data.d == 8 and cfg.data.n_samples == 5000 and cfg.data.noise_sigma == 0.1
    config_mod.validate(cfg)


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown keys"):
        config_mod.loads("seed: 1\nbogus: 2\n")
    with pytest.raises(ConfigError, match="pricing"):
        config_mod.loads("pricing:\n  alpha: 1\n")
    with pytest.raises(ConfigError):
        config_mod.loads("training:\n  rounds: many\n")
    with pytest.raises(ConfigError):
        config_mod.loads("seed: [1\n")


def test_round_trip_idempotent():
    cfg = config_mod.loads("seed: 3\nmarket:\n  prior: [0.5, 0.5]\n  types: [1, 2]\nrealized_type: 1\n")
    once = config_mod.dumps(cfg)
    assert config_mod.dumps(config_mod.loads(once)) == once
    assert config_mod.loads(once) == cfg
    assert config_mod.config_hash(config_mod.loads(once)) == config_mod.config_hash(cfg)


def test_overrides_win_over_file(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("training:\n  lr: 0.5\n  rounds: 7\n")
    cfg = config_mod.apply_overrides(config_mod.load(path), ["training.lr=0.02", "arms=[conv-fl]"])
    assert cfg.training.lr == 0.02 and cfg.training.rounds == 7 and cfg.arms == ["conv-fl"]
    for bad in ("training.nope=1", "nosection.x=1", "novalue"):
        with pytest.raises(ConfigError):
            config_mod.apply_overrides(cfg, [bad])


@pytest.mark.parametrize("override", [
    "users.n_select=200", "users.n_select=0", "market.types=[2, 1]", "realized_type=10",
    "market.prior=[0.5, 0.5]", "arms=[proposed, proposed]", "arms=[fancy]",
    "training.optimizer=lbfgs", "straggler.value=1.5", "straggler.mode=fixed",
    "users.w_data=0.9", "conv_fl.quorum=11", "solver.grid_step=0", "users.eps_priv=[0.1, 2.0]",
])
def test_infeasible_configs_fail_validation(override):
    with pytest.raises(ConfigError):
        config_mod.apply_overrides(ScenarioConfig(), [override])


def test_hash_tracks_content():
    a = config_mod.config_hash(ScenarioConfig())
    assert a == config_mod.config_hash(ScenarioConfig())
    assert a != config_mod.config_hash(_fast())


# ---------------------------------------------------------------------------
# scenario

@pytest.fixture(scope="module")
def fast_bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("bundle")
    return run_scenario(_fast(), out)


def test_bundle_has_all_arms(fast_bundle):
    out = fast_bundle.out_dir
    names = {p.name for p in out.iterdir()}
    expected = {"equilibrium.json", "per_type.csv", "summary.json", MANIFEST_FILE}
    for arm in config_mod.ARMS:
        expected |= {f"trace_{arm}.csv", f"model_{arm}.bin"}
    assert names == expected
    manifest = json.loads((out / MANIFEST_FILE).read_text())
    assert manifest["backend"] == he.BACKEND_LABEL
    assert manifest["config_hash"] == config_mod.config_hash(_fast())
    assert manifest["seed"] == 0 and manifest["arms"] == list(config_mod.ARMS)
    for arm in config_mod.ARMS:
        ct = he.from_bytes((out / f"model_{arm}.bin").read_bytes())
        assert ct.shape == (8, 1)


def test_bundle_contract_checks(fast_bundle):
    eq = fast_bundle.equilibrium
    assert eq["converged"] and all(eq["checks"].values())


def test_same_seed_byte_identical(fast_bundle, tmp_path):
    run_scenario(_fast(), tmp_path)
    for p in fast_bundle.out_dir.iterdir():
        assert (tmp_path / p.name).read_bytes() == p.read_bytes(), p.name


def test_single_arm_bundle(tmp_path):
    run_scenario(_fast("arms=[conv-fl]"), tmp_path)
    names = {p.name for p in tmp_path.iterdir()}
    assert {"trace_conv-fl.csv", "model_conv-fl.bin"} <= names
    assert not any(n.startswith("trace_") and n != "trace_conv-fl.csv" for n in names)
    assert "per_type.csv" not in names


def test_compare_directions_on_defaults(fast_bundle):
    s = summarize_bundle(fast_bundle.out_dir)
    assert all(r["welfare_delta"] >= -1e-9 for r in s["proposed_vs_baseline"])
    assert all(r["welfare_gap"] >= -1e-9 for r in s["welfare_gap_vs_info_symmetry"])
    assert s["contract_sweeps"] == fast_bundle.equilibrium["iterations"]
    assert s["loss_ratio_vs_conv_fl"]["conv-fl"] == 1.0
    assert s == json.loads(json.dumps(compare_arms(fast_bundle)))


def test_compare_identical_arms_gives_zero_deltas():
    row = {"type_index": 0}
    for arm in ("proposed", "baseline", "info_symmetry"):
        row |= {f"map_utility_{arm}": 1.5, f"mu_utility_{arm}": 2.0, f"welfare_{arm}": 3.5}
    s = compare_arms(Bundle(None, {}, None, [row]))
    d = s["proposed_vs_baseline"][0]
    assert d["map_utility_delta"] == d["mu_utility_delta"] == d["welfare_delta"] == 0.0
    assert s["welfare_gap_vs_info_symmetry"][0]["relative_gap"] == 0.0


def test_load_bundle_round_trip(fast_bundle):
    b = load_bundle(fast_bundle.out_dir)
    assert b.per_type == pytest.approx(fast_bundle.per_type)
    assert b.summary["final_loss"] == pytest.approx(fast_bundle.summary["final_loss"])


def test_non_convergence_raises_after_writing(tmp_path):
    with pytest.raises(NonConvergenceError):
        run_scenario(_fast("solver.max_iters=1", "arms=[proposed]"), tmp_path)
    assert (tmp_path / MANIFEST_FILE).exists()


# ---------------------------------------------------------------------------
# cli

def test_cli_scenario_and_compare(tmp_path, capsys):
    out = tmp_path / "run"
    args = [a for s in FAST for a in ("--set", s)]
    assert main(["scenario", "--out", str(out), *args]) == 0
    assert (out / "trace_proposed.csv").exists()
    capsys.readouterr()
    assert main(["compare", str(out)]) == 0
    text = capsys.readouterr().out
    assert "welfare delta vs baseline" in text and "final loss / conv-fl" in text


def test_cli_env_output_dir(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("FLMARKET_OUT", str(tmp_path / "env"))
    assert main(["select", "--set", "users.n_candidates=20", "--set", "users.n_select=3",
                 "--set", "conv_fl.quorum=3"]) == 0
    ids = capsys.readouterr().out.split()
    assert len(ids) == 3
    assert (tmp_path / "env" / "selected.csv").exists()


def test_cli_validation_exit_code(tmp_path, capsys):
    assert main(["scenario", "--out", str(tmp_path), "--set", "users.n_select=200"]) == 2
    assert "n_select" in capsys.readouterr().err
    assert not any(tmp_path.iterdir())
    assert main(["train", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path)]) == 2


def test_cli_non_convergence_exit_code(tmp_path):
    assert main(["contract", "--out", str(tmp_path), "--set", "solver.max_iters=1",
                 "--set", "users.n_candidates=20"]) == 3
    assert main(["scenario", "--out", str(tmp_path), "--set", "solver.max_iters=1",
                 "--arm", "proposed", *[a for s in FAST for a in ("--set", s)]]) == 3


def test_cli_train_single_arm(tmp_path, capsys):
    assert main(["train", "--arm", "conv-fl", "--out", str(tmp_path),
                 *[a for s in FAST for a in ("--set", s)]]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["arm"] == "conv-fl" and np.isfinite(info["final_loss"])
    assert (tmp_path / "trace_conv-fl.csv").exists()


def test_cli_contract_writes_equilibrium(tmp_path, capsys):
    assert main(["contract", "--out", str(tmp_path), "--set", "users.n_candidates=20"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["converged"] and all(info["checks"].values())
    assert yaml.safe_load((tmp_path / "equilibrium.json").read_text())["converged"]
