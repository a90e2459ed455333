import csv
import json

import numpy as np
import pytest

from dmpcqp.cli import (ExperimentConfig, compare_runs, load_network, main,
                        run_experiment, sample_initial_states, save_network)

from conftest import random_network


CSV_FILES = ("iterations.csv", "communication.csv", "trajectories.csv",
             "deviation.csv", "summary.csv")


def _small_cfg(out_dir, **overrides):
    base = dict(scenario="chain", n_masses=3, horizon=5, steps=3, n_inits=2,
                seed=7, solver="asm-dcg", out_dir=str(out_dir))
    base.update(overrides)
    return ExperimentConfig(**base)


def test_rerun_is_byte_identical(tmp_path):
    run_experiment(_small_cfg(tmp_path / "a"))
    run_experiment(_small_cfg(tmp_path / "b"))
    for name in CSV_FILES:
        assert (tmp_path / "a" / name).read_bytes() == \
               (tmp_path / "b" / name).read_bytes(), name
    metas = []
    for d in ("a", "b"):
        meta = json.loads((tmp_path / d / "meta.json").read_text())
        meta["config"].pop("out_dir")
        metas.append(meta)
    assert metas[0] == metas[1]


def test_compare_identical_runs(tmp_path):
    run_experiment(_small_cfg(tmp_path / "a"))
    run_experiment(_small_cfg(tmp_path / "b"))
    cmp = compare_runs(tmp_path / "a", tmp_path / "b")
    assert cmp.max_trajectory_diff == 0.0
    assert cmp.metrics["asm_iterations"]["a"] == \
           cmp.metrics["asm_iterations"]["b"]


def test_compare_rejects_scenario_mismatch(tmp_path):
    run_experiment(_small_cfg(tmp_path / "a"))
    run_experiment(_small_cfg(tmp_path / "b", seed=8))
    with pytest.raises(ValueError, match="seed"):
        compare_runs(tmp_path / "a", tmp_path / "b")


def test_meta_contents(tmp_path):
    run_experiment(_small_cfg(tmp_path / "r"))
    meta = json.loads((tmp_path / "r" / "meta.json").read_text())
    # 3-mass chain at horizon 5: two end agents (27 vars) plus one interior
    # (37), six equality rows per stage and agent, ten bound rows per agent,
    # four directed edges carrying ten coupling rows each
    assert meta["dims"] == {"n_z": 91, "eq": 36, "ineq": 30, "coupling": 40}
    assert meta["prng"]["bit_generator"] == "PCG64"
    assert meta["config"]["solver"] == "asm-dcg"
    assert meta["failures"] == 0
    assert meta["aggregates"]["deviation"]["max"] < 1e-6


def test_single_step_run_has_empty_aggregates(tmp_path):
    res = run_experiment(_small_cfg(tmp_path / "r", steps=1))
    assert res.aggregates == {}
    with open(tmp_path / "r" / "summary.csv", newline="") as fh:
        assert list(csv.DictReader(fh)) == []


def test_centralized_solver_has_zero_deviation(tmp_path):
    run_experiment(_small_cfg(tmp_path / "r", solver="centralized"))
    with open(tmp_path / "r" / "deviation.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(float(r["deviation"]) == 0.0 for r in rows)


def test_admm_solver_runs(tmp_path):
    res = run_experiment(_small_cfg(tmp_path / "r", solver="admm2", rho=5.0,
                                    steps=2, n_inits=1))
    assert res.failures == 0
    assert res.records[0].admm_iterations > 0
    for rec in res.records:
        assert rec.deviation < 1e-3


def test_network_json_roundtrip(tmp_path):
    rng = np.random.default_rng(41)
    net = random_network(rng)
    path = tmp_path / "net.json"
    save_network(net, path)
    loaded = load_network(path)
    assert loaded.n_agents == net.n_agents
    for a, b in zip(net.agents, loaded.agents):
        np.testing.assert_array_equal(a.A_self, b.A_self)
        np.testing.assert_array_equal(a.B, b.B)
        assert sorted(a.A_in) == sorted(b.A_in)
        for j in a.A_in:
            np.testing.assert_array_equal(a.A_in[j], b.A_in[j])
        np.testing.assert_array_equal(a.Q, b.Q)
        np.testing.assert_array_equal(a.u_lo, b.u_lo)


def test_file_scenario(tmp_path):
    rng = np.random.default_rng(43)
    net = random_network(rng)
    path = tmp_path / "net.json"
    save_network(net, path)
    res = run_experiment(_small_cfg(
        tmp_path / "r", scenario="file", network_file=str(path),
        steps=2, n_inits=1))
    assert res.failures == 0
    for rec in res.records:
        assert rec.deviation < 1e-6


def test_config_validation():
    with pytest.raises(ValueError, match="network file"):
        ExperimentConfig(scenario="file").validate()
    with pytest.raises(ValueError, match="solver"):
        ExperimentConfig(solver="magic").validate()
    with pytest.raises(ValueError, match="positive"):
        ExperimentConfig(steps=0).validate()
    with pytest.raises(ValueError, match="rho"):
        ExperimentConfig(rho=0.0).validate()


def test_initial_state_sampling_ranges():
    rng = np.random.default_rng(47)
    net = random_network(rng, n_agents=4, max_state=2)
    draws = [sample_initial_states(net, rng, 2.0, 0.25) for _ in range(200)]
    for i, agent in enumerate(net.agents):
        first = np.array([d[i][0] for d in draws])
        assert np.abs(first).max() <= 2.0
        assert np.abs(first).max() > 0.25          # actually uses the range
        if agent.n > 1:
            second = np.array([d[i][1] for d in draws])
            assert np.abs(second).max() <= 0.25


def test_cli_run_and_compare_exit_codes(tmp_path, capsys):
    argv = ["run", "--masses", "3", "--horizon", "5", "--steps", "2",
            "--inits", "1", "--seed", "3", "--out", str(tmp_path / "a")]
    assert main(argv) == 0
    assert main(argv[:-1] + [str(tmp_path / "b")]) == 0
    out = capsys.readouterr().out
    assert "asm_iterations" in out
    assert main(["compare", str(tmp_path / "a"), str(tmp_path / "b")]) == 0
    assert "max trajectory difference" in capsys.readouterr().out
    # configuration errors exit with 2
    assert main(["run", "--scenario", "file", "--out",
                 str(tmp_path / "c")]) == 2
    assert main(["compare", str(tmp_path / "a"),
                 str(tmp_path / "missing")]) == 2
