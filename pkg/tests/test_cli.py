import json

import pytest

from omas_consensus.cli import batch_seed, graphcheck_trace, main, run_batch, verify_trace
from omas_consensus.config import PRESET_NAMES, ScenarioConfig, preset
from omas_consensus.engine import Trace, run
from omas_consensus.metrics import RunMetrics


def small(algorithm="qaod", **kw):
    return preset("desk", algorithm).replace(horizon=80, **kw)


def test_preset_values():
    s1 = preset("scenario1")
    assert (s1.n_total, s1.n_active_initial, s1.churn_rate, s1.stabilization_step, s1.T, s1.runs, s1.horizon) == (
        150, 100, 0.1, 80, 20, 100, 200)
    s2c = preset("scenario2c")
    assert (s2c.n_total, s2c.n_active_initial) == (600, 500)
    assert preset("scenario3b").churn_rate == 0.5
    assert preset("scenario3b", "qapod").tau_bar == 2
    assert preset("scenario3a", "qapod").tau_bar == 5
    assert preset("scenario1", "qapod").tau_bar == 5
    assert preset("scenario1", "qapod", tau_bar=10).tau_bar == 10
    assert preset("scenario1", "qaiod").stabilization_step is None


@pytest.mark.parametrize("name", PRESET_NAMES)
def test_presets_roundtrip(name):
    for alg in ("qaod", "qapod", "qaiod"):
        cfg = preset(name, alg)
        assert ScenarioConfig.from_json(cfg.to_json()) == cfg


def test_unknown_preset_lists_choices():
    with pytest.raises(KeyError, match="scenario1"):
        preset("nope")
    with pytest.raises(ValueError):
        ScenarioConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        preset("desk", "qaod", tau_bar=3)


def test_batch_of_one_matches_single_run(tmp_path):
    cfg = small()
    seed = batch_seed(0, 0)
    res = run_batch(cfg, seeds=1, out_dir=tmp_path)
    single = RunMetrics.from_trace(run(cfg, seed=seed))
    assert res.seeds == [seed]
    assert res.runs[0].epsilon_series == single.epsilon_series
    assert res.summary.epsilon_mean == [float(e) for e in single.epsilon_series]
    assert (tmp_path / "summary.csv").exists()
    report = json.loads((tmp_path / "summary.json").read_text())
    assert report["runs"][0]["seed"] == seed and report["audit_failures"] == []


def test_summary_ignores_seed_order():
    cfg = small()
    seeds = [batch_seed(3, i) for i in range(4)]
    a = run_batch(cfg, seeds=seeds).summary
    b = run_batch(cfg, seeds=list(reversed(seeds))).summary
    assert a.epsilon_mean == b.epsilon_mean
    assert a.convergence_stats() == b.convergence_stats()


def test_verify_and_graphcheck_report():
    trace = run(small("qapod"), seed=4)
    rep = verify_trace(trace)
    assert rep["audit_ok"] and rep["audit_matches_record"] and rep["epsilon_matches_record"]
    g = graphcheck_trace(trace)
    assert g["node_sets_match"] and g["departure_condition_ok"]


def test_main_run_verify_graphcheck(tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["run", "--preset", "desk", "--algorithm", "qaiod", "--seeds", "2", "--horizon", "60",
                 "--out", str(out), "--write-traces"])
    assert code == 0
    trace_path = out / "traces" / "run_000.json"
    assert trace_path.exists() and (out / "traces" / "run_001.csv").exists()
    assert main(["verify", "--trace", str(trace_path)]) == 0
    assert main(["graphcheck", "--trace", str(trace_path)]) == 0
    capsys.readouterr()
    assert main(["presets"]) == 0
    assert "desk" in capsys.readouterr().out


def test_main_rejects_bad_overrides(tmp_path):
    assert main(["run", "--preset", "desk", "--churn-rate", "1.5", "--seeds", "1"]) == 2
    # heavy churn with long delays leaves no long-term receivers
    assert main(["run", "--preset", "scenario3b", "--algorithm", "qapod", "--tau-bar", "5", "--seeds", "1"]) == 2
    with pytest.raises(SystemExit):
        main(["verify", "--trace", str(tmp_path / "missing.json")])


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(small().replace(horizon=70).to_json())
    out = tmp_path / "o"
    assert main(["run", "--config", str(path), "--seeds", "1", "--T", "5", "--out", str(out)]) == 0
    report = json.loads((out / "summary.json").read_text())
    assert report["config"]["T"] == 5 and report["config"]["horizon"] == 70


def test_violate_flag_counts_violations(tmp_path):
    out = tmp_path / "v"
    code = main(["run", "--preset", "desk", "--seeds", "2", "--horizon", "80", "--violate", "--violate-step", "10",
                 "--out", str(out), "--write-traces"])
    # violating runs are excluded from the exit status
    assert code == 0
    report = json.loads((out / "summary.json").read_text())
    assert report["violating_runs"] == 2
    trace = Trace.load(out / "traces" / "run_000.json")
    assert not verify_trace(trace)["conforming"]
