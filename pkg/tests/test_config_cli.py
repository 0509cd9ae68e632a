import numpy as np
import pytest
import yaml

from realitygap import cli
from realitygap.config import load_plan, plan_from_mapping
from realitygap.errors import ConfigInvalid, MissingInput
from realitygap.harness import ExperimentPlan

TINY = {
    "experiment": {"M": 400, "seeds": [3], "real_train_rows": 60},
    "adaptation": {"epochs": 3, "ft_epochs": 2},
    "rga": {"cooldown": 30},
}


def test_empty_config_gives_defaults(tmp_path):
    assert plan_from_mapping({}) == ExperimentPlan()
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    assert load_plan(empty) == ExperimentPlan()
    assert load_plan(None) == ExperimentPlan()


def test_sections_parsed():
    plan = plan_from_mapping({
        "experiment": {"M": 1000, "seeds": 3, "fractions": [0.6, 0.2, 0.2]},
        "drifts": [{"kind": "sensor_bias", "onset": 0.4, "magnitude": 0.3, "channels": [7]},
                   {"kind": "noise_inflation", "onset": 0.7, "magnitude": 3.0}],
        "noise": {"gaussian_sigma": 0.02},
        "adaptation": {"gamma": 0.0},
        "rga": {"k": 2.5, "persistence": 1},
        "design_ranges": {"support_factor": [0.9, 1.0]},
    })
    assert plan.M == 1000 and plan.seeds == (0, 1, 2) and plan.fractions == (0.6, 0.2, 0.2)
    assert plan.drifts[0].channels == (7,) and plan.drifts[1].magnitude == 3.0
    assert plan.noise.gaussian_sigma == 0.02
    assert plan.adaptation.gamma == 0.0 and plan.rga.k == 2.5 and plan.rga.persistence == 1
    assert tuple(plan.design_ranges.bounds[3][:2]) == (0.9, 1.0)


def test_custom_ranges_narrow_the_design_envelope():
    plan = plan_from_mapping({"ranges": {"load_magnitude": [30, 90]}})
    lo, hi = plan.design_ranges.bounds[0][:2]
    assert (lo, hi) == (30, 90)
    assert np.all(plan.design_ranges.lows >= plan.ranges.lows)


@pytest.mark.parametrize("cfg", [
    {"bogus": {}},
    {"experiment": {"N": 5}},
    {"rga": {"k": -1}},
    {"rga": {"no_such_key": 1}},
    {"experiment": {"fractions": [0.5, 0.5, 0.5]}},
    {"drifts": [{"kind": "context_shift", "onset": 1.5}]},
])
def test_invalid_configs(cfg):
    with pytest.raises(ConfigInvalid):
        plan_from_mapping(cfg)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(MissingInput):
        load_plan(tmp_path / "nope.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("- just\n- a list\n")
    with pytest.raises(ConfigInvalid):
        load_plan(bad)


@pytest.fixture
def workdir(tmp_path, shared_rom):
    (tmp_path / "out" / "checkpoints").mkdir(parents=True)
    shared_rom.save(tmp_path / "out" / "checkpoints" / "rom.npz")
    cfg = tmp_path / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    return tmp_path, cfg


def test_cli_train_run_report_export(workdir, capsys):
    root, cfg = workdir
    out = root / "out"
    common = ["--config", str(cfg), "--out", str(out)]
    assert cli.main(["train", *common]) == 0
    assert (out / "checkpoints" / "model_seed3").exists()
    assert (out / "history_3.csv").exists() and (out / "repository_3.jsonl").exists()
    text = capsys.readouterr().out
    assert "Q1 schema" in text and "seed 3" in text

    assert cli.main(["run", "--loi", "B", *common]) == 0
    metrics = out / "metrics.csv"
    assert metrics.read_text().splitlines()[0] == "seed,loi,physics,error,rg,ad,censored,ad_events"
    assert (out / "trace_3.csv").exists()

    assert cli.main(["report", str(metrics), "--out", str(root / "rep")]) == 0
    assert (root / "rep" / "table.csv").exists() and (root / "rep" / "trace_3.dat").exists()

    assert cli.main(["export", str(out / "repository_3.jsonl"), "--out", str(root / "exp")]) == 0
    assert (root / "exp" / "labeled_pairs.csv").exists()


def test_cli_run_is_deterministic(workdir):
    root, cfg = workdir
    for name in ("a", "b"):
        assert cli.main(["run", "--loi", "A", "--no-physics", "--config", str(cfg),
                         "--out", str(root / name), "--rom",
                         str(root / "out" / "checkpoints" / "rom.npz")]) == 0
    assert (root / "a" / "metrics.csv").read_bytes() == (root / "b" / "metrics.csv").read_bytes()


def test_cli_errors_return_nonzero(tmp_path, capsys):
    assert cli.main(["report", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == 2
    assert "missing.csv" in capsys.readouterr().err
    assert cli.main(["run", "--loi", "A", "--config", str(tmp_path / "none.yaml")]) == 2
    with pytest.raises(SystemExit):
        cli.main(["run", "--loi", "D"])
