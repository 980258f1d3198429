import csv
import json

import pytest

from uqdecomp import cli
from uqdecomp import harness as H

SMALL = """
[calibration]
cal_episodes = 20
k = 2
epochs = 5
t_cal = 150

[experiment]
controllers = ["vanilla", "decomposed"]
conditions = ["nominal", "sensor"]
alphas = [0.3]
shifts = ["mass2"]

[perturbation]
name = "light_noise"
mass_mult = 1.0
[perturbation.sensor_sigma]
object_pos = 0.02

[tracking]
calibration_length = 600
train_streams = 2
eval_streams = 1
ensemble_k = 2
ensemble_epochs = 5
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.toml").write_text(SMALL)
    assert cli.main(["calibrate", "--config", str(d / "cfg.toml"), "--out", str(d)]) == 0
    return d


def test_calibrate_outputs(workdir):
    summary = json.loads((workdir / "calibration.json").read_text())
    assert summary["tau_alea"] > 0 and summary["tau_epis"] > 0
    assert H.Models.load(workdir / "models.json").ens.tau == summary["tau_epis"]
    assert (workdir / "calibration.npz").exists()


def test_run_writes_tables(workdir):
    cfg = str(workdir / "cfg.toml")
    args = ["run", "--config", cfg, "--out", str(workdir), "--episodes", "3", "--seed", "2"]
    assert cli.main(args + ["--trajectories", "1"]) == 0
    rows = list(csv.DictReader(open(workdir / "results.csv")))
    assert {r["controller"] for r in rows} == {"vanilla", "decomposed"}
    assert all(r["episodes"] == "3" for r in rows)
    first = (workdir / "results.csv").read_bytes()
    assert cli.main(args) == 0
    assert (workdir / "results.csv").read_bytes() == first
    assert len(list((workdir / "trajectories").glob("*.csv"))) == 4
    assert len(list(csv.DictReader(open(workdir / "records.csv")))) == 12


def test_run_custom_condition(workdir, tmp_path):
    assert cli.main(["run", "--config", str(workdir / "cfg.toml"), "--out", str(tmp_path),
                     "--models", str(workdir / "models.json"), "--episodes", "2",
                     "--condition", "custom"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "results.csv")))
    assert {r["condition"] for r in rows} == {"light_noise"}


def test_sweeps_and_analysis(workdir, tmp_path):
    cfg = str(workdir / "cfg.toml")
    common = ["--config", cfg, "--models", str(workdir / "models.json"), "--episodes", "2"]
    assert cli.main(["sweep-alpha", *common, "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["sweep-shift", *common, "--out", str(tmp_path / "s")]) == 0
    assert "mass2:dynamics" in json.loads((tmp_path / "s" / "shift_gaps.json").read_text())
    assert cli.main(["analyze", *common, "--out", str(tmp_path / "n"),
                     "--cal", str(workdir / "calibration.npz")]) == 0
    report = json.loads((tmp_path / "n" / "analysis.json").read_text())
    assert {"trigger_rates", "signal_correlation", "calibration_ablation"} <= set(report)


def test_train_ensemble_without_augmentation(workdir, tmp_path):
    assert cli.main(["train-ensemble", "--config", str(workdir / "cfg.toml"), "--out", str(tmp_path),
                     "--cal", str(workdir / "calibration.npz"), "--no-augment"]) == 0
    doc = json.loads((tmp_path / "ensemble_noaug.json").read_text())
    assert doc["noise_levels"] == [0.0] and doc["tau"] > 0


def test_track_sim(workdir, tmp_path):
    assert cli.main(["track-sim", "--config", str(workdir / "cfg.toml"), "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "track_report.csv")))
    assert {r["selector"] for r in rows} >= {"decomposed", "total_u", "fixed_xlarge"}
    assert "selectors" in json.loads((tmp_path / "track_summary.json").read_text())


def test_bad_config_rejected(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("[nonsense]\nx = 1\n")
    with pytest.raises(SystemExit):
        cli.load_run_config(str(p))
    p.write_text("[plant]\nbogus = 1\n")
    with pytest.raises(SystemExit):
        cli.load_run_config(str(p))


def test_every_subcommand_has_common_flags():
    parser = cli.build_parser()
    for name in cli.COMMANDS:
        ns = parser.parse_args([name, "--seed", "4", "--episodes", "9", "--config", "c.toml",
                                "--out", "o"])
        assert (ns.seed, ns.episodes, ns.config, ns.out) == (4, 9, "c.toml", "o")
