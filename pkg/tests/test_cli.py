import csv
import io
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from histmatch import config
from histmatch.cli import main
from histmatch.space import NROYSet, volume_fraction

SMALL = {
    "grid_m": 12,
    "waves": [
        {"targets": ["cumulative_diagnoses@45", "cumulative_deaths@88", "active_infections@38"],
         "cutoff": 3.0, "n_design": 15, "replicates": 5},
        {"targets": ["cumulative_diagnoses@45", "cumulative_deaths@88", "active_infections@38",
                     "new_diagnoses@21"], "cutoff": 3.0, "n_design": 15, "replicates": 5},
    ],
    "emulator": {"restarts": 2},
    "abc": {"chains": 2, "samples_per_chain": 300, "days": [10, 30, 50, 70], "n_design": 10, "replicates": 5},
    "ppc": {"draws": 10},
    "counterfactual": {"draws": 10},
}


def tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def cfg_path(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "small.yaml"
    p.write_text(yaml.safe_dump(SMALL))
    return p


@pytest.fixture(scope="module")
def full_run(cfg_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "a"
    assert main(["run", "--config", str(cfg_path), "--out", str(out)]) == 0
    return out


def test_init_writes_loadable_template(tmp_path, capsys):
    p = tmp_path / "h.yaml"
    assert main(["init", str(p)]) == 0
    assert config.load(p) == config.PipelineConfig()
    assert main(["init", str(p)]) == 2
    assert main(["init", str(p), "--force"]) == 0


def test_run_produces_every_artifact(full_run):
    files = set(tree(full_run))
    for f in ("observed.csv", "config.yaml", "store/runs.csv", "store/manifest.json", "report.csv",
              "wave_1/nroy.npz", "wave_2/wave.json", "abc/trace_chain1.csv", "abc/posterior_summary.json",
              "abc/priors.json", "ppc/bands.csv", "ppc/coverage.json", "counterfactual/counterfactual.csv",
              "counterfactual/summary.json"):
        assert f in files, f
    man = json.loads((full_run / "store/manifest.json").read_text())
    # waves 75 + 75, ABC design 50, ppc 10, counterfactual status-quo arm 10
    assert man["count"] == 75 + 75 + 50 + 10 + 10


def test_report_table(full_run, cfg_path, capsys):
    assert main(["report", "--config", str(cfg_path), "--out", str(full_run)]) == 0
    rows = list(csv.DictReader(io.StringIO((full_run / "report.csv").read_text())))
    assert [r["wave"] for r in rows] == ["1", "2"]
    assert [int(r["n_targets"]) for r in rows] == [3, 4]
    assert float(rows[1]["volume_pct"]) <= float(rows[0]["volume_pct"])
    assert "nroy_count" in capsys.readouterr().out


def test_nroy_export_volume_matches_independent_count(full_run, cfg_path):
    assert main(["nroy", "--config", str(cfg_path), "--out", str(full_run), "--wave", "1"]) == 0
    cfg = config.load(cfg_path)
    rows = list(csv.DictReader(io.StringIO((full_run / "exports/nroy_wave1.csv").read_text())))
    assert list(rows[0]) == ["index", *cfg.space.names, "imax"]
    idx = np.array([int(r["index"]) for r in rows])
    imax = np.array([float(r["imax"]) for r in rows])
    assert np.all(imax < 3.0)
    vol = json.loads((full_run / "exports/volume_wave1.json").read_text())
    independent = len(idx) / cfg.grid_m ** cfg.space.d
    assert vol["volume_fraction"] == pytest.approx(independent, rel=0, abs=1e-15)
    assert vol["volume_fraction"] == volume_fraction(NROYSet(cfg.grid, idx, imax, 3.0))
    assert len(list((full_run / "exports").glob("optical_depth_wave1_*.csv"))) == 6


def test_rerunning_a_finished_stage_is_a_noop(full_run, cfg_path):
    before = tree(full_run)
    assert main(["wave", "1", "--config", str(cfg_path), "--out", str(full_run)]) == 0
    assert main(["abc", "--config", str(cfg_path), "--out", str(full_run)]) == 0
    after = tree(full_run)
    assert {k: v for k, v in after.items() if not k.startswith("exports")} == \
        {k: v for k, v in before.items() if not k.startswith("exports")}


def test_stage_by_stage_with_other_jobs_matches_run(full_run, cfg_path, tmp_path):
    out = tmp_path / "b"
    base = ["--config", str(cfg_path), "--out", str(out)]
    for cmd in (["truth"], ["wave", "1"], ["wave", "2"], ["abc"], ["ppc"], ["counterfactual"], ["report"]):
        assert main(cmd + base + ["--jobs", "3"]) == 0
    a, b = tree(full_run), tree(out)
    a = {k: v for k, v in a.items() if not k.startswith("exports")}
    assert a == b


def test_out_of_order_stages(cfg_path, tmp_path, capsys):
    base = ["--config", str(cfg_path), "--out", str(tmp_path / "c")]
    assert main(["wave", "1"] + base) == 3
    assert main(["truth"] + base) == 0
    assert main(["wave", "2"] + base) == 3
    assert main(["abc"] + base) == 3
    assert main(["ppc"] + base) == 3
    assert "error" in capsys.readouterr().err


def test_config_conflict_with_existing_run(cfg_path, tmp_path):
    base = ["--out", str(tmp_path / "d")]
    assert main(["truth", "--config", str(cfg_path)] + base) == 0
    assert main(["truth", "--config", str(cfg_path), "--seed", "5"] + base) == 2


def test_bad_config_exit_code(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("abc: {chainz: 2}\n")
    assert main(["truth", "--config", str(p), "--out", str(tmp_path / "e")]) == 2


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "histmatch.cli", "init", str(tmp_path / "x.yaml")],
                         capture_output=True, text=True)
    assert res.returncode == 0 and (tmp_path / "x.yaml").exists()
