import json

import pytest

from sleepcl.config import resolve_config
from sleepcl.data import make_desk_digits
from sleepcl.sweep import ReportError, build_report, report, run_sweep


@pytest.fixture(scope="module")
def desk_data(tmp_path_factory):
    return make_desk_digits(tmp_path_factory.mktemp("desk"))


def tiny_cfg(data, out, **sweep):
    ov = {
        "profile": "desk",
        "data": {"path": str(data), "tasks": 2, "eval_limit": 20},
        "model": {"hidden": 24, "latent": 4},
        "train": {"iterations": 6, "batch_size": 8, "eval_every": 3},
        "sweep": {"p": [0.0, 0.5, 0.75], "rem": [True, False], "seeds": [0, 1], **sweep},
        "output": {"dir": str(out)},
    }
    return resolve_config(overrides=ov)


@pytest.fixture(scope="module")
def swept(desk_data, tmp_path_factory):
    cfg = tiny_cfg(desk_data, tmp_path_factory.mktemp("out"))
    return cfg, run_sweep(cfg)


def test_sweep_produces_every_cell(swept):
    cfg, root = swept
    cells = sorted(d.name for d in root.iterdir() if (d / "cell.json").exists())
    assert len(cells) == 3 * 2 * 2
    assert "0.75_norem_1" in cells
    manifest = json.loads((root / "summary" / "manifest.json").read_text())
    assert manifest["missing"] == [] and manifest["failed"] == []
    assert len(manifest["complete"]) == 12


def test_summary_has_bootstrap_columns(swept):
    _, root = swept
    lines = (root / "summary" / "summary.csv").read_text().splitlines()
    assert lines[0] == "p,rem_enabled,task,iteration,metric,n,mean,ci_low,ci_high"
    row = next(line for line in lines[1:] if ",mu," in line).split(",")
    assert row[5] == "2"
    assert float(row[7]) <= float(row[6]) <= float(row[8])


def test_report_tables(swept):
    _, root = swept
    text = report(root)
    assert (root / "report.md").read_text() == text
    assert "Maximum average accuracy per task" in text
    assert "| REM, p=0.75 |" in text and "| no REM, p=0 |" in text
    data = build_report(root)
    assert len(data.cells) == 12 and data.missing == []
    assert len(data.composition[(True, 0.5)]) == 2


def test_completed_cells_are_skipped(swept):
    cfg, root = swept
    before = {p: p.stat().st_mtime_ns for p in root.glob("*/metrics.csv")}
    run_sweep(cfg)
    after = {p: p.stat().st_mtime_ns for p in root.glob("*/metrics.csv")}
    assert before == after


def test_report_on_empty_dir(tmp_path):
    with pytest.raises(ReportError, match="summary"):
        report(tmp_path)


def test_missing_cells_listed(desk_data, tmp_path):
    cfg = tiny_cfg(desk_data, tmp_path, p=[0.0], rem=[True], seeds=[0, 1, 2])
    root = run_sweep(cfg, max_cells=2)
    manifest = json.loads((root / "summary" / "manifest.json").read_text())
    assert manifest["missing"] == ["0_rem_2"]
    assert "0_rem_2" in build_report(root).missing


def test_sweep_missing_dataset(tmp_path):
    cfg = tiny_cfg(tmp_path / "absent", tmp_path / "out")
    with pytest.raises(FileNotFoundError):
        run_sweep(cfg)
    assert not (tmp_path / "out").exists()
