import json

import pytest
import yaml

from sleepcl import cli
from sleepcl.config import (
    ConfigError,
    dump_config,
    from_dict,
    parse_overrides,
    resolve_config,
)


def test_defaults_follow_full_profile():
    cfg = resolve_config()
    assert cfg.train.temperature == 2.0
    assert cfg.sweep.p == [0.0, 0.25, 0.5, 0.75, 0.9]
    assert cfg.train.kl_weight == pytest.approx(1 / 1024)
    assert cfg.model_config().hidden == 2000


def test_desk_profile():
    cfg = resolve_config(overrides={"profile": "desk"})
    assert cfg.data.tasks == 5 and cfg.data.classes_per_task == 2
    assert cfg.model_config().feature_length == 256


def test_precedence_cli_over_file_over_defaults(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text(yaml.safe_dump({"train": {"lr": 0.5, "batch_size": 7}}))
    cfg = resolve_config(f, parse_overrides(["--train.lr", "0.25"]))
    assert cfg.train.lr == 0.25
    assert cfg.train.batch_size == 7
    assert cfg.train.iterations == 10000


def test_empty_file_gives_defaults(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text("")
    assert resolve_config(f).fingerprint() == resolve_config().fingerprint()


def test_unknown_key_names_it(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text("train:\n  learning_rate: 0.1\n")
    with pytest.raises(ConfigError, match="train.learning_rate"):
        resolve_config(f)


def test_type_errors():
    with pytest.raises(ConfigError, match="train.iterations"):
        resolve_config(overrides=parse_overrides(["--train.iterations", "many"]))
    with pytest.raises(ConfigError):
        resolve_config(overrides=parse_overrides(["--downscale", "1.5"]))


def test_downscale_alias_and_scalar_list():
    cfg = resolve_config(overrides=parse_overrides(["--downscale", "0.75"]))
    assert cfg.sweep.p == [0.75]


def test_env_fallback_for_data_path(monkeypatch):
    monkeypatch.setenv("SLEEPCL_DATA", "/somewhere")
    assert resolve_config().data.path == "/somewhere"
    cfg = resolve_config(overrides={"data": {"path": "/explicit"}})
    assert cfg.data.path == "/explicit"


def test_require_data(monkeypatch):
    monkeypatch.delenv("SLEEPCL_DATA", raising=False)
    with pytest.raises(ConfigError, match="dataset path"):
        resolve_config(require_data=True)


def test_dump_and_reload_preserves_fingerprint(tmp_path):
    cfg = resolve_config(overrides=parse_overrides(["--profile", "desk", "--train.lr", "0.003"]))
    dump_config(cfg, tmp_path / "c.yaml")
    again = resolve_config(tmp_path / "c.yaml")
    assert again == cfg
    assert again.fingerprint() == cfg.fingerprint()


def test_fingerprint_ignores_output_dir_but_not_hyperparameters():
    a = resolve_config()
    b = resolve_config(overrides={"output": {"dir": "elsewhere"}, "sweep": {"jobs": 4}})
    c = resolve_config(overrides={"train": {"lr": 0.01}})
    assert a.fingerprint() == b.fingerprint() != c.fingerprint()
    assert len(a.fingerprint()) == 12


def test_from_dict_roundtrip():
    cfg = resolve_config(overrides={"profile": "desk"})
    assert from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


# -- CLI ----------------------------------------------------------------------------------------
def test_cli_config_error_exit_code(tmp_path, capsys):
    f = tmp_path / "c.yaml"
    f.write_text("bogus: 1\n")
    assert cli.main(["run", "--config", str(f)]) == cli.EXIT_CONFIG
    assert "bogus" in capsys.readouterr().err


def test_cli_missing_data_exit_code(tmp_path, capsys):
    rc = cli.main(["run", "--profile", "desk", "--data.path", str(tmp_path / "absent")])
    assert rc == cli.EXIT_DATA


def test_cli_report_on_empty_dir(tmp_path, capsys):
    assert cli.main(["report", str(tmp_path)]) == cli.EXIT_DATA
    assert "summary" in capsys.readouterr().err


def test_cli_run_writes_cell(tmp_path, capsys):
    data = tmp_path / "data"
    assert cli.main(["make-desk-data", str(data), "--size", "16"]) == 0
    out = tmp_path / "out"
    rc = cli.main(["run", "--profile", "desk", "--data.path", str(data), "--output.dir", str(out),
                   "--train.iterations", "4", "--train.eval_every", "2", "--p", "0.5", "--rem", "on",
                   "--seed", "1"])
    assert rc == 0
    cells = list(out.glob("*/0.5_rem_1"))
    assert len(cells) == 1
    for name in ("metrics.csv", "derived.csv", "hist.csv", "params.bin", "log.txt", "cell.json"):
        assert (cells[0] / name).exists()
    assert json.loads((cells[0] / "cell.json").read_text())["status"] == "complete"


def test_cli_grad_check_runs(capsys):
    assert cli.main(["grad-check", "--seeds", "1"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out
