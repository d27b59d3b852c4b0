from __future__ import annotations

import json

import pytest

from app.cli import apply_overrides, main, resolve_output_dir
from app.core.errors import ConfigError
from app.models.run_config import parse_config_text
from app.services.report_service import MANIFEST_FILE, SUMMARY_FILE


@pytest.fixture
def config_path(tmp_path, simulated_config_text):
    path = tmp_path / "run.toml"
    path.write_text(simulated_config_text, encoding="utf-8")
    return path


def test_dml_writes_the_report(config_path, tmp_path, capsys):
    out = tmp_path / "report"
    code = main(["dml", "--config", str(config_path), "--out", str(out)])

    assert code == 0
    assert {"estimates.json", "residuals.csv", SUMMARY_FILE, MANIFEST_FILE} <= {p.name for p in out.iterdir()}
    manifest = json.loads((out / MANIFEST_FILE).read_text())
    assert manifest["metadata"]["subcommand"] == "dml"
    assert "[ok] dml" in capsys.readouterr().out


def test_seed_override_changes_the_recorded_seed(config_path, tmp_path):
    out = tmp_path / "report"
    assert main(["dml", "--config", str(config_path), "--out", str(out), "--seed", "77"]) == 0
    estimates = json.loads((out / "estimates.json").read_text())
    assert estimates["metadata"]["seed"] == 77


def test_result_does_not_depend_on_threads(config_path, tmp_path):
    one, two = tmp_path / "one", tmp_path / "two"
    assert main(["dml", "--config", str(config_path), "--out", str(one), "--threads", "1"]) == 0
    assert main(["dml", "--config", str(config_path), "--out", str(two), "--threads", "2"]) == 0
    assert (one / "estimates.json").read_bytes() == (two / "estimates.json").read_bytes()


def test_missing_role_exits_with_config_status(tmp_path, capsys):
    path = tmp_path / "run.toml"
    path.write_text('[simulate]\nn_units = 20\n\n[roles]\noutcome = "y"\ntreatment = "d"\n', encoding="utf-8")

    code = main(["vif", "--config", str(path), "--out", str(tmp_path / "out")])

    assert code == 2
    assert "roles.covariates" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_invalid_threads(config_path, capsys):
    assert main(["dml", "--config", str(config_path), "--threads", "0"]) == 2
    assert "--threads" in capsys.readouterr().err


def test_failed_step_still_writes_the_report(tmp_path, simulated_config_text, capsys):
    path = tmp_path / "run.toml"
    path.write_text(simulated_config_text.replace("never_share = 0.5", "never_share = 0.0"), encoding="utf-8")
    out = tmp_path / "report"

    code = main(["event-study", "--config", str(path), "--out", str(out)])

    assert code == 1
    assert "event-study" in (out / SUMMARY_FILE).read_text()
    assert "step failed" in capsys.readouterr().err


def test_unknown_subcommand_is_rejected(config_path):
    with pytest.raises(SystemExit) as exc:
        main(["bootstrap", "--config", str(config_path)])
    assert exc.value.code == 2


class TestOverrides:
    def test_flags(self, simulated_config_text):
        config = apply_overrides(
            parse_config_text(simulated_config_text), 3, ["observation-folds", "observation-placebo"]
        )
        assert config.dml.seed == 3
        assert config.dml.fold_level == "observation"
        assert config.robustness.placebo_scheme == "observation"

    def test_negative_seed(self, simulated_config_text):
        with pytest.raises(ConfigError):
            apply_overrides(parse_config_text(simulated_config_text), -1, [])

    def test_out_flag_wins(self, simulated_config_text):
        config = parse_config_text(simulated_config_text)
        assert resolve_output_dir(config, "elsewhere") == "elsewhere"
