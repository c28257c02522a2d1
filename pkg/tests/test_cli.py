import json
import os

import pytest
from click.testing import CliRunner

from stainforge.cli import main

from conftest import write_config


@pytest.fixture(scope="module")
def cli_run(dataset, tmp_path_factory):
    """One CLI preprocess invocation shared by the assertions below."""
    out_dir = str(tmp_path_factory.mktemp("cli_run"))
    cfg_path = write_config(
        os.path.join(out_dir, "config.json"),
        dataset["manifest"],
        dataset["panel"],
        out_dir,
    )
    runner = CliRunner()
    result = runner.invoke(main, ["preprocess", "--config", cfg_path])
    return {"result": result, "out_dir": out_dir, "cfg_path": cfg_path}


class TestExitCodes:
    def test_success_is_zero(self, cli_run):
        assert cli_run["result"].exit_code == 0, cli_run["result"].output
        assert "ok:" in cli_run["result"].output

    def test_missing_input_is_two_and_names_path(self, dataset, tmp_path):
        cfg_path = write_config(
            str(tmp_path / "c.json"), "/missing/manifest.jsonl", dataset["panel"], str(tmp_path)
        )
        result = CliRunner().invoke(main, ["preprocess", "--config", cfg_path])
        assert result.exit_code == 2
        assert "/missing/manifest.jsonl" in result.output

    def test_missing_config_is_two(self):
        result = CliRunner().invoke(main, ["preprocess", "--config", "/missing/c.json"])
        assert result.exit_code == 2

    def test_internal_error_is_one(self, dataset, tmp_path):
        # malformed manifest triggers a non-UserError failure inside the stage
        bad = tmp_path / "manifest.jsonl"
        bad.write_text('{"tile_id": "t0"}\n')  # missing required fields
        cfg_path = write_config(
            str(tmp_path / "c.json"), str(bad), dataset["panel"], str(tmp_path)
        )
        result = CliRunner().invoke(main, ["preprocess", "--config", cfg_path])
        assert result.exit_code == 1

    def test_help(self):
        result = CliRunner().invoke(main, ["--help"])
        assert result.exit_code == 0
        for cmd in ("preprocess", "train", "evaluate", "serve"):
            assert cmd in result.output


class TestSeedOverride:
    def test_seed_flag_changes_config_hash(self, cli_run, dataset, tmp_path):
        out2 = str(tmp_path / "o2")
        cfg_path = write_config(
            str(tmp_path / "c.json"), dataset["manifest"], dataset["panel"], out2
        )
        r = CliRunner().invoke(main, ["preprocess", "--config", cfg_path, "--seed", "7"])
        assert r.exit_code == 0
        with open(os.path.join(out2, "preprocess", "summary.json")) as f:
            assert json.load(f)["seed"] == 7
