import subprocess
import sys

import pytest

from gidm.cli import build_parser, main

from test_harness import tiny_config


@pytest.fixture(autouse=True)
def output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("GIDM_OUTPUT_ROOT", str(tmp_path / "root"))


def test_subcommands_present():
    parser = build_parser()
    for cmd in ["train", "capture", "attack", "evaluate", "report", "run"]:
        args = parser.parse_args([cmd, "x.yaml"])
        assert args.command == cmd


def test_stagewise_run(tmp_path, capsys):
    cfg = str(tiny_config(tmp_path))
    out = tmp_path / "root" / "out"
    assert main(["train", cfg]) == 0
    assert capsys.readouterr().out.strip() == str(out)
    assert main(["attack", cfg, "--only", "dlg"]) == 0
    assert (out / "attacks" / "dlg").exists() and not (out / "attacks" / "invg").exists()
    assert main(["attack", cfg]) == 0
    assert main(["evaluate", cfg]) == 0
    assert main(["report", str(out)]) == 0
    printed = capsys.readouterr().out
    assert str(out / "report.md") in printed
    assert main(["report", cfg]) == 0


def test_run_and_exit_codes(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    assert main(["run", str(cfg)]) == 0
    bad = tmp_path / "bad.yaml"
    bad.write_text(cfg.read_text().replace("R: 3", "R: -1"))
    assert main(["run", str(bad)]) == 2
    assert "config error" in capsys.readouterr().err


def test_missing_artifact_exit_code(tmp_path, capsys):
    cfg = str(tiny_config(tmp_path))
    assert main(["attack", cfg]) == 1
    assert "run the 'capture' stage first" in capsys.readouterr().err


def test_capture_then_failed_attack_exit_code(tmp_path):
    cfg = str(tiny_config(tmp_path))
    assert main(["capture", cfg]) == 0
    assert main(["attack", cfg]) == 1  # gidm needs the final model from 'train'


def test_console_script_module_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "gidm.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "run" in proc.stdout
