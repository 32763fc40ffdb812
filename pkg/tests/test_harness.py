import json
import shutil

import numpy as np
import pytest
import torch
from PIL import Image

from gidm.config import parse_config
from gidm.corpus import make_synthetic_corpus
from gidm.harness import (
    COLUMNS,
    GENERATIVE_ROW,
    MissingArtifact,
    attack_stage,
    capture_stage,
    emit_report,
    evaluate_stage,
    run_experiment,
    train_stage,
)

TINY = """\
name: tiny
seed: 5
output_dir: out
scenario: {scenario}
dataset: {{source: synthetic, n: 12, size: 12, channels: 1}}
schedule: {{T: 10}}
model: {{width: 4, depth: 1, emb_dim: 4, levels: 1}}
federation: {{K: 2, R: 3, eta: 0.05, batch: 4}}
capture: {{round: 2, client: 2, batch: 1}}
attacks:
{attacks}
"""

SERVER_ATTACKS = """\
  - {name: dlg, method: baseline, eps_t: disclosed, iters_total: 4, snapshot_every: 2}
  - {name: invg, method: baseline, eps_t: random, metric: cosine, iters_total: 3}
  - {name: gidm, method: gidm, iters_generative: 2, iters_finetune: 2, sampler_steps: 2}
  - {name: plus, method: gidm_plus, iters_total: 3, S: 1}
"""


def tiny_config(tmp_path, scenario="server_init", attacks=SERVER_ATTACKS):
    text = TINY.format(scenario=scenario, attacks=attacks.rstrip("\n") or "  []")
    if not attacks.strip():
        text = text.replace("attacks:\n  []", "attacks: []")
    path = tmp_path / "tiny.yaml"
    path.write_text(text)
    return path


@pytest.fixture(autouse=True)
def no_output_root(monkeypatch):
    monkeypatch.delenv("GIDM_OUTPUT_ROOT", raising=False)


# ---------------------------------------------------------------- corpus


def test_corpus_examples():
    empty = make_synthetic_corpus(0, 8)
    assert len(empty) == 0 and empty.tensor().shape == (0, 1, 8, 8)
    a, b = make_synthetic_corpus(20, 16, seed=4), make_synthetic_corpus(20, 16, seed=4)
    assert a.digest() == b.digest()
    assert a.digest() != make_synthetic_corpus(20, 16, seed=5).digest()
    rgb = make_synthetic_corpus(3, 16, seed=0, channels=3)
    assert rgb.images.shape == (3, 16, 16, 3) and rgb.images.dtype == np.uint8
    assert rgb.tensor().min() >= -1 and rgb.tensor().max() <= 1
    with pytest.raises(ValueError):
        make_synthetic_corpus(2, 4)


def test_corpus_statistics_stable_across_seeds():
    stats = []
    for seed in range(4):
        x = make_synthetic_corpus(2000, 16, seed=seed).images.astype(np.float64)
        stats.append((x.mean(), x.var()))
    ref_mean, ref_var = stats[0]
    for m, v in stats[1:]:
        assert abs(m / ref_mean - 1) < 0.05 and abs(v / ref_var - 1) < 0.05


# ---------------------------------------------------------------- end to end


def test_tiny_end_to_end(tmp_path):
    out = run_experiment(tiny_config(tmp_path))
    assert out == tmp_path / "out"
    for name in ["config.json", "status.json", "train_log.jsonl", "model.pt", "capture.npz", "capture.model.pt",
                 "evaluator/truth.npz", "results.csv", "results.json", "report.md"]:
        assert (out / name).exists(), name
    lines = (out / "results.csv").read_text().splitlines()
    assert lines[0].startswith("# gidm ") and "config_sha256=" in lines[0]
    assert lines[1].split(",") == COLUMNS
    assert COLUMNS[3:7] == ["MSE", "LPIPS", "PSNR", "SSIM"]
    rows = json.loads((out / "results.json").read_text())["rows"]
    assert [r["attack"] for r in rows] == ["dlg", "invg", "gidm", "gidm:generative", "plus"]
    assert rows[3]["method"] == GENERATIVE_ROW
    assert all(r["status"] == "ok" for r in rows)
    t_true = int(np.load(out / "evaluator" / "truth.npz")["t"])
    assert rows[0]["t_hat"] == t_true  # disclosed
    assert 1 <= rows[4]["t_hat"] <= 10
    status = json.loads((out / "status.json").read_text())
    assert status["train"]["complete"] and status["attack"]["complete"] and status["evaluate"]["complete"]
    assert len((out / "train_log.jsonl").read_text().splitlines()) == 3


def test_rerun_is_byte_identical(tmp_path):
    out = run_experiment(tiny_config(tmp_path))
    first = (out / "results.csv").read_bytes()
    again = run_experiment(tiny_config(tmp_path), force_train=True)
    assert (again / "results.csv").read_bytes() == first
    other = tmp_path / "copy"
    other.mkdir()
    shutil.copy(tmp_path / "tiny.yaml", other / "tiny.yaml")
    assert (run_experiment(other / "tiny.yaml") / "results.csv").read_bytes() == first


def test_empty_attack_list_trains_and_captures_only(tmp_path):
    out = run_experiment(tiny_config(tmp_path, attacks=""))
    assert (out / "model.pt").exists() and (out / "capture.npz").exists()
    assert not (out / "results.csv").exists() and not (out / "attacks").exists()


def test_client_private_scenario_hides_eps_t(tmp_path):
    attacks = "  - {name: plus, method: gidm_plus, iters_total: 2}\n  - {name: guess, method: baseline, eps_t: random, iters_total: 2}\n"
    out = run_experiment(tiny_config(tmp_path, "client_private", attacks))
    with np.load(out / "capture.npz") as cap:
        assert "disclosed_eps" not in cap.files
    rows = json.loads((out / "results.json").read_text())["rows"]
    assert [r["status"] for r in rows] == ["ok", "ok"]


def test_attack_stage_does_not_read_ground_truth(tmp_path):
    cfg = parse_config(tiny_config(tmp_path).read_text(), str(tmp_path / "tiny.yaml"))
    out = cfg.results_dir()
    train_stage(cfg, out)
    shutil.move(out / "evaluator", tmp_path / "hidden")
    assert set(attack_stage(cfg, out).values()) == {"ok"}
    with pytest.raises(MissingArtifact, match="'capture' stage"):
        evaluate_stage(cfg, out)
    shutil.move(tmp_path / "hidden", out / "evaluator")
    assert len(evaluate_stage(cfg, out)) == 5


def test_partial_failure_is_marked(tmp_path):
    """Capture-only runs have no final model, so GIDM (which needs the prior) fails while the rest succeed."""
    cfg = parse_config(tiny_config(tmp_path).read_text(), str(tmp_path / "tiny.yaml"))
    out = cfg.results_dir()
    capture_stage(cfg, out)
    assert not (out / "model.pt").exists()
    statuses = attack_stage(cfg, out)
    assert statuses == {"dlg": "ok", "invg": "ok", "gidm": "failed", "plus": "ok"}
    assert "train" in (out / "attacks" / "gidm" / "error.txt").read_text()
    rows = evaluate_stage(cfg, out)
    assert [r["status"] for r in rows] == ["ok", "ok", "failed", "ok"]
    status = json.loads((out / "status.json").read_text())
    assert not status["attack"]["complete"] and not status["evaluate"]["complete"]
    assert "failed" in (out / "results.csv").read_text()
    emit_report(out)


def test_missing_artifacts_name_the_stage(tmp_path):
    cfg = parse_config(tiny_config(tmp_path).read_text(), str(tmp_path / "tiny.yaml"))
    out = cfg.results_dir()
    with pytest.raises(MissingArtifact, match="capture.npz is missing; run the 'capture' stage"):
        attack_stage(cfg, out)
    with pytest.raises(MissingArtifact, match="'evaluate' stage"):
        emit_report(out)


def test_train_stage_reuses_matching_run(tmp_path):
    cfg = parse_config(tiny_config(tmp_path).read_text(), str(tmp_path / "tiny.yaml"))
    out = cfg.results_dir()
    train_stage(cfg, out)
    mtime = (out / "model.pt").stat().st_mtime_ns
    train_stage(cfg, out)
    assert (out / "model.pt").stat().st_mtime_ns == mtime
    cfg.federation.eta = 0.04
    train_stage(cfg, out)
    assert (out / "model.pt").stat().st_mtime_ns != mtime


def test_report_strips_and_idempotence(tmp_path):
    attacks = "  - {name: one, method: baseline, eps_t: disclosed, iters_total: 3}\n"
    out = run_experiment(tiny_config(tmp_path, attacks=attacks))
    report = (out / "report.md").read_text()
    png = out / "figures" / "one.png"
    first = png.read_bytes()
    paths = emit_report(out)
    assert paths == [out / "report.md", png]
    assert (out / "report.md").read_text() == report and png.read_bytes() == first
    table = [line for line in report.splitlines() if line.startswith("| one")]
    assert len(table) == 1
    assert "| MSE | LPIPS | PSNR | SSIM |" in report
    # original, init, final at 12 px, upscaled 5x with 2 px gaps
    with Image.open(png) as im:
        assert im.size == ((3 * 12 + 2 * 2) * 5, 12 * 5)


def test_snapshots_extend_the_strip(tmp_path):
    attacks = "  - {name: snap, method: baseline, eps_t: disclosed, iters_total: 4, snapshot_every: 2}\n"
    out = run_experiment(tiny_config(tmp_path, attacks=attacks))
    blob = torch.load(out / "attacks" / "snap" / "reconstruction.pt", weights_only=True)
    frames = 3 + len(blob["snapshots"])
    with Image.open(out / "figures" / "snap.png") as im:
        assert im.size[0] == (frames * 12 + (frames - 1) * 2) * 5
