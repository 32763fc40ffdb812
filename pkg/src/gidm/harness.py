"""End-to-end experiments: train, capture, attack, evaluate, report.

A results directory looks like::

    config.json              config snapshot + provenance
    status.json              per-stage completion flags (partial runs stay marked)
    train_log.jsonl          one record per federated round
    model.pt                 final global model (the attacker's diffusion prior)
    capture.npz              the adversary's view of the victim's report
    capture.model.pt         global parameters the captured report was computed against
    evaluator/truth.npz      ground truth, read only by the evaluation stage
    attacks/<name>/          reconstruction.pt, trajectory.jsonl, error.txt on failure
    results.csv / .json      per-attack metric table
    report.md, figures/      emitted by ``emit_report``

Every random stream hangs off the master seed through ``derive_seed`` with a
named path (``"corpus"``, ``"model_init"``, ``("attack", name)``...), so adding
an attack leaves the other streams untouched.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import traceback
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .config import AttackSpec, ExperimentConfig, load_config
from .corpus import Corpus, load_cifar_batch, make_synthetic_corpus
from .diffusion import Denoiser, load_checkpoint, make_noise_schedule, sample, save_checkpoint, scaled_linear_schedule, to_uint8
from .federated import ClientDataset, FederationConfig, derive_seed, load_capture, server_draw, train_federated
from .inversion import DivergenceError, InversionConfig, baseline_attack, gidm_attack, gidm_plus_attack
from .metrics import score

__all__ = [
    "COLUMNS",
    "attack_stage",
    "build_clients",
    "build_corpus",
    "build_model",
    "build_schedule",
    "capture_stage",
    "emit_report",
    "evaluate_stage",
    "make_synthetic_corpus",
    "mount_attack",
    "provenance",
    "run_experiment",
    "train_stage",
]

log = logging.getLogger(__name__)

#: ``method`` of the extra row holding GIDM's generative-phase scores.
GENERATIVE_ROW = "gidm-generative"

COLUMNS = ["attack", "method", "status", "MSE", "LPIPS", "PSNR", "SSIM", "t_hat", "t_true", "iterations"]
_TRAIN_SECTIONS = ("seed", "scenario", "dataset", "schedule", "model", "federation", "capture", "defense")


class MissingArtifact(FileNotFoundError):
    """An artifact is absent; the message names the stage that produces it."""


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, default=str)


def provenance(cfg: ExperimentConfig) -> dict:
    return {
        "package": "gidm",
        "version": __version__,
        "config_sha256": hashlib.sha256(_canonical(cfg.as_dict()).encode()).hexdigest(),
    }


def _train_key(cfg: ExperimentConfig) -> str:
    d = cfg.as_dict()
    return hashlib.sha256(_canonical({k: d[k] for k in _TRAIN_SECTIONS}).encode()).hexdigest()


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{path} is missing; run the '{stage}' stage first")
    return path


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def _mark(out: Path, stage: str, **fields) -> None:
    path = out / "status.json"
    status = json.loads(path.read_text()) if path.exists() else {}
    status[stage] = fields
    _write_json(path, status)


# ---------------------------------------------------------------- building blocks


def build_schedule(cfg: ExperimentConfig):
    s = cfg.schedule
    if s.beta_start is None and s.beta_end is None:
        return scaled_linear_schedule(s.T)
    return make_noise_schedule(s.T, s.beta_start if s.beta_start is not None else 1e-4, s.beta_end if s.beta_end is not None else 0.02)


def build_model(cfg: ExperimentConfig) -> Denoiser:
    m = cfg.model
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(cfg.seed, "model_init"))
        return Denoiser(cfg.dataset.channels, m.width, m.depth, m.emb_dim, cfg.schedule.T, m.levels)


def build_corpus(cfg: ExperimentConfig) -> Corpus:
    ds = cfg.dataset
    if ds.source == "synthetic":
        return make_synthetic_corpus(ds.n, ds.size, derive_seed(cfg.seed, "corpus"), ds.channels)
    base = Path(cfg.source_path).parent if cfg.source_path else Path(".")
    corpus = load_cifar_batch(base / ds.path, limit=ds.n)
    if corpus.images.shape[1:] != (ds.size, ds.size, ds.channels):
        raise ValueError(f"corpus images are {corpus.images.shape[1:]}, config expects {(ds.size, ds.size, ds.channels)}")
    return corpus


def build_clients(cfg: ExperimentConfig, corpus: Corpus) -> list[ClientDataset]:
    """Round-robin shards of the corpus, client ids 1..K."""
    images = corpus.tensor()
    K = cfg.federation.K
    if len(images) < K:
        raise ValueError(f"corpus of {len(images)} images cannot feed {K} clients")
    return [
        ClientDataset(images[k - 1 :: K], client_id=k, seed=cfg.seed)
        for k in range(1, K + 1)
    ]


def federation_config(cfg: ExperimentConfig, rounds: int | None = None) -> FederationConfig:
    f = cfg.federation
    return FederationConfig(
        K=f.K, R=f.R if rounds is None else rounds, eta=f.eta, init_mode=cfg.scenario, seed=cfg.seed, batch=f.batch
    )


# ---------------------------------------------------------------- stages


def _federate(cfg: ExperimentConfig, out: Path, rounds: int, final_checkpoint: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    sched = build_schedule(cfg)
    clients = build_clients(cfg, build_corpus(cfg))
    model = build_model(cfg)
    log_path = out / "train_log.jsonl"
    log_path.unlink(missing_ok=True)
    r, victim = cfg.capture_round, cfg.capture.client
    train_federated(
        federation_config(cfg, rounds),
        model,
        clients,
        sched,
        log_path=log_path,
        checkpoint_path=out / "model.pt" if final_checkpoint else None,
        capture=(r, victim),
        capture_path=out / "capture.npz",
        defense=cfg.defense.to_spec(),
        capture_batch=cfg.capture.batch,
    )
    # ground truth for the evaluator only; the attack stage never opens this directory
    client = next(c for c in clients if c.client_id == victim)
    x0 = client.draw(r, cfg.capture.batch)
    if cfg.scenario == "server_init":
        _, t_true = server_draw(cfg.seed, victim, r, (1, *client.image_shape), sched.T)
    else:
        _, t_true = client.draw_noise_and_step(r, (1, *client.image_shape), sched.T)
    truth = out / "evaluator" / "truth.npz"
    truth.parent.mkdir(parents=True, exist_ok=True)
    with open(truth, "wb") as fh:
        np.savez(fh, x0=x0.numpy(), t=np.array(t_true))


def train_stage(cfg: ExperimentConfig, out: Path, force: bool = False) -> Path:
    """Train all rounds (capturing on the way). Skipped when a matching run is on disk."""
    out = Path(out)
    key = _train_key(cfg)
    stamp = out / "train_stamp.json"
    done = [out / "model.pt", out / "capture.npz", out / "capture.model.pt", out / "evaluator" / "truth.npz"]
    if not force and stamp.exists() and all(p.exists() for p in done):
        if json.loads(stamp.read_text()).get("train_key") == key:
            log.info("reusing trained model and capture in %s", out)
            return out
    stamp.unlink(missing_ok=True)
    _mark(out, "train", complete=False)
    try:
        _federate(cfg, out, cfg.federation.R, final_checkpoint=True)
    except Exception as exc:
        _mark(out, "train", complete=False, error=f"{type(exc).__name__}: {exc}")
        raise
    _write_json(stamp, {"train_key": key})
    _mark(out, "train", complete=True)
    return out


def capture_stage(cfg: ExperimentConfig, out: Path) -> Path:
    """Run only the rounds up to the capture round and write the capture artifacts."""
    out = Path(out)
    _mark(out, "capture", complete=False)
    try:
        _federate(cfg, out, cfg.capture_round, final_checkpoint=False)
    except Exception as exc:
        _mark(out, "capture", complete=False, error=f"{type(exc).__name__}: {exc}")
        raise
    _mark(out, "capture", complete=True)
    return out


def _random_eps_t(seed: int, shape, T: int) -> tuple[torch.Tensor, int]:
    gen = torch.Generator().manual_seed(derive_seed(seed, "eps_t_guess"))
    eps = torch.randn(shape, generator=gen)
    t = int(torch.randint(1, T + 1, (1,), generator=gen))
    return eps, t


def _save_reconstruction(path: Path, report, prov: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "attack": report.attack,
        "status": report.status,
        "recovered": report.recovered.detach().clone(),
        "init": None if report.init is None else report.init.detach().clone(),
        "intermediate": None if report.intermediate is None else report.intermediate.detach().clone(),
        "snapshot_iters": [int(i) for i, _ in report.snapshots],
        "snapshots": [x.detach().clone() for _, x in report.snapshots],
        "t_hat": report.t_hat,
        "iterations": report.iterations,
        "config": json.dumps(report.config, sort_keys=True),
        "provenance": json.dumps(prov, sort_keys=True),
    }
    torch.save(blob, path)
    with open(path.parent / "trajectory.jsonl", "w") as fh:
        for i, v in enumerate(report.trajectory):
            fh.write(json.dumps({"iter": i, "objective": v}) + "\n")


def mount_attack(cfg: ExperimentConfig, spec: AttackSpec, g: torch.Tensor, model, sched, capture, prior=None):
    """Run one configured attack on gradient ``g``; ``capture`` supplies any disclosed ``(eps, t)``.

    Seeds come from ``(cfg.seed, "attack", spec.name)``, so calling this with
    the captured gradient reproduces the attack stage bit for bit.
    """
    shape = (1, cfg.dataset.channels, cfg.dataset.size, cfg.dataset.size)
    seed = derive_seed(cfg.seed, "attack", spec.name)
    icfg = InversionConfig(**spec.inversion_kwargs(), seed=seed)
    if spec.method == "gidm_plus":
        return gidm_plus_attack(g, model, sched, icfg, shape)
    if spec.eps_t == "disclosed":
        if capture.disclosed_eps is None:
            raise ValueError("capture carries no disclosed (eps, t)")
        eps, t = capture.disclosed_eps, capture.disclosed_t
    else:
        eps, t = _random_eps_t(seed, shape, sched.T)
    if spec.method == "baseline":
        return baseline_attack(g, model, sched, icfg, eps, t)
    return gidm_attack(g, model, sched, eps, t, icfg, prior=prior)


def attack_stage(cfg: ExperimentConfig, out: Path, names: list[str] | None = None) -> dict[str, str]:
    """Run the configured attacks against the capture; returns ``{name: status}``.

    Reads only the adversary's inputs: ``capture.npz``, ``capture.model.pt``
    and the final ``model.pt`` (used as the diffusion prior by GIDM).
    """
    out = Path(out)
    report_in, header = load_capture(_require(out / "capture.npz", "capture"))
    model, sched, _ = load_checkpoint(_require(out / "capture.model.pt", "capture"))
    prior_path = out / "model.pt"
    prior = load_checkpoint(prior_path)[0] if prior_path.exists() else None
    if model.parameter_order() != header["parameter_order"]:
        raise ValueError("capture parameter manifest does not match the captured model")
    for p in model.parameters():
        p.requires_grad_(True)
    g = report_in.gradient.to(next(model.parameters()).dtype)
    prov = provenance(cfg)
    statuses = {}
    selected = [a for a in cfg.attacks if names is None or a.name in names]
    if names is not None:
        unknown = set(names) - {a.name for a in cfg.attacks}
        if unknown:
            raise ValueError(f"unknown attack(s) {sorted(unknown)}")
    _mark(out, "attack", complete=False)
    for spec in selected:
        adir = out / "attacks" / spec.name
        adir.mkdir(parents=True, exist_ok=True)
        (adir / "error.txt").unlink(missing_ok=True)
        log.info("attack %s (%s, eps/t %s)", spec.name, spec.method, spec.eps_t)
        try:
            if spec.method == "gidm" and prior is None:
                raise MissingArtifact(f"{prior_path} is missing; run the 'train' stage first")
            rep = mount_attack(cfg, spec, g, model, sched, report_in, prior)
        except DivergenceError as exc:
            rep = exc.report
            (adir / "error.txt").write_text(str(exc) + "\n")
        except Exception:
            (adir / "error.txt").write_text(traceback.format_exc())
            (adir / "reconstruction.pt").unlink(missing_ok=True)
            statuses[spec.name] = "failed"
            log.error("attack %s failed; see %s", spec.name, adir / "error.txt")
            continue
        rep.attack = spec.name
        _save_reconstruction(adir / "reconstruction.pt", rep, prov)
        statuses[spec.name] = rep.status
    _mark(out, "attack", complete=all(s != "failed" for s in statuses.values()), statuses=statuses)
    return statuses


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isinf(v):
            return "inf"
        return f"{v:.6g}"
    return str(v)


def evaluate_stage(cfg: ExperimentConfig, out: Path) -> list[dict]:
    """Score every reconstruction against the ground truth and write the results table."""
    out = Path(out)
    with np.load(_require(out / "evaluator" / "truth.npz", "capture")) as data:
        truth = torch.from_numpy(data["x0"].copy())
        t_true = int(data["t"])
    feature_model = load_checkpoint(_require(out / "capture.model.pt", "capture"))[0]
    rows = []
    for spec in cfg.attacks:
        row = dict.fromkeys(COLUMNS)
        row.update(attack=spec.name, method=spec.method, t_true=t_true)
        path = out / "attacks" / spec.name / "reconstruction.pt"
        if not path.exists():
            failed = (out / "attacks" / spec.name / "error.txt").exists()
            row["status"] = "failed" if failed else "missing"
            rows.append(row)
            continue
        blob = torch.load(path, map_location="cpu", weights_only=True)
        s = score(blob["recovered"].to(truth.dtype), truth, model=feature_model)
        row.update(
            status=blob["status"],
            MSE=s.mse,
            LPIPS=s.perceptual,
            PSNR=s.psnr,
            SSIM=s.ssim,
            t_hat=blob["t_hat"],
            iterations=blob["iterations"],
        )
        rows.append(row)
        if blob["intermediate"] is not None:
            # GIDM's generative-phase output, scored on its own row for the phase comparison
            s = score(blob["intermediate"].to(truth.dtype), truth, model=feature_model)
            rows.append(
                dict(
                    row,
                    attack=f"{spec.name}:generative",
                    method=GENERATIVE_ROW,
                    MSE=s.mse,
                    LPIPS=s.perceptual,
                    PSNR=s.psnr,
                    SSIM=s.ssim,
                    iterations=spec.iters_generative,
                )
            )
    prov = provenance(cfg)
    buf = io.StringIO()
    buf.write(f"# gidm {prov['version']} config_sha256={prov['config_sha256']}\n")
    writer = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row[k]) for k in COLUMNS})
    (out / "results.csv").write_text(buf.getvalue())
    _write_json(out / "results.json", {"provenance": prov, "config": cfg.as_dict(), "columns": COLUMNS, "rows": rows})
    _mark(out, "evaluate", complete=all(r["status"] in ("ok", "diverged") for r in rows))
    return rows


def _strip(frames: list[np.ndarray], scale: int) -> Image.Image:
    h, w, c = frames[0].shape
    gap = 2
    canvas = np.full((h, len(frames) * (w + gap) - gap, c), 255, np.uint8)
    for i, f in enumerate(frames):
        canvas[:, i * (w + gap) : i * (w + gap) + w] = f
    img = Image.fromarray(canvas[..., 0] if c == 1 else canvas)
    return img.resize((img.width * scale, img.height * scale), Image.NEAREST)


def emit_report(results_dir) -> list[Path]:
    """Write ``report.md`` and one image strip per attack (original, init, snapshots, final)."""
    out = Path(results_dir)
    results = json.loads(_require(out / "results.json", "evaluate").read_text())
    with np.load(_require(out / "evaluator" / "truth.npz", "capture")) as data:
        original = to_uint8(torch.from_numpy(data["x0"].copy()))[0]
    fig_dir = out / "figures"
    fig_dir.mkdir(exist_ok=True)
    written = []
    metric_cols = ["MSE", "LPIPS", "PSNR", "SSIM"]
    lines = [
        f"# Results: {results['config']['name']}",
        "",
        f"gidm {results['provenance']['version']}, config sha256 `{results['provenance']['config_sha256'][:16]}`",
        "",
        "| attack | method | status | " + " | ".join(metric_cols) + " | t_hat / t |",
        "|---|---|---|" + "---|" * len(metric_cols) + "---|",
    ]
    for row in results["rows"]:
        vals = " | ".join(_fmt(row[c]) for c in metric_cols)
        t_cell = f"{_fmt(row['t_hat'])} / {row['t_true']}"
        lines.append(f"| {row['attack']} | {row['method']} | {row['status']} | {vals} | {t_cell} |")
        path = out / "attacks" / row["attack"] / "reconstruction.pt"
        if row["method"] == GENERATIVE_ROW or not path.exists():
            continue
        blob = torch.load(path, map_location="cpu", weights_only=True)
        init = blob["init"] if blob["init"] is not None else torch.zeros_like(blob["recovered"])
        frames = [original, to_uint8(init)[0]]
        frames += [to_uint8(x)[0] for x in blob["snapshots"]]
        frames.append(to_uint8(blob["recovered"])[0])
        png = fig_dir / f"{row['attack']}.png"
        _strip(frames, scale=max(1, 64 // original.shape[0])).save(png)
        written.append(png)
    lines += ["", "Strips: original, initialization, snapshots, final reconstruction.", ""]
    report = out / "report.md"
    report.write_text("\n".join(lines))
    return [report, *written]


def sample_grid(model_path, size: int, n: int = 8, steps: int = 25, seed: int = 0) -> np.ndarray:
    """Draw ``n`` samples from a checkpoint as uint8 (n, H, W, C), for eyeballing the prior."""
    model, sched, _ = load_checkpoint(model_path)
    c = model.config["channels"]
    z = torch.randn((n, c, size, size), generator=torch.Generator().manual_seed(seed))
    with torch.no_grad():
        return to_uint8(sample(model, z, sched, steps, seed))


def run_experiment(config_path, force_train: bool = False) -> Path:
    """Train (or reuse), capture, attack, evaluate and report. Returns the results directory."""
    cfg = config_path if isinstance(config_path, ExperimentConfig) else load_config(config_path)
    out = cfg.results_dir()
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", {"provenance": provenance(cfg), "config": cfg.as_dict()})
    train_stage(cfg, out, force=force_train)
    if cfg.attacks:
        attack_stage(cfg, out)
        evaluate_stage(cfg, out)
        emit_report(out)
    return out
