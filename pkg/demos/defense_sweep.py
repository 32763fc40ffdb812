"""Privacy versus reconstruction quality under gradient noise, sparsification and pruning.

Reuses the capture from ``configs/known_eps_t.yaml`` (trained on first use),
perturbs the captured gradient with each defense at a few strengths and
re-runs the disclosed-(eps, t) attack on it.

    python demos/defense_sweep.py [--out DIR] [--iters 2000]
"""

import argparse
import dataclasses
import math
import os
from pathlib import Path

import numpy as np
import torch

from gidm.config import load_config
from gidm.defenses import clip_and_noise, random_prune, sparsify
from gidm.diffusion import load_checkpoint
from gidm.federated import load_capture
from gidm.harness import mount_attack, train_stage
from gidm.metrics import score

ROOT = Path(__file__).resolve().parents[1]


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="demo_results")
    parser.add_argument("--iters", type=int, default=2000)
    args = parser.parse_args()
    os.environ["GIDM_OUTPUT_ROOT"] = args.out
    cfg = load_config(ROOT / "configs" / "known_eps_t.yaml")
    out = train_stage(cfg, cfg.results_dir())

    capture, _ = load_capture(out / "capture.npz")
    model, sched, _ = load_checkpoint(out / "capture.model.pt")
    for p in model.parameters():
        p.requires_grad_(True)
    with np.load(out / "evaluator" / "truth.npz") as data:
        truth = torch.from_numpy(data["x0"].copy())
    spec = dataclasses.replace(next(a for a in cfg.attacks if a.eps_t == "disclosed"), iters_total=args.iters)
    g = capture.gradient
    norm = float(g.norm())

    defenses = [("none", g)]
    for ratio in (0.01, 0.1, 1.0):
        defenses.append((f"noise {ratio:g}x||g||", clip_and_noise(g, norm, ratio * norm / math.sqrt(g.numel()), seed=1)))
    for s in (0.5, 0.9, 0.99):
        defenses.append((f"sparsify {s:g}", sparsify(g, s)))
    for r in (0.5, 0.9):
        defenses.append((f"prune {r:g}", random_prune(g, r, seed=1)))

    print(f"{'defense':20s} {'MSE':>8s} {'PSNR':>7s} {'SSIM':>7s}")
    for name, gd in defenses:
        s = score(mount_attack(cfg, spec, gd, model, sched, capture).recovered, truth)
        print(f"{name:20s} {s.mse:8.4f} {s.psnr:7.2f} {s.ssim:7.4f}")


if __name__ == "__main__":
    main()
