"""Gradient perturbation defenses applied to a client's report before the server sees it."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch

KINDS = ("none", "clip_noise", "sparsify", "random_prune")


@dataclass(frozen=True)
class DefenseSpec:
    kind: str = "none"
    clip_bound: float = math.inf
    sigma: float = 0.0
    sparsity: float = 0.0
    prune_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown defense kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "clip_noise" and not (self.clip_bound > 0 and self.sigma >= 0):
            raise ValueError("clip_noise needs clip_bound > 0 and sigma >= 0")
        if self.kind == "sparsify" and not 0.0 <= self.sparsity <= 1.0:
            raise ValueError("sparsity must lie in [0, 1]")
        if self.kind == "random_prune" and not 0.0 <= self.prune_rate <= 1.0:
            raise ValueError("prune_rate must lie in [0, 1]")

    def as_dict(self) -> dict:
        return asdict(self)


def clip_and_noise(g: torch.Tensor, clip_bound: float, sigma: float, seed: int = 0) -> torch.Tensor:
    """Scale ``g`` to global L2 norm at most ``clip_bound``, then add N(0, sigma^2) noise."""
    if not clip_bound > 0:
        raise ValueError("clip_bound must be positive")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    norm = float(torch.linalg.vector_norm(g.double()))
    out = g * min(1.0, clip_bound / norm) if norm > 0 else g.clone()
    if sigma > 0:
        gen = torch.Generator().manual_seed(int(seed))
        out = out + sigma * torch.randn(g.shape, generator=gen, dtype=g.dtype)
    return out


def sparsify(g: torch.Tensor, sparsity: float) -> torch.Tensor:
    """Zero the ``floor(sparsity * n)`` smallest-magnitude entries; ties go to the lower index."""
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError("sparsity must lie in [0, 1]")
    n = g.numel()
    k = math.floor(sparsity * n)
    out = g.clone()
    if k == 0:
        return out
    order = torch.sort(g.abs().reshape(-1), stable=True).indices
    out.view(-1)[order[:k]] = 0
    return out


def random_prune(g: torch.Tensor, rate: float, seed: int = 0) -> torch.Tensor:
    """Zero each entry independently with probability ``rate``."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    gen = torch.Generator().manual_seed(int(seed))
    drop = torch.rand(g.shape, generator=gen, dtype=torch.float64) < rate
    return torch.where(drop, torch.zeros_like(g), g)


def apply_defense(g: torch.Tensor, spec: DefenseSpec | None) -> torch.Tensor:
    if spec is None or spec.kind == "none":
        return g
    if spec.kind == "clip_noise":
        return clip_and_noise(g, spec.clip_bound, spec.sigma, spec.seed)
    if spec.kind == "sparsify":
        return sparsify(g, spec.sparsity)
    return random_prune(g, spec.prune_rate, spec.seed)
