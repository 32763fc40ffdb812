"""Procedural image corpora standing in for real datasets at desk scale."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .diffusion import to_normalized


@dataclass
class Corpus:
    images: np.ndarray  # (N, H, W, C) uint8
    bit_depth: int = 8

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def tensor(self) -> torch.Tensor:
        """Images in channels-first layout, normalized to [-1, 1]."""
        if len(self) == 0:
            return torch.zeros((0, self.images.shape[3], self.images.shape[1], self.images.shape[2]))
        return to_normalized(self.images, self.bit_depth)

    def digest(self) -> str:
        return hashlib.sha256(self.images.tobytes() + str(self.images.shape).encode()).hexdigest()


def _one_image(rng: np.random.Generator, size: int, channels: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5) + 0.5
    c0, c1 = rng.uniform(0, 1, channels), rng.uniform(0, 1, channels)
    img = c0 + (c1 - c0) * np.clip(ramp, 0, 1)[..., None]
    for _ in range(rng.integers(1, 3)):
        cy, cx = rng.uniform(0.2, 0.8, 2)
        ry, rx = rng.uniform(0.12, 0.35, 2)
        color = rng.uniform(0, 1, channels)
        if rng.random() < 0.5:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        img[mask] = color
    return np.rint(img * 255).astype(np.uint8)


def make_synthetic_corpus(n: int, size: int, seed: int = 0, channels: int = 1) -> Corpus:
    """``n`` images of a colour ramp overlaid with one or two ellipses/rectangles."""
    if size < 8:
        raise ValueError("size must be >= 8")
    rng = np.random.default_rng(seed)
    imgs = np.stack([_one_image(rng, size, channels) for _ in range(n)]) if n else np.zeros((0, size, size, channels), np.uint8)
    return Corpus(imgs)


def load_cifar_batch(path, limit: int | None = None) -> Corpus:
    """Read a CIFAR-style python pickle batch (``data`` rows of 3072 bytes)."""
    import pickle

    with open(Path(path), "rb") as fh:
        blob = pickle.load(fh, encoding="bytes")
    data = np.asarray(blob[b"data"] if b"data" in blob else blob["data"], dtype=np.uint8)
    if limit is not None:
        data = data[:limit]
    return Corpus(data.reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).copy())
