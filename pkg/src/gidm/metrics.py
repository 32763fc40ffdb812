"""Image similarity scores for reconstructions: MSE, PSNR, SSIM and a perceptual distance.

Images are array-likes (numpy or torch) laid out channels-first, either
``(C, H, W)``, ``(B, C, H, W)`` or a bare ``(H, W)`` plane. Values are in the
normalized ``[-1, 1]`` range unless ``max_val`` says otherwise.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

#: PSNR returned for identical images.
PSNR_IDENTICAL = math.inf

#: Dynamic range of the normalized [-1, 1] pixel scale.
NORMALIZED_RANGE = 2.0


@dataclass
class MetricScores:
    mse: float
    psnr: float
    ssim: float
    perceptual: float
    perceptual_backend: str
    max_val: float = NORMALIZED_RANGE

    def as_dict(self) -> dict:
        return asdict(self)


def _as_array(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().double().numpy()
    return np.asarray(x, dtype=np.float64)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, max_val: float = NORMALIZED_RANGE) -> float:
    """``10 log10(max_val^2 / mse)``; ``PSNR_IDENTICAL`` when the images match exactly."""
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    err = mse(a, b)
    if err == 0.0:
        return PSNR_IDENTICAL
    return float(10.0 * np.log10(max_val**2 / err))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(r**2) / (2.0 * sigma**2))
    return w / w.sum()


def _planes(x: np.ndarray) -> np.ndarray:
    if x.ndim == 2:
        return x[None]
    return x.reshape(-1, x.shape[-2], x.shape[-1])


def ssim(
    a,
    b,
    max_val: float = NORMALIZED_RANGE,
    win_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean structural similarity with a Gaussian window over fully-covered positions.

    Each channel plane is scored on its own; the result is the mean over planes.
    """
    a, b = _pair(a, b)
    if min(a.shape[-2:]) < win_size:
        raise ValueError(f"image extent {a.shape[-2:]} smaller than the {win_size}x{win_size} window")
    w = gaussian_window(win_size, sigma)
    c1 = (k1 * max_val) ** 2
    c2 = (k2 * max_val) ** 2

    def blur(p):
        p = ndimage.correlate1d(p, w, axis=0, mode="constant")
        p = ndimage.correlate1d(p, w, axis=1, mode="constant")
        h = win_size // 2
        return p[h : p.shape[0] - h, h : p.shape[1] - h]

    values = []
    for pa, pb in zip(_planes(a), _planes(b)):
        mu_a, mu_b = blur(pa), blur(pb)
        var_a = blur(pa * pa) - mu_a**2
        var_b = blur(pb * pb) - mu_b**2
        cov = blur(pa * pb) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
        values.append(np.mean(num / den))
    return float(np.mean(values))


# Perceptual distance backends -------------------------------------------------

PerceptualBackend = Callable[[torch.Tensor, torch.Tensor], float]
_BACKENDS: dict[str, Callable[..., PerceptualBackend]] = {}


def register_backend(name: str, factory: Callable[..., PerceptualBackend]) -> None:
    """Register a factory returning ``fn(a, b) -> float`` for ``perceptual_distance``."""
    _BACKENDS[name] = factory


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def _batched(x) -> torch.Tensor:
    t = torch.as_tensor(_as_array(x))
    if t.ndim == 2:
        t = t[None]
    if t.ndim == 3:
        t = t[None]
    return t


class DenoiserFeatureDistance:
    """LPIPS-style distance on a trained denoiser's intermediate activations.

    Activations are taken at a fixed step with the image fed as ``x_t``.
    Each layer's channel vectors are unit-normalized per position, squared
    differences are averaged over positions and summed over layers.
    """

    def __init__(self, model, t: int = 1):
        self.model = model
        self.t = t

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        dtype = next(self.model.parameters()).dtype
        with torch.no_grad():
            return self.model.features(x.to(dtype), self.t)

    def __call__(self, a, b) -> float:
        fa = self.features(_batched(a))
        fb = self.features(_batched(b))
        total = 0.0
        for xa, xb in zip(fa, fb):
            na = F.normalize(xa.double(), dim=1, eps=1e-10)
            nb = F.normalize(xb.double(), dim=1, eps=1e-10)
            total += float(((na - nb) ** 2).sum(dim=1).mean())
        return total


register_backend("denoiser", DenoiserFeatureDistance)


def perceptual_distance(a, b, backend: str = "denoiser", **backend_kwargs) -> float:
    """Feature-space distance between two images with a registered backend.

    The ``denoiser`` backend needs ``model=`` (a trained ``Denoiser``) and
    optionally ``t=``. The result is symmetrized as ``(d(a, b) + d(b, a)) / 2``.
    """
    if backend not in _BACKENDS:
        raise KeyError(f"no perceptual backend {backend!r}; registered: {available_backends()}")
    a, b = _pair(a, b)
    fn = _BACKENDS[backend](**backend_kwargs)
    return 0.5 * (fn(a, b) + fn(b, a))


def score(recovered, truth, model=None, max_val: float = NORMALIZED_RANGE, backend: str = "denoiser") -> MetricScores:
    """All four scores of ``recovered`` against ``truth``."""
    perceptual = math.nan
    if model is not None or backend != "denoiser":
        kwargs = {"model": model} if backend == "denoiser" else {}
        perceptual = perceptual_distance(recovered, truth, backend=backend, **kwargs)
    return MetricScores(
        mse=mse(recovered, truth),
        psnr=psnr(recovered, truth, max_val),
        ssim=ssim(recovered, truth, max_val),
        perceptual=perceptual,
        perceptual_backend=backend,
        max_val=max_val,
    )
