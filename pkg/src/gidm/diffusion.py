"""DDPM forward process, noise-prediction loss, parameter gradients and sampler.

Every public interface uses 1-based diffusion steps ``t in {1, ..., T}``.
Internally schedule arrays are 0-based, so ``alpha_bars[t - 1]`` is the
cumulative product up to step ``t``.

A step argument may be given in three forms:

* a Python ``int`` shared by the whole batch,
* an integer tensor of shape ``(B,)``,
* a floating tensor of shape ``(T,)`` or ``(B, T)`` holding softmax weights
  over steps ("soft step"). Schedule quantities and the step embedding are
  then the weight-averaged values, which keeps them differentiable in the
  weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NoiseSchedule:
    betas: torch.Tensor
    alpha_bars: torch.Tensor

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    @property
    def beta_start(self) -> float:
        return float(self.betas[0])

    @property
    def beta_end(self) -> float:
        return float(self.betas[-1])


def make_noise_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with ``alpha_bars`` as the running product of ``1 - beta``.

    Values are held in float64; callers cast at use sites.
    """
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )
    betas = torch.linspace(beta_start, beta_end, int(T), dtype=torch.float64)
    alpha_bars = torch.cumprod(1.0 - betas, dim=0)
    return NoiseSchedule(betas=betas, alpha_bars=alpha_bars)


def scaled_linear_schedule(T: int) -> NoiseSchedule:
    """The 1e-4..0.02 linear range rescaled by ``1000 / T``.

    Keeps ``alpha_bar_T`` near zero for short horizons such as ``T = 100``.
    """
    scale = 1000.0 / T
    return make_noise_schedule(T, 1e-4 * scale, min(0.02 * scale, 0.999))


def is_soft_step(t) -> bool:
    return isinstance(t, torch.Tensor) and t.is_floating_point()


def check_step(t, T: int) -> None:
    if is_soft_step(t):
        if t.shape[-1] != T:
            raise ValueError(f"soft step weights must have length T={T}, got shape {tuple(t.shape)}")
        return
    values = t.reshape(-1).tolist() if isinstance(t, torch.Tensor) else [t]
    for v in values:
        if int(v) != v or not 1 <= v <= T:
            raise ValueError(f"step index {v!r} outside [1, {T}]")


def alpha_bar_at(sched: NoiseSchedule, t, batch: int, dtype=torch.float32) -> torch.Tensor:
    """``alpha_bar`` for each batch element as a ``(B, 1, 1, 1)`` tensor."""
    table = sched.alpha_bars.to(dtype)
    if is_soft_step(t):
        a = t.to(dtype) @ table
    elif isinstance(t, torch.Tensor):
        a = table[t.long() - 1]
    else:
        a = table[int(t) - 1]
    a = a.reshape(-1)
    if a.numel() == 1:
        a = a.expand(batch)
    return a.reshape(batch, 1, 1, 1)


def forward_noising(x0: torch.Tensor, eps: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """Closed-form ``x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps``."""
    if x0.shape != eps.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} does not match x0 shape {tuple(x0.shape)}")
    check_step(t, sched.T)
    a = alpha_bar_at(sched, t, x0.shape[0], x0.dtype)
    return a.sqrt() * x0 + (1.0 - a).sqrt() * eps


def sinusoidal_table(T: int, dim: int) -> torch.Tensor:
    """Row ``j`` is the sinusoidal embedding of step ``j + 1``."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    steps = torch.arange(1, T + 1, dtype=torch.float64)[:, None]
    args = steps * freqs[None, :]
    table = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        table = torch.cat([table, torch.zeros(T, 1, dtype=torch.float64)], dim=1)
    return table.float()


class Denoiser(nn.Module):
    """Small convolutional encoder-decoder noise predictor ``eps_theta(x_t, t)``.

    ``levels`` stride-2 downsampling stages, ``depth`` residual convolutions
    at the coarsest scale, and a decoder that upsamples and merges the
    matching encoder activation at every level. The sinusoidal step embedding
    is projected once and added at every scale. SiLU activations keep the
    network smooth, which the inversion attacks need for second-order
    differentiation.

    Parameters are registered in a fixed order (see ``parameter_order``) and
    that order defines the layout of flattened gradient vectors.
    """

    def __init__(
        self, channels: int = 1, width: int = 32, depth: int = 1, emb_dim: int = 32, T: int = 100, levels: int = 1
    ):
        super().__init__()
        if levels < 1:
            raise ValueError("levels must be >= 1")
        self.config = dict(channels=channels, width=width, depth=depth, emb_dim=emb_dim, T=T, levels=levels)
        self.register_buffer("step_table", sinusoidal_table(T, emb_dim), persistent=False)
        self.time_mlp = nn.Linear(emb_dim, width)
        self.conv_in = nn.Conv2d(channels, width, 3, padding=1)
        self.down = nn.ModuleList([nn.Conv2d(width, width, 3, stride=2, padding=1) for _ in range(levels)])
        self.mid = nn.ModuleList([nn.Conv2d(width, width, 3, padding=1) for _ in range(depth)])
        self.up = nn.ModuleList([nn.Conv2d(2 * width, width, 3, padding=1) for _ in range(levels)])
        self.conv_out = nn.Conv2d(width, channels, 3, padding=1)

    def step_embedding(self, t, batch: int) -> torch.Tensor:
        table = self.step_table.to(self.time_mlp.weight.dtype)
        if is_soft_step(t):
            emb = t.to(table.dtype) @ table
        elif isinstance(t, torch.Tensor):
            emb = table[t.long().reshape(-1) - 1]
        else:
            emb = table[int(t) - 1]
        emb = emb.reshape(-1, table.shape[1])
        if emb.shape[0] == 1:
            emb = emb.expand(batch, -1)
        return emb

    def _trunk(self, x: torch.Tensor, t) -> list[torch.Tensor]:
        temb = F.silu(self.time_mlp(self.step_embedding(t, x.shape[0])))[:, :, None, None]
        h = F.silu(self.conv_in(x) + temb)
        first = h
        skips = [h]
        for conv in self.down:
            h = F.silu(conv(h) + temb)
            skips.append(h)
        for conv in self.mid:
            h = h + F.silu(conv(h) + temb)
        coarse = h
        skips.pop()
        for conv in self.up:
            skip = skips.pop()
            h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = F.silu(conv(torch.cat([h, skip], dim=1)))
        return [first, coarse, h]

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        return self.conv_out(self._trunk(x, t)[-1])

    def features(self, x: torch.Tensor, t) -> list[torch.Tensor]:
        """Hidden activations at full, coarse and decoded resolution."""
        return self._trunk(x, t)

    def predict(self, x: torch.Tensor, t) -> torch.Tensor:
        return self(x, t)

    def parameter_order(self) -> list[str]:
        return [name for name, _ in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def ddpm_loss(model: nn.Module, x0: torch.Tensor, eps: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """Mean squared error between ``eps`` and the model's prediction at ``x_t``."""
    xt = forward_noising(x0, eps, t, sched)
    return F.mse_loss(model(xt, t), eps)


def loss_gradient(
    model: nn.Module,
    x0: torch.Tensor,
    eps: torch.Tensor,
    t,
    sched: NoiseSchedule,
    create_graph: bool = False,
) -> torch.Tensor:
    """Flattened gradient of ``ddpm_loss`` w.r.t. every parameter, in registration order.

    With ``create_graph=True`` the result stays attached to the graph so it can
    be differentiated again w.r.t. ``x0``, ``eps`` or a soft step. Both modes
    run the double-backward kernels, so a captured gradient and the attack's
    re-evaluation at the true inputs agree bit for bit.
    """
    params = [p for p in model.parameters()]
    if not params or not any(p.requires_grad for p in params):
        raise ValueError("model has no differentiable parameters")
    loss = ddpm_loss(model, x0, eps, t, sched)
    grads = torch.autograd.grad(loss, params, create_graph=True, allow_unused=True)
    flat = [
        (g if g is not None else torch.zeros_like(p)).reshape(-1) for g, p in zip(grads, params)
    ]
    out = torch.cat(flat)
    return out if create_graph else out.detach()


def sampler_steps(T: int, steps: int) -> list[int]:
    """Evenly spaced 1-based steps ending at ``T`` used by a ``steps``-step sampler."""
    if steps == 0:
        return []
    return [int(round(v)) for v in np.linspace(1, T, steps)]


def sample(
    model: nn.Module,
    latent: torch.Tensor,
    sched: NoiseSchedule,
    steps: int | None = None,
    rng_seed: int = 0,
    clip_denoised: bool = True,
) -> torch.Tensor:
    """Ancestral DDPM reverse process from ``latent`` (taken as ``x_T``).

    With ``steps < T`` the chain runs over an evenly respaced subset of steps,
    with per-step betas recomputed from the retained ``alpha_bars``. Each step
    forms the posterior mean from the predicted ``x0``, clamped to [-1, 1]
    when ``clip_denoised``. Noise is drawn from a generator seeded with
    ``rng_seed``; the result stays differentiable w.r.t. ``latent``.
    """
    T = sched.T
    steps = T if steps is None else steps
    if not 0 <= steps <= T:
        raise ValueError(f"steps must lie in [0, {T}], got {steps}")
    if steps == 0:
        return latent
    gen = torch.Generator().manual_seed(int(rng_seed))
    abar = sched.alpha_bars.tolist()
    seq = sampler_steps(T, steps)
    x = latent
    for i in range(len(seq) - 1, -1, -1):
        t = seq[i]
        a_t = abar[t - 1]
        a_prev = abar[seq[i - 1] - 1] if i > 0 else 1.0
        beta = 1.0 - a_t / a_prev
        eps_hat = model(x, t)
        x0_hat = (x - math.sqrt(1.0 - a_t) * eps_hat) / math.sqrt(a_t)
        if clip_denoised:
            x0_hat = x0_hat.clamp(-1.0, 1.0)
        c0 = math.sqrt(a_prev) * beta / (1.0 - a_t)
        ct = math.sqrt(1.0 - beta) * (1.0 - a_prev) / (1.0 - a_t)
        x = c0 * x0_hat + ct * x
        if i > 0:
            var = beta * (1.0 - a_prev) / (1.0 - a_t)
            z = torch.randn(latent.shape, generator=gen, dtype=latent.dtype)
            x = x + math.sqrt(var) * z
    return x


def to_normalized(images: np.ndarray, bit_depth: int = 8) -> torch.Tensor:
    """Map ``p``-bit integer images (B, H, W, C) or (B, C, H, W) ... to [-1, 1].

    Arrays with a trailing channel axis of size 1 or 3 are moved to
    channels-first.
    """
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected a 3-D or 4-D image array, got shape {arr.shape}")
    if arr.shape[-1] in (1, 3) and arr.shape[1] not in (1, 3):
        arr = arr.transpose(0, 3, 1, 2)
    top = 2**bit_depth - 1
    if arr.min() < 0 or arr.max() > top:
        raise ValueError(f"values outside the {bit_depth}-bit range [0, {top}]")
    return torch.from_numpy(arr / top * 2.0 - 1.0).float()


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """Inverse of ``to_normalized`` for 8-bit output, clamped; returns (B, H, W, C)."""
    arr = x.detach().cpu().double().clamp(-1.0, 1.0).numpy()
    arr = np.rint((arr + 1.0) / 2.0 * 255.0).astype(np.uint8)
    return arr.transpose(0, 2, 3, 1)


def save_checkpoint(path, model: Denoiser, sched: NoiseSchedule, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "model_config": dict(model.config),
            "parameter_order": model.parameter_order(),
            "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
            "betas": sched.betas.clone(),
            "extra": extra or {},
        },
        path,
    )
    return path


def load_checkpoint(path) -> tuple[Denoiser, NoiseSchedule, dict]:
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('format_version')!r}")
    model = Denoiser(**blob["model_config"])
    if model.parameter_order() != blob["parameter_order"]:
        raise ValueError("checkpoint parameter order does not match the model registry")
    dtype = next(iter(blob["state_dict"].values())).dtype
    model.to(dtype)
    model.load_state_dict(blob["state_dict"])
    betas = blob["betas"]
    sched = NoiseSchedule(betas=betas, alpha_bars=torch.cumprod(1.0 - betas, dim=0))
    return model, sched, blob["extra"]
