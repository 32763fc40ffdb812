"""Gradient inversion attacks against captured DDPM training gradients.

All attacks minimize a distance between the captured gradient ``g`` and the
gradient ``g_hat`` that the attacked model would produce on a dummy image.
This requires differentiating through ``loss_gradient`` (double backward).

* ``baseline_attack``: pixel-space optimization with ``(eps, t)`` held
  fixed. This is DLG-dm with the ``l2`` metric and InvG-dm with ``cosine``.
* ``gidm_attack``: a generative phase that searches the sampler's latent
  space, then a pixel-space fine-tuning phase starting from its output.
* ``gidm_plus_attack``: joint optimization of image, noise and a relaxed
  step vector, with the noise updated only on gated iterations.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

import torch

from .diffusion import NoiseSchedule, loss_gradient, sample

log = logging.getLogger(__name__)

METRICS = ("l2", "cosine")


@dataclass
class InversionConfig:
    metric: str = "l2"
    eta_x: float = 0.01
    eta_eps: float = 0.01
    eta_t: float = 0.01
    S: int = 50
    iters_generative: int = 500
    iters_finetune: int = 500
    iters_total: int = 1000
    sampler_steps: int = 25
    snapshot_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if min(self.eta_x, self.eta_eps, self.eta_t) <= 0:
            raise ValueError("learning rates must be positive")
        if self.S < 1:
            raise ValueError("S must be >= 1")
        if min(self.iters_generative, self.iters_finetune, self.iters_total, self.sampler_steps, self.snapshot_every) < 0:
            raise ValueError("iteration counts must be non-negative")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class ReconstructionReport:
    attack: str
    recovered: torch.Tensor
    trajectory: list[float]
    config: dict
    t_hat: int | None = None
    eps_hat: torch.Tensor | None = None
    init: torch.Tensor | None = None
    intermediate: torch.Tensor | None = None
    snapshots: list[tuple[int, torch.Tensor]] = field(default_factory=list)
    scores: dict = field(default_factory=dict)
    status: str = "ok"

    @property
    def iterations(self) -> int:
        return len(self.trajectory)


class DivergenceError(RuntimeError):
    """Raised when an attack's objective turns non-finite; ``report`` holds the last good state."""

    def __init__(self, message: str, report: ReconstructionReport):
        super().__init__(message)
        self.report = report


@dataclass
class InversionState:
    x_hat: torch.Tensor
    eps_hat: torch.Tensor | None = None
    t_vec: torch.Tensor | None = None
    optimizers: dict = field(default_factory=dict)
    i: int = 0
    trajectory: list[float] = field(default_factory=list)


def gradient_distance(g_hat: torch.Tensor, g: torch.Tensor, metric: str = "l2") -> torch.Tensor:
    """``l2``: squared Euclidean distance. ``cosine``: one minus cosine similarity."""
    if g_hat.shape != g.shape:
        raise ValueError(f"gradient length mismatch: {tuple(g_hat.shape)} vs {tuple(g.shape)}")
    if metric == "l2":
        return ((g_hat - g) ** 2).sum()
    if metric == "cosine":
        n_hat = torch.linalg.vector_norm(g_hat)
        n = torch.linalg.vector_norm(g)
        if float(n_hat.detach()) == 0.0 or float(n.detach()) == 0.0:
            raise ValueError("cosine distance is undefined for a zero gradient")
        return 1.0 - (g_hat * g).sum() / (n_hat * n)
    raise ValueError(f"unknown metric {metric!r}")


def inversion_objective(x_hat, eps, t, model, sched: NoiseSchedule, g: torch.Tensor, metric: str = "l2") -> torch.Tensor:
    """Distance between ``g`` and the loss gradient at ``(x_hat, eps, t)``.

    Differentiable w.r.t. ``x_hat``, ``eps`` and, if ``t`` is a soft-step
    weight vector, w.r.t. those weights.
    """
    if eps.shape != x_hat.shape:
        eps = eps.expand_as(x_hat)
    g_hat = loss_gradient(model, x_hat, eps, t, sched, create_graph=True)
    return gradient_distance(g_hat, g.to(g_hat.dtype), metric)


def epsilon_update_gate(i: int, S: int) -> bool:
    """True on iterations where the noise estimate is updated: ``i mod 2S > S``."""
    return i % (2 * S) > S


def infer_t(t_vec) -> int:
    """1-based index of the largest entry; ties resolve to the smallest index."""
    v = torch.as_tensor(t_vec).reshape(-1)
    if not bool(torch.isfinite(v).all()):
        raise ValueError("t_vec has non-finite entries")
    return int(torch.argmax(v)) + 1


def _generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))


def uniform_image(shape, seed: int, dtype=torch.float32) -> torch.Tensor:
    """Dummy image drawn uniformly over the normalized pixel range [-1, 1]."""
    return (torch.rand(shape, generator=_generator(seed), dtype=torch.float64) * 2.0 - 1.0).to(dtype)


def _param_dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


def _maybe_snapshot(snapshots, every: int, i: int, x: torch.Tensor) -> None:
    if every and (i + 1) % every == 0:
        snapshots.append((i + 1, x.detach().clone()))


def _check_finite(value: float, i: int, name: str, make_report: Callable[[], ReconstructionReport]) -> None:
    if not math.isfinite(value):
        report = make_report()
        report.status = "diverged"
        raise DivergenceError(f"{name}: non-finite objective at iteration {i}", report)


def _pixel_descent(
    g, model, sched, eps, t, x_init, iters, config: InversionConfig, name: str, state: InversionState | None = None
) -> ReconstructionReport:
    x = x_init.detach().clone().requires_grad_(True)
    opt = torch.optim.Adam([x], lr=config.eta_x)
    state = state or InversionState(x_hat=x)
    state.x_hat, state.optimizers = x, {"x": opt}
    eps = eps.detach().to(x.dtype)
    snapshots: list = []
    last_good = x.detach().clone()

    def report(final=False):
        return ReconstructionReport(
            attack=name,
            recovered=x.detach().clone() if final else last_good.clone(),
            trajectory=list(state.trajectory),
            config=config.as_dict(),
            t_hat=int(t),
            eps_hat=eps.clone(),
            init=x_init.detach().clone(),
            snapshots=snapshots,
        )

    for i in range(iters):
        opt.zero_grad(set_to_none=True)
        obj = inversion_objective(x, eps, t, model, sched, g, config.metric)
        val = float(obj.detach())
        _check_finite(val, i, name, report)
        state.trajectory.append(val)
        last_good = x.detach().clone()
        (x.grad,) = torch.autograd.grad(obj, [x])
        opt.step()
        state.i += 1
        _maybe_snapshot(snapshots, config.snapshot_every, i, x)
    return report(final=True)


def baseline_attack(
    g: torch.Tensor,
    model,
    sched: NoiseSchedule,
    config: InversionConfig,
    eps_init: torch.Tensor,
    t_init: int,
    x_init: torch.Tensor | None = None,
    iters: int | None = None,
    name: str | None = None,
) -> ReconstructionReport:
    """Pixel-space gradient matching with ``(eps, t)`` frozen at the given values.

    ``eps_init``/``t_init`` are the disclosed pair in the server-init
    scenario, or the adversary's own random guess otherwise. The dummy image
    starts uniform over [-1, 1] unless ``x_init`` is given.
    """
    dtype = _param_dtype(model)
    if x_init is None:
        x_init = uniform_image(eps_init.shape, config.seed, dtype)
    name = name or ("dlg-dm" if config.metric == "l2" else "invg-dm")
    iters = config.iters_total if iters is None else iters
    return _pixel_descent(g, model, sched, eps_init, t_init, x_init.to(dtype), iters, config, name)


class GenerativePhaseResult(NamedTuple):
    image: torch.Tensor
    latent: torch.Tensor
    trajectory: list
    snapshots: list


def gidm_generative_phase(
    g: torch.Tensor,
    model,
    sched: NoiseSchedule,
    eps: torch.Tensor,
    t: int,
    config: InversionConfig,
    prior=None,
    latent_init: torch.Tensor | None = None,
) -> GenerativePhaseResult:
    """Optimize the sampler's input latent so the sampled image explains ``g``.

    ``prior`` is the trained diffusion model used as the sampler (defaults to
    ``model``, the network whose gradient was captured). Each iteration runs
    ``sample(prior, latent, sched, sampler_steps, seed)`` with a fixed seed,
    scores the result with ``inversion_objective`` and steps the latent with
    Adam. Returns the sample at the final latent.
    """
    prior = model if prior is None else prior
    dtype = _param_dtype(model)
    if config.sampler_steps == 0:
        warnings.warn("sampler_steps=0: generative phase degenerates to pixel-space search", stacklevel=2)
    if latent_init is None:
        latent_init = torch.randn(eps.shape, generator=_generator(config.seed), dtype=torch.float64)
    z = latent_init.detach().clone().to(dtype).requires_grad_(True)
    opt = torch.optim.Adam([z], lr=config.eta_x)
    eps = eps.detach().to(dtype)
    trajectory: list[float] = []
    snapshots: list = []

    def render(latent):
        return sample(prior, latent, sched, config.sampler_steps, config.seed)

    last_good = z.detach().clone()
    for i in range(config.iters_generative):
        opt.zero_grad(set_to_none=True)
        x = render(z)
        obj = inversion_objective(x, eps, t, model, sched, g, config.metric)
        val = float(obj.detach())
        if not math.isfinite(val):
            with torch.no_grad():
                img = render(last_good)
            rep = ReconstructionReport("gidm-generative", img, trajectory, config.as_dict(), t_hat=int(t), status="diverged")
            raise DivergenceError(f"generative phase: non-finite objective at iteration {i}", rep)
        trajectory.append(val)
        last_good = z.detach().clone()
        (z.grad,) = torch.autograd.grad(obj, [z])
        opt.step()
        if config.snapshot_every and (i + 1) % config.snapshot_every == 0:
            with torch.no_grad():
                snapshots.append((i + 1, render(z).detach().clone()))
    with torch.no_grad():
        image = render(z.detach())
    return GenerativePhaseResult(image.detach(), z.detach(), trajectory, snapshots)


def gidm_finetune_phase(
    g: torch.Tensor, model, sched: NoiseSchedule, x_init: torch.Tensor, eps: torch.Tensor, t: int, config: InversionConfig
) -> ReconstructionReport:
    """Pixel-space gradient matching warm-started at ``x_init`` for ``iters_finetune`` steps."""
    return _pixel_descent(
        g, model, sched, eps, t, x_init.to(_param_dtype(model)), config.iters_finetune, config, "gidm-finetune"
    )


def gidm_attack(
    g: torch.Tensor,
    model,
    sched: NoiseSchedule,
    eps: torch.Tensor,
    t: int,
    config: InversionConfig,
    prior=None,
) -> ReconstructionReport:
    """Generative phase followed by fine-tuning.

    The report keeps the generative output as ``intermediate`` and the
    snapshots of both phases. Fine-tuning snapshots are indexed by the
    overall iteration count.
    """
    gen = gidm_generative_phase(g, model, sched, eps, t, config, prior=prior)
    fine = gidm_finetune_phase(g, model, sched, gen.image, eps, t, config)
    n_gen = len(gen.trajectory)
    with torch.no_grad():
        prior_model = model if prior is None else prior
        latent0 = torch.randn(eps.shape, generator=_generator(config.seed), dtype=torch.float64)
        init = sample(prior_model, latent0.to(_param_dtype(model)), sched, config.sampler_steps, config.seed)
    return ReconstructionReport(
        attack="gidm",
        recovered=fine.recovered,
        trajectory=gen.trajectory + fine.trajectory,
        config=config.as_dict(),
        t_hat=int(t),
        eps_hat=eps.detach().clone(),
        init=init.detach(),
        intermediate=gen.image,
        snapshots=list(gen.snapshots) + [(n_gen + i, x) for i, x in fine.snapshots],
    )


def triple_optimize(
    objective: Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor],
    x_init: torch.Tensor,
    eps_init: torch.Tensor,
    t_vec_init: torch.Tensor,
    config: InversionConfig,
    iters: int | None = None,
    name: str = "gidm+",
) -> ReconstructionReport:
    """Coordinate three Adam optimizers over ``(x, eps, t_vec)``.

    ``objective(x, eps, w)`` receives the softmax weights ``w`` of ``t_vec``.
    ``x`` and ``t_vec`` step every iteration, ``eps`` only when
    ``epsilon_update_gate(i, S)`` holds. The report's ``t_hat`` is the hard
    ``infer_t`` of the final step vector.
    """
    iters = config.iters_total if iters is None else iters
    x = x_init.detach().clone().requires_grad_(True)
    eps = eps_init.detach().clone().requires_grad_(True)
    t_vec = t_vec_init.detach().clone().requires_grad_(True)
    opts = {
        "x": torch.optim.Adam([x], lr=config.eta_x),
        "eps": torch.optim.Adam([eps], lr=config.eta_eps),
        "t": torch.optim.Adam([t_vec], lr=config.eta_t),
    }
    state = InversionState(x_hat=x, eps_hat=eps, t_vec=t_vec, optimizers=opts)
    snapshots: list = []
    good = (x.detach().clone(), eps.detach().clone(), t_vec.detach().clone())

    def report(final=False):
        gx, ge, gt = (x.detach(), eps.detach(), t_vec.detach()) if final else good
        return ReconstructionReport(
            attack=name,
            recovered=gx.clone(),
            trajectory=list(state.trajectory),
            config=config.as_dict(),
            t_hat=infer_t(gt),
            eps_hat=ge.clone(),
            init=x_init.detach().clone(),
            snapshots=snapshots,
        )

    for i in range(iters):
        for opt in opts.values():
            opt.zero_grad(set_to_none=True)
        gate = epsilon_update_gate(i, config.S)
        eps.requires_grad_(gate)
        obj = objective(x, eps, torch.softmax(t_vec, dim=-1))
        val = float(obj.detach())
        _check_finite(val, i, name, report)
        state.trajectory.append(val)
        good = (x.detach().clone(), eps.detach().clone(), t_vec.detach().clone())
        targets = [x, t_vec, eps] if gate else [x, t_vec]
        grads = torch.autograd.grad(obj, targets)
        for var, grad in zip(targets, grads):
            var.grad = grad
        opts["x"].step()
        opts["t"].step()
        if gate:
            opts["eps"].step()
        state.i += 1
        _maybe_snapshot(snapshots, config.snapshot_every, i, x)
    return report(final=True)


def gidm_plus_attack(
    g: torch.Tensor,
    model,
    sched: NoiseSchedule,
    config: InversionConfig,
    shape: tuple[int, ...],
    x_init: torch.Tensor | None = None,
    eps_init: torch.Tensor | None = None,
    t_vec_init: torch.Tensor | None = None,
) -> ReconstructionReport:
    """Recover the image without knowing ``(eps, t)``.

    Starting points: image uniform over [-1, 1], noise standard normal and
    a length-``T`` step vector uniform on [0, 1). Any of them can be
    overridden.
    """
    dtype = _param_dtype(model)
    gen = _generator(config.seed)
    x0 = (torch.rand(shape, generator=gen, dtype=torch.float64) * 2.0 - 1.0).to(dtype)
    e0 = torch.randn(shape, generator=gen, dtype=torch.float64).to(dtype)
    v0 = torch.rand(sched.T, generator=gen, dtype=torch.float64).to(dtype)
    x0 = x0 if x_init is None else x_init.to(dtype)
    e0 = e0 if eps_init is None else eps_init.to(dtype)
    v0 = v0 if t_vec_init is None else t_vec_init.to(dtype)

    def objective(x, eps, w):
        return inversion_objective(x, eps, w, model, sched, g, config.metric)

    return triple_optimize(objective, x0, e0, v0, config)
