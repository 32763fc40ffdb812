"""In-process simulation of federated DDPM training with summed client gradients.

Each round, every client computes the noise-prediction loss gradient on one
locally drawn batch. The server sums the reports in client-id order and
takes a plain gradient step ``theta <- theta - eta * sum_k g_k``.

Who draws the noise ``eps`` and step ``t`` is controlled by
``FederationConfig.init_mode``:

``server_init``
    the server draws them, so they are part of the server's view of the round.
``client_private``
    each client draws them locally and never discloses them.

A capture hook hands one client's report to the adversary verbatim.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .defenses import DefenseSpec, apply_defense
from .diffusion import NoiseSchedule, check_step, ddpm_loss, loss_gradient, save_checkpoint

log = logging.getLogger(__name__)

INIT_MODES = ("server_init", "client_private")
CAPTURE_VERSION = 1


def derive_seed(master: int, *path) -> int:
    """Stable 63-bit seed for a named stream below ``master``.

    ``derive_seed(s, "client", 2, "round", 7)`` depends only on its arguments,
    so adding new streams never shifts existing ones.
    """
    key = json.dumps([int(master), *[str(p) for p in path]]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big") >> 1


@dataclass(frozen=True)
class FederationConfig:
    K: int = 2
    R: int = 20
    eta: float = 0.05
    init_mode: str = "server_init"
    seed: int = 0
    batch: int = 8

    def __post_init__(self):
        if self.K < 1 or self.R < 1:
            raise ValueError("need K >= 1 and R >= 1")
        if not self.eta >= 0:
            raise ValueError("eta must be non-negative")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


@dataclass
class GradientReport:
    client_id: int
    round_index: int
    gradient: torch.Tensor
    disclosed_eps: torch.Tensor | None = None
    disclosed_t: int | None = None
    # simulator telemetry only; never serialized
    loss: float | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if (self.disclosed_eps is None) != (self.disclosed_t is None):
            raise ValueError("disclosed_eps and disclosed_t must be given together")


class ClientDataset:
    """A client's private images with a seeded per-round batch draw.

    Deliberately unpicklable: private images must not end up in any
    server-side artifact.
    """

    def __init__(self, images: torch.Tensor, client_id: int, seed: int = 0):
        if images.ndim != 4 or images.shape[0] < 1:
            raise ValueError("images must be a non-empty (N, C, H, W) tensor")
        self.images = images
        self.client_id = int(client_id)
        self.seed = int(seed)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def draw(self, round_index: int, batch: int) -> torch.Tensor:
        gen = torch.Generator().manual_seed(derive_seed(self.seed, "client", self.client_id, "batch", round_index))
        idx = torch.randint(len(self), (batch,), generator=gen)
        return self.images[idx]

    def draw_noise_and_step(self, round_index: int, shape, T: int) -> tuple[torch.Tensor, int]:
        gen = torch.Generator().manual_seed(derive_seed(self.seed, "client", self.client_id, "eps_t", round_index))
        eps = torch.randn(shape, generator=gen)
        t = int(torch.randint(1, T + 1, (1,), generator=gen))
        return eps, t

    def __getstate__(self):
        raise TypeError("ClientDataset holds private data and cannot be serialized")


def server_draw(seed: int, client_id: int, round_index: int, shape, T: int) -> tuple[torch.Tensor, int]:
    """Server-side draw of ``(eps, t)`` for one client and round (independent per client)."""
    gen = torch.Generator().manual_seed(derive_seed(seed, "server", client_id, "eps_t", round_index))
    eps = torch.randn(shape, generator=gen)
    t = int(torch.randint(1, T + 1, (1,), generator=gen))
    return eps, t


def client_compute_gradient(
    client: ClientDataset,
    model,
    sched: NoiseSchedule,
    eps: torch.Tensor | None = None,
    t: int | None = None,
    batch: int = 1,
    round_index: int = 1,
) -> GradientReport:
    """One client's report for a round.

    Passing ``eps`` and ``t`` means they came from the server and are echoed
    back as disclosed fields. Leaving both as ``None`` makes the client draw
    them privately; the report then carries only the gradient.
    """
    x0 = client.draw(round_index, batch)
    dtype = next(model.parameters()).dtype
    x0 = x0.to(dtype)
    shape = (1, *x0.shape[1:])
    if (eps is None) != (t is None):
        raise ValueError("supply both eps and t (server_init) or neither (client_private)")
    disclosed = eps is not None
    if disclosed:
        if tuple(eps.shape) not in (tuple(shape), tuple(x0.shape)):
            raise ValueError(f"eps shape {tuple(eps.shape)} does not match image shape {shape}")
        check_step(t, sched.T)
    else:
        eps, t = client.draw_noise_and_step(round_index, shape, sched.T)
    eps = eps.to(dtype)
    eps_b = eps.expand_as(x0)
    g = loss_gradient(model, x0, eps_b, t, sched)
    with torch.no_grad():
        loss = float(ddpm_loss(model, x0, eps_b, t, sched))
    return GradientReport(
        client_id=client.client_id,
        round_index=round_index,
        gradient=g,
        disclosed_eps=eps.clone() if disclosed else None,
        disclosed_t=int(t) if disclosed else None,
        loss=loss,
    )


def aggregate(reports: list[GradientReport]) -> torch.Tensor:
    """Elementwise sum of the reports' gradients, reduced in client-id order."""
    if not reports:
        raise ValueError("no reports to aggregate")
    rounds = {r.round_index for r in reports}
    if len(rounds) > 1:
        raise ValueError(f"reports from mixed rounds {sorted(rounds)}")
    lengths = {r.gradient.numel() for r in reports}
    if len(lengths) > 1:
        raise ValueError(f"gradient length mismatch {sorted(lengths)}")
    ordered = sorted(reports, key=lambda r: r.client_id)
    total = ordered[0].gradient.clone()
    for r in ordered[1:]:
        total += r.gradient
    return total


def apply_update(model, g: torch.Tensor, eta: float) -> None:
    """``theta <- theta - eta * g`` with ``g`` in canonical parameter order."""
    with torch.no_grad():
        offset = 0
        for p in model.parameters():
            n = p.numel()
            p.sub_(eta * g[offset : offset + n].view_as(p))
            offset += n
    if offset != g.numel():
        raise ValueError(f"gradient length {g.numel()} does not match parameter count {offset}")


def run_round(
    config: FederationConfig,
    model,
    clients: list[ClientDataset],
    sched: NoiseSchedule,
    round_index: int,
    capture: int | None = None,
    defense: DefenseSpec | None = None,
    telemetry: list | None = None,
    capture_batch: int | None = None,
):
    """One round of federated training. Returns ``(model, captured report or None)``.

    ``capture_batch`` sets the captured client's batch size for this round
    (attacks reconstruct single images); other clients use ``config.batch``.

    ``defense`` is applied to every report before the server touches it, so a
    captured report is exactly what the adversary would observe.
    """
    if not 1 <= round_index <= config.R:
        raise ValueError(f"round_index {round_index} outside [1, {config.R}]")
    if capture is not None and not 1 <= capture <= len(clients):
        raise ValueError(f"capture id {capture} outside [1, {len(clients)}]")
    start = time.perf_counter()
    reports = []
    for client in sorted(clients, key=lambda c: c.client_id):
        if config.init_mode == "server_init":
            eps, t = server_draw(config.seed, client.client_id, round_index, (1, *client.image_shape), sched.T)
        else:
            eps, t = None, None
        batch = config.batch
        if capture_batch is not None and client.client_id == capture:
            batch = capture_batch
        rep = client_compute_gradient(client, model, sched, eps, t, batch, round_index)
        if defense is not None and defense.kind != "none":
            # fresh noise/mask per client and round, still fixed by the defense seed
            seed = derive_seed(defense.seed, "defense", client.client_id, round_index)
            rep.gradient = apply_defense(rep.gradient, dataclasses.replace(defense, seed=seed))
        reports.append(rep)
    captured = next((r for r in reports if r.client_id == capture), None) if capture is not None else None
    if captured is not None:
        captured = GradientReport(
            client_id=captured.client_id,
            round_index=captured.round_index,
            gradient=captured.gradient.clone(),
            disclosed_eps=None if captured.disclosed_eps is None else captured.disclosed_eps.clone(),
            disclosed_t=captured.disclosed_t,
            loss=captured.loss,
        )
    apply_update(model, aggregate(reports), config.eta)
    if telemetry is not None:
        losses = {str(r.client_id): r.loss for r in reports}
        telemetry.append(
            {
                "round": round_index,
                "client_loss": losses,
                "global_loss": float(np.mean([r.loss for r in reports])),
                "wall_time": time.perf_counter() - start,
            }
        )
    return model, captured


def parameter_hash(model) -> str:
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def train_federated(
    config: FederationConfig,
    model,
    clients: list[ClientDataset],
    sched: NoiseSchedule,
    log_path=None,
    checkpoint_path=None,
    capture: tuple[int, int] | None = None,
    capture_path=None,
    defense: DefenseSpec | None = None,
    probe=None,
    capture_batch: int | None = None,
):
    """Run ``config.R`` rounds; returns the model, plus the captured report when ``capture`` is set.

    ``capture`` is ``(round_index, client_id)``. The pre-update parameters of
    that round are what the report was computed against, so they are saved
    next to ``capture_path`` as ``<stem>.model.pt``.

    ``probe`` is an optional ``(x0, eps, t)`` held-out batch whose loss is
    logged each round as ``probe_loss``.
    """
    telemetry: list[dict] = []
    captured = None
    log_file = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "a")
    try:
        for r in range(1, config.R + 1):
            cap_client = capture[1] if capture is not None and capture[0] == r else None
            if cap_client is not None and capture_path is not None:
                save_checkpoint(Path(capture_path).with_suffix(".model.pt"), model, sched, {"round": r})
            _, rep = run_round(config, model, clients, sched, r, cap_client, defense, telemetry, capture_batch)
            if not math.isfinite(telemetry[-1]["global_loss"]):
                raise FloatingPointError(f"round {r}: training loss is not finite (lower eta?)")
            if rep is not None:
                captured = rep
                if capture_path is not None:
                    save_capture(capture_path, rep, model.parameter_order(), defense)
            if probe is not None:
                with torch.no_grad():
                    telemetry[-1]["probe_loss"] = float(ddpm_loss(model, *probe, sched))
            if log_file is not None:
                log_file.write(json.dumps(telemetry[-1], sort_keys=True) + "\n")
            if r == 1 or r == config.R or r % max(1, config.R // 10) == 0:
                log.info("round %d/%d global loss %.4f", r, config.R, telemetry[-1]["global_loss"])
    finally:
        if log_file is not None:
            log_file.close()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, sched, {"rounds": config.R, "param_hash": parameter_hash(model)})
    model.telemetry = telemetry
    return (model, captured) if capture is not None else model


def save_capture(path, report: GradientReport, parameter_order: list[str], defense: DefenseSpec | None = None) -> Path:
    """Write the adversary's observation of one report.

    The file is an ``.npz`` with a JSON ``header`` (format version, client,
    round, disclosed step, parameter manifest, applied defense), the
    ``gradient`` and, in server-init mode, ``disclosed_eps``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": CAPTURE_VERSION,
        "client_id": report.client_id,
        "round_index": report.round_index,
        "disclosed_t": report.disclosed_t,
        "parameter_order": parameter_order,
        "defense": (defense.as_dict() if defense is not None else DefenseSpec().as_dict()),
        "dtype": str(report.gradient.dtype).replace("torch.", ""),
    }
    arrays = {"header": np.array(json.dumps(header, sort_keys=True)), "gradient": report.gradient.cpu().numpy()}
    if report.disclosed_eps is not None:
        arrays["disclosed_eps"] = report.disclosed_eps.cpu().numpy()
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_capture(path) -> tuple[GradientReport, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format_version") != CAPTURE_VERSION:
            raise ValueError(f"unsupported capture version {header.get('format_version')!r}")
        eps = torch.from_numpy(data["disclosed_eps"].copy()) if "disclosed_eps" in data else None
        report = GradientReport(
            client_id=header["client_id"],
            round_index=header["round_index"],
            gradient=torch.from_numpy(data["gradient"].copy()),
            disclosed_eps=eps,
            disclosed_t=header["disclosed_t"],
        )
    return report, header
