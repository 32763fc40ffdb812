"""YAML experiment configuration with line-numbered validation errors."""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .defenses import KINDS as DEFENSE_KINDS
from .defenses import DefenseSpec
from .federated import INIT_MODES
from .inversion import METRICS

OUTPUT_ROOT_ENV = "GIDM_OUTPUT_ROOT"
ATTACK_METHODS = ("baseline", "gidm", "gidm_plus")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    source: str = "synthetic"
    path: str | None = None
    n: int = 256
    size: int = 16
    channels: int = 1


@dataclass
class ScheduleSpec:
    T: int = 100
    beta_start: float | None = None
    beta_end: float | None = None


@dataclass
class ModelSpec:
    width: int = 32
    depth: int = 1
    emb_dim: int = 32
    levels: int = 1


@dataclass
class FederationSpec:
    K: int = 2
    R: int = 20
    eta: float = 0.05
    batch: int = 16


@dataclass
class CaptureSpec:
    round: int | None = None
    client: int = 1
    batch: int = 1


@dataclass
class AttackSpec:
    name: str
    method: str = "baseline"
    eps_t: str = "disclosed"
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

    def inversion_kwargs(self) -> dict:
        d = asdict(self)
        for key in ("name", "method", "eps_t"):
            d.pop(key)
        return d


@dataclass
class DefenseConfig:
    kind: str = "none"
    clip_bound: float = math.inf
    sigma: float = 0.0
    sparsity: float = 0.0
    prune_rate: float = 0.0
    seed: int = 0

    def to_spec(self) -> DefenseSpec:
        return DefenseSpec(**asdict(self))


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    output_dir: str = "results"
    scenario: str = "server_init"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    federation: FederationSpec = field(default_factory=FederationSpec)
    capture: CaptureSpec = field(default_factory=CaptureSpec)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    attacks: list[AttackSpec] = field(default_factory=list)
    source_path: str | None = None

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("source_path")
        return d

    @property
    def capture_round(self) -> int:
        return self.capture.round if self.capture.round is not None else max(1, self.federation.R // 2)

    def results_dir(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            return Path(root) / out
        if not out.is_absolute() and self.source_path:
            return Path(self.source_path).parent / out
        return out


_SECTIONS = {
    "dataset": DatasetSpec,
    "schedule": ScheduleSpec,
    "model": ModelSpec,
    "federation": FederationSpec,
    "capture": CaptureSpec,
    "defense": DefenseConfig,
}


def _line_map(node, prefix=(), out=None) -> dict:
    """Map key paths to 1-based source lines from a composed YAML node tree."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = prefix + (k.value,)
            out[path] = k.start_mark.line + 1
            _line_map(v, path, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            path = prefix + (i,)
            out[path] = v.start_mark.line + 1
            _line_map(v, path, out)
    return out


class _Checker:
    def __init__(self, source: str, lines: dict):
        self.source = source
        self.lines = lines

    def fail(self, path: tuple, msg: str):
        line = None
        p = path
        while p and line is None:
            line = self.lines.get(p)
            p = p[:-1]
        where = f"{self.source}:{line}" if line else self.source
        dotted = ".".join(str(x) for x in path) or "<root>"
        raise ConfigError(f"{where}: {dotted}: {msg}")

    def build(self, cls, data, path):
        if data is None:
            data = {}
        if not isinstance(data, dict):
            self.fail(path, f"expected a mapping, got {type(data).__name__}")
        known = set(cls.__dataclass_fields__)
        for key in data:
            if key not in known:
                self.fail(path + (key,), f"unknown key; allowed: {sorted(known)}")
        try:
            return cls(**data)
        except TypeError as exc:
            self.fail(path, str(exc))


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    try:
        node = yaml.compose(text)
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{source}{line}: invalid YAML: {exc}") from exc
    chk = _Checker(source, _line_map(node) if node is not None else {})
    if not isinstance(raw, dict):
        chk.fail((), "top level must be a mapping")

    top = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            top[key] = chk.build(_SECTIONS[key], value, (key,))
        elif key == "attacks":
            if not isinstance(value, list):
                chk.fail((key,), "expected a list of attacks")
            top[key] = [chk.build(AttackSpec, a, (key, i)) for i, a in enumerate(value)]
        elif key in ("name", "seed", "output_dir", "scenario"):
            top[key] = value
        else:
            chk.fail((key,), "unknown top-level key")
    cfg = ExperimentConfig(**top, source_path=None if source == "<string>" else source)
    validate(cfg, chk)
    return cfg


def validate(cfg: ExperimentConfig, chk: _Checker) -> None:
    if cfg.scenario not in INIT_MODES:
        chk.fail(("scenario",), f"must be one of {INIT_MODES}")
    if not isinstance(cfg.seed, int):
        chk.fail(("seed",), "must be an integer")
    ds = cfg.dataset
    if ds.source not in ("synthetic", "cifar"):
        chk.fail(("dataset", "source"), "must be 'synthetic' or 'cifar'")
    if ds.source == "cifar":
        base = Path(cfg.source_path).parent if cfg.source_path else Path(".")
        if not ds.path or not (base / ds.path).exists():
            chk.fail(("dataset", "path"), f"corpus file {ds.path!r} not found")
    if ds.size < 8 or ds.channels not in (1, 3) or ds.n < 2:
        chk.fail(("dataset",), "need size >= 8, channels in {1, 3} and n >= 2")
    if cfg.schedule.T < 1:
        chk.fail(("schedule", "T"), "must be >= 1")
    fed = cfg.federation
    if fed.K < 1 or fed.R < 1 or fed.eta < 0 or fed.batch < 1:
        chk.fail(("federation",), "need K >= 1, R >= 1, eta >= 0, batch >= 1")
    if not 1 <= cfg.capture.client <= fed.K:
        chk.fail(("capture", "client"), f"must lie in [1, {fed.K}]")
    if not 1 <= cfg.capture_round <= fed.R:
        chk.fail(("capture", "round"), f"must lie in [1, {fed.R}]")
    if cfg.capture.batch < 1:
        chk.fail(("capture", "batch"), "must be >= 1")
    if cfg.defense.kind not in DEFENSE_KINDS:
        chk.fail(("defense", "kind"), f"must be one of {DEFENSE_KINDS}")
    try:
        cfg.defense.to_spec()
    except ValueError as exc:
        chk.fail(("defense",), str(exc))
    if cfg.model.levels < 1 or cfg.model.depth < 0 or cfg.model.width < 1:
        chk.fail(("model",), "need width >= 1, depth >= 0, levels >= 1")
    if cfg.dataset.size % (2 ** cfg.model.levels):
        chk.fail(("model", "levels"), f"image size {cfg.dataset.size} not divisible by 2**levels")
    if cfg.attacks and cfg.capture.batch != 1:
        chk.fail(("capture", "batch"), "attacks reconstruct a single image; capture batch must be 1")
    names = set()
    for i, a in enumerate(cfg.attacks):
        path = ("attacks", i)
        if a.name in names:
            chk.fail(path + ("name",), f"duplicate attack name {a.name!r}")
        names.add(a.name)
        if a.method not in ATTACK_METHODS:
            chk.fail(path + ("method",), f"must be one of {ATTACK_METHODS}")
        if a.metric not in METRICS:
            chk.fail(path + ("metric",), f"must be one of {METRICS}")
        if a.eps_t not in ("disclosed", "random"):
            chk.fail(path + ("eps_t",), "must be 'disclosed' or 'random'")
        needs_disclosed = a.method == "gidm" or (a.method == "baseline" and a.eps_t == "disclosed")
        if needs_disclosed and cfg.scenario != "server_init":
            chk.fail(path, f"attack needs disclosed (eps, t) but scenario is {cfg.scenario!r}")
        if min(a.eta_x, a.eta_eps, a.eta_t) <= 0 or a.S < 1:
            chk.fail(path, "learning rates must be positive and S >= 1")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))
