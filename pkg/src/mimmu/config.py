"""Experiment configuration: one JSON document, dotted-path overrides, labelled seeds."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import Any, List, Optional, Tuple

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Config cannot be parsed or fails validation."""


@dataclass
class WorldSpec:
    kind: str = "grid"
    n_a: int = 4
    n_b: int = 5
    d: int = 2
    spacing: float = 6.0
    sigma: float = 0.5
    near_spacing: float = 0.75

    def validate(self):
        if self.kind not in ("grid", "fine_grained"):
            raise ConfigError(f"world.kind must be grid or fine_grained, got {self.kind!r}")
        if self.n_a < 2 or self.n_b < 2 or self.d < 2:
            raise ConfigError("world needs n_a >= 2, n_b >= 2 and d >= 2")
        if self.spacing <= 0 or self.sigma <= 0 or self.near_spacing <= 0:
            raise ConfigError("world spacings and sigma must be positive")


@dataclass
class ScheduleSpec:
    kind: str = "cosine"
    T: int = 200
    logsnr_max: float = 10.0
    logsnr_min: float = -10.0


@dataclass
class ArchSpec:
    hidden: List[int] = field(default_factory=lambda: [128, 128, 128])
    time_dim: int = 32
    emb_dim: int = 16
    init_seed_label: str = "init"


@dataclass
class TrainSpec:
    epochs: int = 60
    steps_per_epoch: int = 200
    batch_size: int = 256
    lr: float = 3e-3
    lr_final: float = 2e-5
    p_drop_a: float = 0.3
    p_drop_b: float = 0.3


@dataclass
class UnlearnSpec:
    method: str = "mim_mu"
    targets: List[int] = field(default_factory=lambda: [1])
    steps: int = 3000
    lr: float = 1e-4
    batch_size: int = 32
    ema_decay: float = 0.999
    gamma: float = 2.0
    distill_target: str = "teacher_uncond"
    refresh_every: int = 0
    refresh_size: int = 80
    trainable: str = "all"
    forget_per_b: int = 16
    anchor: Optional[List[Optional[int]]] = None
    retain_per_cell: int = 16


@dataclass
class EvalSpec:
    n: int = 200
    n_seeds: int = 5
    gamma: float = 2.0
    sw_projections: int = 128
    sw_n: int = 2000
    mi_n: int = 100
    mi_n_eps: int = 8
    mi_nodes: int = 64


@dataclass
class MISpec:
    n_x: int = 200
    n_eps: int = 32
    nodes: int = 64
    density_points: int = 100


@dataclass
class ProtocolSpec:
    sequential_targets: List[int] = field(default_factory=lambda: [1, 2, 3])
    relearn_data: str = "random_subset"
    relearn_epochs: int = 8
    relearn_steps_per_epoch: int = 100
    relearn_lr: float = 1e-4
    relearn_batch_size: int = 64
    breakdown_steps: List[int] = field(default_factory=lambda: [0, 250, 500, 1000, 2000, 3000])
    breakdown_methods: List[str] = field(default_factory=lambda: ["mim_mu", "sdd"])


@dataclass
class ExperimentConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    out: Optional[str] = None
    world: WorldSpec = field(default_factory=WorldSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    architecture: ArchSpec = field(default_factory=ArchSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    unlearn: UnlearnSpec = field(default_factory=UnlearnSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)
    mi: MISpec = field(default_factory=MISpec)
    protocol: ProtocolSpec = field(default_factory=ProtocolSpec)

    def validate(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"config version {self.version!r} is not supported (expected {CONFIG_VERSION})")
        self.world.validate()
        targets = self.unlearn.targets
        if not targets or len(set(targets)) != len(targets):
            raise ConfigError("unlearn.targets must be non-empty and free of duplicates")
        for a in targets + self.protocol.sequential_targets:
            if not 0 <= a < self.world.n_a:
                raise ConfigError(f"target {a} outside 0..{self.world.n_a - 1}")
        if self.protocol.relearn_data not in ("class_wise", "random_subset"):
            raise ConfigError("protocol.relearn_data must be class_wise or random_subset")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical_json(self) -> str:
        """Serialisation used for the config digest; ``out`` is excluded so relocating a run keeps its digest."""
        body = self.to_dict()
        body.pop("out")
        return json.dumps(body, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def _coerce(value: Any, typ: Any, path: str):
    if is_dataclass(typ):
        if not isinstance(value, dict):
            raise ConfigError(f"{path} must be an object")
        return _build(typ, value, path)
    return value


def _build(cls, doc: dict, path: str = ""):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys at {path or '<root>'}: {', '.join(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, f in known.items():
        sub = getattr(defaults, name)
        if name not in doc:
            continue
        kwargs[name] = _coerce(doc[name], type(sub) if is_dataclass(sub) else None, f"{path}{name}")
        if not is_dataclass(sub) and sub is not None and doc[name] is not None:
            kwargs[name] = _check_scalar(doc[name], sub, f"{path}{name}")
    return cls(**kwargs)


def _check_scalar(value, default, path):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path} expects {type(default).__name__}, got {value!r}")
    return value


def parse_override(text: str) -> Tuple[List[str], Any]:
    """``a.b.c=value``; the value is read as JSON and falls back to a bare string."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(doc: dict, overrides) -> dict:
    for text in overrides:
        keys, value = parse_override(text)
        node = doc
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} descends into a non-object")
        node[keys[-1]] = value
    return doc


def load_config(path=None, overrides=(), seed: Optional[int] = None, out: Optional[str] = None) -> ExperimentConfig:
    doc: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config root must be an object")
    doc = apply_overrides(doc, overrides)
    if seed is not None:
        doc["seed"] = seed
    if out is not None:
        doc["out"] = out
    try:
        return _build(ExperimentConfig, doc).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def derive_seed(global_seed: int, label: str) -> int:
    """32-bit seed for one random consumer, fixed by the global seed and a label."""
    h = hashlib.sha256(f"{int(global_seed)}/{label}".encode()).digest()
    return int.from_bytes(h[:4], "little")
