"""JSON run configuration with strict validation (unknown keys are rejected)."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .classic_aug import POLICY_REGISTRY, AugPolicy


class ConfigError(ValueError):
    pass


@dataclass
class ScenesSection:
    height: int = 64
    width: int = 64
    min_objects: int = 2
    max_objects: int = 5
    n_train: int = 512
    n_test: int = 128


@dataclass
class DiffusionSection:
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.04
    steps: int = 2000
    batch_size: int = 8
    lr: float = 2e-3
    ema_decay: float | None = None
    crop: int = 32
    start_t: int | None = None
    inpaint_batch: int = 128


@dataclass
class MaskProviderSection:
    kind: str = "oracle"
    min_area: int = 8


@dataclass
class SegmenterSection:
    epochs: int = 40
    batch_size: int = 8
    lr: float = 1e-3


@dataclass
class RunConfig:
    seed: int = 0
    scenes: ScenesSection = field(default_factory=ScenesSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    mask_provider: MaskProviderSection = field(default_factory=MaskProviderSection)
    policies: list = field(default_factory=lambda: [{"kind": k} for k in POLICY_REGISTRY])
    k: int = 3
    segmenter: SegmenterSection = field(default_factory=SegmenterSection)

    def aug_policies(self) -> list[AugPolicy]:
        return [AugPolicy(p["kind"], dict(p.get("params", {})), self.seed) for p in self.policies]

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {"scenes": ScenesSection, "diffusion": DiffusionSection,
             "mask_provider": MaskProviderSection, "segmenter": SegmenterSection}


def _check_type(where: str, value, default):
    if default is None or value is None:
        if value is not None and not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number or null")
        return
    if isinstance(default, bool) or isinstance(value, bool):
        if type(value) is not type(default):
            raise ConfigError(f"{where}: expected {type(default).__name__}")
        return
    if isinstance(default, int) and not isinstance(value, int):
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if isinstance(default, float) and not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    proto = cls()
    for k, v in data.items():
        _check_type(f"{where}.{k}", v, getattr(proto, k))
    return cls(**{k: (float(v) if isinstance(getattr(proto, k), float) and v is not None else v)
                  for k, v in data.items()})


def parse_config(data: dict) -> RunConfig:
    """Validate a decoded JSON object and build a :class:`RunConfig`."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    top = {f.name for f in fields(RunConfig)}
    unknown = set(data) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    kw = {}
    for name, cls in _SECTIONS.items():
        if name in data:
            kw[name] = _build(cls, data[name], name)
    for name in ("seed", "k"):
        if name in data:
            if not isinstance(data[name], int) or isinstance(data[name], bool):
                raise ConfigError(f"{name}: expected an integer")
            kw[name] = data[name]
    if "policies" in data:
        kw["policies"] = data["policies"]
    cfg = RunConfig(**kw)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.seed < 0:
        raise ConfigError("seed must be >= 0")
    if cfg.k < 1:
        raise ConfigError("k must be >= 1")
    s = cfg.scenes
    if s.n_train < 1 or s.n_test < 1:
        raise ConfigError("scenes.n_train and scenes.n_test must be >= 1")
    if s.height % 4 or s.width % 4:
        raise ConfigError("scene height and width must be multiples of 4")
    if not 1 <= s.min_objects <= s.max_objects:
        raise ConfigError("scenes: need 1 <= min_objects <= max_objects")
    d = cfg.diffusion
    if d.T < 1 or not 0 < d.beta_start <= d.beta_end < 1:
        raise ConfigError("diffusion: invalid schedule")
    if d.steps < 0 or d.batch_size < 1 or d.lr <= 0 or d.crop < 4 or d.crop % 4 or d.inpaint_batch < 1:
        raise ConfigError("diffusion: invalid training parameters")
    if d.ema_decay is not None and not 0 < d.ema_decay < 1:
        raise ConfigError("diffusion.ema_decay must lie in (0, 1)")
    if d.start_t is not None and not 1 <= d.start_t <= d.T:
        raise ConfigError("diffusion.start_t must lie in [1, T]")
    if cfg.mask_provider.kind not in ("oracle", "heuristic"):
        raise ConfigError("mask_provider.kind must be 'oracle' or 'heuristic'")
    if cfg.mask_provider.min_area < 1:
        raise ConfigError("mask_provider.min_area must be >= 1")
    g = cfg.segmenter
    if g.epochs < 0 or g.batch_size < 1 or g.lr <= 0:
        raise ConfigError("segmenter: invalid parameters")
    if not isinstance(cfg.policies, list) or not cfg.policies:
        raise ConfigError("policies must be a non-empty list")
    seen = set()
    for p in cfg.policies:
        if not isinstance(p, dict) or set(p) - {"kind", "params"} or "kind" not in p:
            raise ConfigError(f"policy entries need 'kind' and optional 'params': {p!r}")
        if p["kind"] in seen:
            raise ConfigError(f"policy {p['kind']!r} listed twice")
        seen.add(p["kind"])
        try:
            AugPolicy(p["kind"], dict(p.get("params", {})), cfg.seed)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"policy {p['kind']!r}: {exc}") from exc


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(data)
