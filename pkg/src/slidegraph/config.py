"""Run configuration: one YAML file covering every stage's knobs.

Unknown keys are rejected. ``config_hash`` fingerprints the fully resolved
configuration (defaults filled in, seed included); every artifact file
embeds the hash of the config that produced it so mixed runs are caught at
evaluation time.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import yaml

from .validation import ContractError, require

ENV_CONFIG = "SLIDEGRAPH_CONFIG"


@dataclass(frozen=True)
class CorpusSection:
    n_slides: int = 150
    n_classes: int = 3
    width: int = 192
    height: int = 192
    val_fraction: float = 0.2
    color_jitter: float = 12.0
    noise_amplitude: int = 5


@dataclass(frozen=True)
class PatchSection:
    size: int = 32
    luminance_threshold: float = 0.85
    min_region_px: int = 64
    min_tissue_fraction: float = 0.35


@dataclass(frozen=True)
class AugmentSection:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    contrast: tuple[float, float] = (0.8, 1.2)
    p_blur: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 1.1)


@dataclass(frozen=True)
class SslSection:
    hidden: tuple[int, ...] = (512, 256)
    tap_small: int = 64
    tap_large: int = 256
    projection: int = 64
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-6
    temperature: float = 0.2
    momentum: float = 0.99
    queue_capacity: int = 4096
    augment: AugmentSection = field(default_factory=AugmentSection)


@dataclass(frozen=True)
class GraphSection:
    k: int = 8
    self_loops: bool = True


@dataclass(frozen=True)
class GcnSection:
    layers: tuple[int, ...] = (128, 128)
    layer_kinds: tuple[str, ...] | None = None
    head: tuple[int, ...] = (64,)
    epochs: int = 30
    lr: float = 1e-4
    weight_decay: float = 1e-6


@dataclass(frozen=True)
class BaselineSection:
    bag_size: int = 36
    hidden: tuple[int, ...] = (64,)
    epochs: int = 30
    lr: float = 1e-3
    weight_decay: float = 1e-6


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    corpus: CorpusSection = field(default_factory=CorpusSection)
    patch: PatchSection = field(default_factory=PatchSection)
    ssl: SslSection = field(default_factory=SslSection)
    graph: GraphSection = field(default_factory=GraphSection)
    gcn: GcnSection = field(default_factory=GcnSection)
    baseline: BaselineSection = field(default_factory=BaselineSection)


def _build(cls, data: dict, path: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ContractError(
            f"unknown config key(s) {sorted(unknown)} under '{path or 'top level'}'"
        )
    kwargs = {}
    for name, value in data.items():
        if name in _SECTION_TYPES:
            require(isinstance(value, dict), f"'{path}{name}' must be a mapping")
            kwargs[name] = _build(_SECTION_TYPES[name], value, f"{path}{name}.")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_SECTION_TYPES = {
    "corpus": CorpusSection,
    "patch": PatchSection,
    "ssl": SslSection,
    "graph": GraphSection,
    "gcn": GcnSection,
    "baseline": BaselineSection,
    "augment": AugmentSection,
}


def load_config(path=None, seed_override: int | None = None) -> RunConfig:
    """Load a YAML run config; ``None`` falls back to the ``SLIDEGRAPH_CONFIG``
    environment variable and then to built-in defaults."""
    if path is None:
        path = os.environ.get(ENV_CONFIG) or None
    if path is None:
        config = RunConfig()
    else:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        require(isinstance(data, dict), f"{path}: config must be a mapping")
        config = _build(RunConfig, data, "")
    if seed_override is not None:
        config = dataclasses.replace(config, seed=int(seed_override))
    return config


def resolved_dict(config: RunConfig) -> dict:
    def convert(value):
        if dataclasses.is_dataclass(value):
            return {f.name: convert(getattr(value, f.name))
                    for f in dataclasses.fields(value)}
        if isinstance(value, tuple):
            return [convert(v) for v in value]
        return value

    return convert(config)


def config_hash(config: RunConfig) -> str:
    canonical = json.dumps(resolved_dict(config), sort_keys=True,
                           separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def dump_resolved(config: RunConfig, path) -> None:
    payload = {"config": resolved_dict(config), "config_hash": config_hash(config)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
