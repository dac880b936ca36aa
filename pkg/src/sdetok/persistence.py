"""Experiment configuration, checkpoints, and artifact hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .lm import ARConfig
from .tokenizer import SDEConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4


class ConfigError(ValueError):
    pass


def deterministic_mode() -> bool:
    return os.environ.get("SDE_DETERMINISTIC", "") == "1"


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    warmup: int = 100
    total_steps: int = 2000
    batch_size: int = 8


@dataclass
class ProviderConfig:
    name: str = "class-embedding"
    num_classes: int = 10
    seed: int = 0
    manifest_path: str | None = None


@dataclass
class ExperimentConfig:
    tokenizer: SDEConfig = field(default_factory=SDEConfig)
    lm: ARConfig = field(default_factory=ARConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    seed: int = 0
    dataset_manifest: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            return cls(
                tokenizer=SDEConfig(**d.get("tokenizer", {})),
                lm=ARConfig(**d.get("lm", {})),
                optimizer=OptimizerConfig(**d.get("optimizer", {})),
                provider=ProviderConfig(**d.get("provider", {})),
                seed=int(d.get("seed", 0)),
                dataset_manifest=d.get("dataset_manifest"),
            )
        except TypeError as exc:
            raise ConfigError(f"bad config field: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path, check_paths: bool = True) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                cfg = cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if check_paths:
            for p in (cfg.dataset_manifest, cfg.provider.manifest_path):
                if p is not None and not Path(p).exists():
                    raise ConfigError(f"referenced path does not exist: {p}")
        return cfg

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(path: str | Path, *, step: int, seed: int,
                    config: ExperimentConfig,
                    model_state: dict, disc_state: dict | None = None,
                    extra: dict | None = None) -> None:
    """Parameter archive plus a JSON metadata sidecar (config, step, seed,
    content hash)."""
    path = Path(path)
    payload = {
        "model_state": model_state,
        "disc_state": disc_state,
        "step": step,
        "seed": seed,
        "config": config.to_dict(),
    }
    if extra:
        payload.update(extra)
    torch.save(payload, path)
    sidecar = {
        "step": step,
        "seed": seed,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "content_sha256": _file_sha256(path),
    }
    with open(path.with_suffix(path.suffix + ".json"), "w") as fh:
        json.dump(sidecar, fh, indent=2)


def load_checkpoint(path: str | Path) -> dict:
    try:
        return torch.load(path, map_location="cpu", weights_only=False)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc


def write_json_report(path: str | Path, payload: dict,
                      config: ExperimentConfig | None = None,
                      seed: int | None = None) -> None:
    out = dict(payload)
    if config is not None:
        out["config_hash"] = config.config_hash()
    if seed is not None:
        out["seed"] = seed
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2)
