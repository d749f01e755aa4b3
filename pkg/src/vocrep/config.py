"""Run configuration: named profiles, file overrides, canonical dumps."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace

from .context import ContextConfig
from .encoder import EncoderConfig
from .finetune import FinetuneConfig
from .model import ArchitectureConfig
from .pretrain import PretrainConfig
from .quantizer import QuantizerConfig

PROFILES = ("base", "desk")


@dataclass(frozen=True)
class RunConfig:
    profile: str
    seed: int
    deterministic: bool
    jobs: int
    folds: int
    arch: ArchitectureConfig
    pretrain: PretrainConfig
    finetune: FinetuneConfig

    def to_dict(self) -> dict:
        return {
            "profile": self.profile,
            "seed": self.seed,
            "deterministic": self.deterministic,
            "jobs": self.jobs,
            "folds": self.folds,
            "encoder": self.arch.encoder.to_dict(),
            "quantizer": self.arch.quantizer.to_dict(),
            "context": self.arch.context.to_dict(),
            "pretrain": self.pretrain.to_dict(),
            "finetune": self.finetune.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def fingerprint(self) -> str:
        compact = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(compact.encode("utf-8")).hexdigest()[:16]


def profile(name: str, seed: int = 0, deterministic: bool = True, jobs: int = 1) -> RunConfig:
    """Named configuration profiles.

    `base` carries the full-scale training settings; `desk` preserves the
    same pipeline structure at sizes that train in CI minutes.
    """
    if name == "base":
        return RunConfig(
            profile="base", seed=seed, deterministic=deterministic, jobs=jobs,
            folds=10,
            arch=ArchitectureConfig(
                encoder=EncoderConfig(),
                quantizer=QuantizerConfig(),
                context=ContextConfig(),
            ),
            pretrain=PretrainConfig(),
            finetune=FinetuneConfig(),
        )
    if name == "desk":
        return RunConfig(
            profile="desk", seed=seed, deterministic=deterministic, jobs=jobs,
            folds=10,
            arch=ArchitectureConfig(
                encoder=EncoderConfig(channels=4),
                quantizer=QuantizerConfig(entries_per_group=16, entry_dim=4, output_dim=8),
                context=ContextConfig(num_blocks=2, model_dim=8, inner_dim=32,
                                      num_heads=2, pos_conv_kernel=9, pos_conv_groups=2,
                                      dropout=0.0),
            ),
            pretrain=PretrainConfig(total_updates=300, peak_lr=2e-3, batch_clips=8,
                                    num_negatives=20, chunk_s=1.0, min_tail_s=0.2),
            finetune=FinetuneConfig(peak_lr=1e-3),
        )
    raise ValueError(f"unknown profile {name!r}; expected one of {PROFILES}")


def _merge(cfg: RunConfig, doc: dict) -> RunConfig:
    """Apply a JSON override document section by section."""
    def updated(dc, key, from_dict):
        if key not in doc:
            return dc
        merged = {**dc.to_dict(), **doc[key]}
        return from_dict(merged)

    arch = ArchitectureConfig(
        encoder=updated(cfg.arch.encoder, "encoder", EncoderConfig.from_dict),
        quantizer=updated(cfg.arch.quantizer, "quantizer", QuantizerConfig.from_dict),
        context=updated(cfg.arch.context, "context", ContextConfig.from_dict),
    )
    return replace(
        cfg,
        seed=doc.get("seed", cfg.seed),
        deterministic=doc.get("deterministic", cfg.deterministic),
        jobs=doc.get("jobs", cfg.jobs),
        folds=doc.get("folds", cfg.folds),
        arch=arch,
        pretrain=updated(cfg.pretrain, "pretrain", PretrainConfig.from_dict),
        finetune=updated(cfg.finetune, "finetune", FinetuneConfig.from_dict),
    )


def load_config(path=None, profile_name=None, seed=None, deterministic=None,
                jobs=None) -> RunConfig:
    """Resolve profile defaults, then file overrides, then explicit flags."""
    doc = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    name = profile_name or doc.get("profile", "desk")
    cfg = profile(name)
    cfg = _merge(cfg, doc)
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if deterministic is not None:
        overrides["deterministic"] = deterministic
    if jobs is not None:
        overrides["jobs"] = jobs
    return _merge(cfg, overrides) if overrides else cfg
