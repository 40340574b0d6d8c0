"""Run configuration: dataclass, key=value config files, and overrides.

Config files are flat UTF-8 ``key=value`` lines with dotted sections
(``arch.N=2``). The same keys double as CLI flags (``--arch.N 2``).
The environment variable PHYSFORMER_SEED, when set, overrides the seed
from both file and flags.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .losses import ScheduleConfig
from .model import ArchConfig

__all__ = ["RunConfig", "CONFIG_KEYS", "parse_config_file", "apply_overrides", "finalize"]

SEED_ENV_VAR = "PHYSFORMER_SEED"


@dataclass
class RunConfig:
    """Everything one training or evaluation run needs."""

    arch: ArchConfig = field(default_factory=ArchConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sigma: float = 1.0
    lr: float = 1e-4
    weight_decay: float = 5e-5
    batch_size: int = 4
    epochs: int = 25
    seed: int = 0
    train_manifest: str = ""
    eval_manifest: str = ""
    clip_seconds: float = 160.0 / 30.0
    eval_clip_seconds: float = 10.0


def _triple(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.replace("x", ",").split(",") if p.strip()]
    if len(parts) != 3:
        raise ValueError(f"expected three comma-separated integers, got {text!r}")
    return tuple(parts)


# key -> (section attribute or None, field name, parser)
CONFIG_KEYS: dict[str, tuple[str | None, str, type | object]] = {
    "arch.N": ("arch", "num_blocks", int),
    "arch.h": ("arch", "num_heads", int),
    "arch.D": ("arch", "embed_dim", int),
    "arch.D_ff": ("arch", "ff_dim", int),
    "arch.theta": ("arch", "theta", float),
    "arch.tau": ("arch", "tau", float),
    "arch.tube": ("arch", "tube", _triple),
    "arch.input": ("arch", "input_shape", _triple),
    "schedule.alpha": ("schedule", "alpha", float),
    "schedule.beta0": ("schedule", "beta0", float),
    "schedule.eta": ("schedule", "eta", float),
    "sigma": (None, "sigma", float),
    "lr": (None, "lr", float),
    "weight_decay": (None, "weight_decay", float),
    "batch_size": (None, "batch_size", int),
    "epochs": (None, "epochs", int),
    "seed": (None, "seed", int),
    "train_manifest": (None, "train_manifest", str),
    "eval_manifest": (None, "eval_manifest", str),
    "clip_seconds": (None, "clip_seconds", float),
    "eval_clip_seconds": (None, "eval_clip_seconds", float),
}


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Return a new config with string key=value overrides applied."""
    arch_fields = {}
    schedule_fields = {}
    top_fields = {}
    for key, raw in overrides.items():
        if key not in CONFIG_KEYS:
            raise KeyError(f"unknown config key {key!r}")
        section, name, parse = CONFIG_KEYS[key]
        try:
            value = raw if parse is str else parse(raw)
        except ValueError as exc:
            raise ValueError(f"bad value for {key}: {raw!r} ({exc})") from exc
        if section == "arch":
            arch_fields[name] = value
        elif section == "schedule":
            schedule_fields[name] = value
        else:
            top_fields[name] = value
    if arch_fields:
        cfg = replace(cfg, arch=replace(cfg.arch, **arch_fields))
    if schedule_fields:
        cfg = replace(cfg, schedule=replace(cfg.schedule, **schedule_fields))
    if top_fields:
        cfg = replace(cfg, **top_fields)
    return cfg


def parse_config_file(path) -> RunConfig:
    """Read a flat key=value file into a RunConfig."""
    overrides: dict[str, str] = {}
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}:{line_no}: expected key=value, got {stripped!r}")
            key, _, value = stripped.partition("=")
            overrides[key.strip()] = value.strip()
    return apply_overrides(RunConfig(), overrides)


def finalize(cfg: RunConfig) -> RunConfig:
    """Sync the schedule length to the run and let the env seed win."""
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        cfg = replace(cfg, seed=int(env_seed))
    if cfg.schedule.total_epochs != cfg.epochs:
        cfg = replace(cfg, schedule=replace(cfg.schedule, total_epochs=cfg.epochs))
    return cfg
