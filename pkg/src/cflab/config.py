"""Run configuration: flat TOML key/value file plus override maps.

Every knob of a run lives in one flat namespace so sweeps can be expressed
as small override sets; unknown keys are rejected to guard against silent
typos. All randomness flows from ``seed`` through named child streams
(data / init / train / sample), so enabling one stage never perturbs
another's stream.
"""

from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml

from .errors import ConfigError

_STREAMS = {"data": 0, "init": 1, "train": 2, "sample": 3}

PHASES = ("pretext", "warmup_removal", "warmup_insertion", "cycleflow")
_PHASE_INDEX = {p: i for i, p in enumerate(PHASES)}


@dataclass
class RunConfig:
    seed: int = 0
    scale: float = 1.0
    corpus_dir: str = "runs/corpus"
    checkpoint_dir: str = "runs/checkpoints"
    report_dir: str = "runs/reports"
    # scenes
    height: int = 64
    width: int = 64
    paired_train: int = 3000
    paired_test: int = 300
    unpaired_train: int = 5000
    # model
    patch: int = 4
    token_dim: int = 32
    hidden: tuple = (160, 160)
    lora_rank: int = 4
    lora_alpha: float = 8.0
    nonlin: str = "gelu"
    # augmentation
    aug_radius_lo: int = 0
    aug_radius_hi: int = 2
    aug_jitter: float = 0.15
    aug_shape_add: int = 1
    aug_shape_remove: int = 1
    aug_size_lo: float = 2.0
    aug_size_hi: float = 4.0
    insertion_mode: str = "bbox"
    # training
    batch_size: int = 16
    pretext_steps: int = 2000
    warmup_steps: int = 3500
    cycleflow_steps: int = 900
    pretext_lr: float = 1e-3
    warmup_lr: float = 3e-4
    cycleflow_lr: float = 3e-4
    gamma: float = 1.5
    nfe: int = 28
    # evaluation
    eval_scenes: int = 64

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.nfe < 1:
            raise ConfigError(f"nfe must be >= 1, got {self.nfe}")
        if self.scale <= 0:
            raise ConfigError(f"scale must be > 0, got {self.scale}")

    # -- derived -----------------------------------------------------------

    def scaled(self, n) -> int:
        return max(1, int(round(n * self.scale)))

    def split_sizes(self) -> dict:
        return {
            "paired_train": self.scaled(self.paired_train),
            "paired_test": self.scaled(self.paired_test),
            "unpaired_train": self.scaled(self.unpaired_train),
        }

    def child_seed(self, stream, *path) -> np.random.SeedSequence:
        """Named, order-independent child stream of the root seed."""
        if stream not in _STREAMS:
            raise ConfigError(f"unknown seed stream {stream!r}")
        key = (_STREAMS[stream],) + tuple(int(p) for p in path)
        return np.random.SeedSequence(entropy=self.seed, spawn_key=key)

    def phase_seed(self, phase, start_step=0) -> np.random.SeedSequence:
        return self.child_seed("train", _PHASE_INDEX[phase], start_step)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(key, value):
    f = _FIELDS[key]
    try:
        if f.type in ("int",):
            return int(value)
        if f.type in ("float",):
            return float(value)
        if f.type in ("tuple",):
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split() if v]
            return tuple(int(v) for v in value)
        return str(value) if f.type == "str" else value
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {value!r}") from exc


def make_config(values: dict | None = None, **overrides) -> RunConfig:
    """Build a config from a key/value map, rejecting unknown keys."""
    merged = dict(values or {})
    merged.update(overrides)
    kwargs = {}
    for key, value in merged.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown configuration key {key!r}")
        kwargs[key] = _coerce(key, value)
    return RunConfig(**kwargs)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Load a TOML key/value file, apply overrides (flags win), then the
    CFLAB_SEED environment variable, which wins over everything."""
    values = {}
    if path is not None:
        with open(path, "rb") as fh:
            data = _toml.load(fh)
        for key, v in data.items():
            if isinstance(v, dict):
                raise ConfigError(f"nested tables are not allowed (key {key!r})")
            values[key] = v
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    env_seed = os.environ.get("CFLAB_SEED")
    if env_seed is not None:
        values["seed"] = int(env_seed)
    return make_config(values)


def dump_config(cfg: RunConfig, path) -> None:
    """Write the config back out as flat TOML (strings quoted, tuples as arrays)."""
    lines = []
    for f in dataclasses.fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, str):
            lines.append(f'{f.name} = "{v}"')
        elif isinstance(v, tuple):
            lines.append(f"{f.name} = [{', '.join(str(x) for x in v)}]")
        else:
            lines.append(f"{f.name} = {v}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
