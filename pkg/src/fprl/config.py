"""Run configuration: a flat `key = value` text format with a strict key set.

The file format is deliberately parser-free: one `key = value` per line,
`#` starts a comment, unknown keys are rejected. The sha256 digest of the
canonical serialization identifies a config inside checkpoints.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

MASK_MODES = ("topk", "multinomial", "random")


@dataclass
class RunConfig:
    embed_dim: int = 32
    state_dim: int = 8
    depth: int = 4
    patch_size: int = 8
    frames_per_view: int = 2
    window_len: int = 50
    mask_ratio: float = 0.9
    alpha: float = 0.5
    tau: float = 0.1
    ema_momentum: float = 0.996
    lambda1: float = 1.0
    lambda2: float = 0.8
    lambda3: float = 1.0
    lambda_pf: float = 20.0
    aux_mask_weight: float = 0.0
    include_positive_in_denominator: bool = False
    mask_select_mode: str = "topk"
    agtp_attn_pool: bool = True
    agtp_ema: bool = True
    cvmfc_blocks: int = 1
    decoder_depth: int = 4
    lr: float = 1.5e-4
    warmup_steps: int = -1          # -1: 10% of total_steps
    total_steps: int = 500
    batch_size: int = 8
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.warmup_steps < 0:
            self.warmup_steps = self.total_steps // 10
        self.validate()

    def validate(self) -> None:
        if self.depth < 2:
            raise ConfigError("depth must be >= 2 so both layer path types occur")
        if self.embed_dim < 1 or self.state_dim < 1 or self.patch_size < 1:
            raise ConfigError("dimensions must be positive")
        if self.frames_per_view < 1:
            raise ConfigError("frames_per_view must be >= 1")
        if 3 * self.frames_per_view > self.window_len:
            raise ConfigError(
                f"window_len {self.window_len} too small for 3 views of "
                f"{self.frames_per_view} frames")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must be in (0, 1)")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must be in [0, 1]")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if not 0.0 <= self.ema_momentum < 1.0:
            raise ConfigError("ema_momentum must be in [0, 1)")
        if min(self.lambda1, self.lambda2, self.lambda3, self.lambda_pf,
               self.aux_mask_weight) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.mask_select_mode not in MASK_MODES:
            raise ConfigError(f"mask_select_mode must be one of {MASK_MODES}")
        if self.cvmfc_blocks < 1 or self.decoder_depth < 1:
            raise ConfigError("cvmfc_blocks and decoder_depth must be >= 1")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ConfigError("total_steps and batch_size must be >= 1")
        if self.warmup_steps >= self.total_steps:
            raise ConfigError(
                f"warmup_steps {self.warmup_steps} must be below total_steps "
                f"{self.total_steps}")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay nonnegative")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError("betas must be two values in [0, 1)")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(name: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(float(part) for part in raw.split(","))
        return raw
    except ValueError as exc:
        raise ConfigError(f"cannot parse {name} = {raw!r}") from exc


def config_to_text(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"


def config_digest(cfg: RunConfig) -> bytes:
    return hashlib.sha256(config_to_text(cfg).encode("utf-8")).digest()


def parse_config_text(text: str, overrides: dict | None = None) -> RunConfig:
    known = {f.name: f.type for f in fields(RunConfig)}
    kinds = {"embed_dim": int, "state_dim": int, "depth": int, "patch_size": int,
             "frames_per_view": int, "window_len": int, "mask_ratio": float,
             "alpha": float, "tau": float, "ema_momentum": float, "lambda1": float,
             "lambda2": float, "lambda3": float, "lambda_pf": float,
             "aux_mask_weight": float, "include_positive_in_denominator": bool,
             "mask_select_mode": str, "agtp_attn_pool": bool, "agtp_ema": bool,
             "cvmfc_blocks": int, "decoder_depth": int, "lr": float,
             "warmup_steps": int, "total_steps": int, "batch_size": int,
             "weight_decay": float, "betas": tuple, "seed": int,
             "data_dir": str, "out_dir": str}
    assert set(kinds) == set(known)
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw, kinds[key])
    if overrides:
        values.update(overrides)
    return RunConfig(**values)


def load_config(path: str | Path, overrides: dict | None = None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text(encoding="utf-8"), overrides)


def save_config(path: str | Path, cfg: RunConfig) -> None:
    Path(path).write_text(config_to_text(cfg), encoding="utf-8")
