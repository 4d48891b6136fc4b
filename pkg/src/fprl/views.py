"""Sparse (past, current, future) view sampling and patch tokenization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .nn import fan_in_init, uniform_init, zeros_param
from .tensor import Tensor, add, matmul

PATCH_NORM_EPS = 1e-6


@dataclass
class ViewTriple:
    past: list[int]
    current: list[int]
    future: list[int]
    window: tuple[int, int]
    past_frames: np.ndarray     # [f, side, side, 3]
    current_frames: np.ndarray
    future_frames: np.ndarray

    def check(self) -> None:
        p, c, f = set(self.past), set(self.current), set(self.future)
        assert len(self.past) == len(self.current) == len(self.future)
        assert not (p & c) and not (c & f) and not (p & f)
        lo, hi = self.window
        assert all(lo <= i <= hi for i in p | c | f)
        assert max(self.past) < min(self.current)
        assert max(self.current) < min(self.future)


@dataclass
class EmbedParams:
    """Linear patch embedding plus a learnable additive positional embedding."""
    w: Tensor      # [patch_dim, d]
    b: Tensor      # [d]
    pos: Tensor    # [N, d]

    @staticmethod
    def create(rng: np.random.Generator, patch_dim: int, d: int, n_tokens: int,
               pos_scale: float = 0.02) -> "EmbedParams":
        return EmbedParams(w=fan_in_init(rng, (patch_dim, d)),
                           b=zeros_param((d,)),
                           pos=uniform_init(rng, (n_tokens, d), pos_scale))

    def named(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b
        yield f"{prefix}.pos", self.pos


@dataclass
class TokenizedView:
    tokens: Tensor            # [N, d]
    segments: list[int]       # tokens per frame
    grid: tuple[int, int]     # (patches per side, patch_size)
    patches: np.ndarray       # [N, patch_dim] normalized pixel targets


def sample_views(total_frames: int, window_len: int, frames_per_view: int,
                 rng: np.random.Generator,
                 frames: np.ndarray | None = None) -> ViewTriple:
    """Pick a window uniformly, then 3*frames_per_view distinct indices.

    Sorted indices split into thirds: earliest -> past, middle -> current,
    latest -> future.
    """
    if window_len > total_frames:
        raise ConfigError(f"window_len {window_len} exceeds clip length {total_frames}")
    if 3 * frames_per_view > window_len:
        raise ConfigError(
            f"window_len {window_len} too small for 3 views of {frames_per_view} frames")
    start = int(rng.integers(0, total_frames - window_len + 1))
    picks = rng.choice(np.arange(start, start + window_len),
                       size=3 * frames_per_view, replace=False)
    picks = np.sort(picks)
    f = frames_per_view
    past = picks[:f].tolist()
    current = picks[f:2 * f].tolist()
    future = picks[2 * f:].tolist()

    def grab(idx):
        if frames is None:
            return np.empty((0,))
        return frames[np.asarray(idx, dtype=np.intp)]

    return ViewTriple(past=past, current=current, future=future,
                      window=(start, start + window_len - 1),
                      past_frames=grab(past), current_frames=grab(current),
                      future_frames=grab(future))


def normalize_patches(frames: np.ndarray, patch_size: int) -> np.ndarray:
    """Flatten non-overlapping patches (frame-major, row-major) and standardize
    each by its own mean/std (+1e-6)."""
    f, side, side2, ch = frames.shape
    if side != side2 or side % patch_size:
        raise ConfigError(f"frame side {side}x{side2} not divisible by patch {patch_size}")
    g = side // patch_size
    # [f, g, g, p, p, ch] -> [f*g*g, p*p*ch]
    blocks = frames.reshape(f, g, patch_size, g, patch_size, ch).transpose(0, 1, 3, 2, 4, 5)
    flat = blocks.reshape(f * g * g, patch_size * patch_size * ch).astype(np.float64)
    mu = flat.mean(axis=1, keepdims=True)
    sd = flat.std(axis=1, keepdims=True)
    return (flat - mu) / (sd + PATCH_NORM_EPS)


def tokenize(frames: np.ndarray, patch_size: int, embed: EmbedParams) -> TokenizedView:
    """Patch, normalize, embed, and add the positional embedding."""
    f, side = frames.shape[0], frames.shape[1]
    patches = normalize_patches(frames, patch_size)
    g = side // patch_size
    n = f * g * g
    if embed.pos.shape[0] != n:
        raise ConfigError(
            f"positional embedding covers {embed.pos.shape[0]} tokens, view has {n}")
    tokens = add(add(matmul(Tensor(patches), embed.w), embed.b), embed.pos)
    return TokenizedView(tokens=tokens, segments=[g * g] * f,
                         grid=(g, patch_size), patches=patches)
