"""Teacher-prior adaptive masking: fuse teacher saliency with a learned
attention head and keep the highest-probability tokens visible."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, StructuralError
from .nn import (MultiHeadAttentionParams, affine, fan_in_init,
                 multi_head_attend, zeros_param, zscore)
from .tensor import (Tensor, add, gather_rows, mul, reshape, scatter_rows,
                     softmax, stop_gradient, token_l2_norms)


@dataclass
class MaskHeadParams:
    """Lightweight multi-head self-attention plus a one-logit-per-token head."""
    mha: MultiHeadAttentionParams
    out_w: Tensor   # [d, 1]
    out_b: Tensor   # [1]

    @staticmethod
    def create(rng: np.random.Generator, d: int, heads: int = 2) -> "MaskHeadParams":
        return MaskHeadParams(mha=MultiHeadAttentionParams.create(rng, d, heads),
                              out_w=fan_in_init(rng, (d, 1)),
                              out_b=zeros_param((1,)))

    def named(self, prefix: str):
        yield from self.mha.named(f"{prefix}.mha")
        yield f"{prefix}.out_w", self.out_w
        yield f"{prefix}.out_b", self.out_b


@dataclass
class MaskSelection:
    prior: Tensor          # H [N], standardized teacher saliency
    logits: Tensor         # R [N], standardized attention-head logits
    fused: Tensor          # S [N]
    probs: Tensor          # P [N], softmax(S)
    visible: list[int]     # ascending
    masked: list[int]      # ascending
    alpha: float
    ratio: float

    @property
    def n_tokens(self) -> int:
        return len(self.visible) + len(self.masked)

    def check(self) -> None:
        n = self.n_tokens
        assert sorted(self.visible + self.masked) == list(range(n))
        assert len(self.masked) == math.ceil(self.ratio * n)
        p = self.probs.data
        assert np.all(p >= 0.0)
        assert abs(p.sum() - 1.0) <= 1e-12


def saliency_prior(z_t: Tensor) -> Tensor:
    """Per-token norm of the teacher features, standardized across tokens."""
    norms = token_l2_norms(stop_gradient(z_t))
    return zscore(norms)


def attention_logits(tokens: Tensor, head: MaskHeadParams) -> Tensor:
    """One standardized logit per token from self-attention over the full view."""
    feats = multi_head_attend(tokens, head.mha)
    raw = reshape(affine(feats, head.out_w, head.out_b), (tokens.shape[0],))
    return zscore(raw)


def fuse_and_select(prior: Tensor, logits: Tensor, alpha: float, ratio: float,
                    mode: str = "topk",
                    rng: np.random.Generator | None = None) -> MaskSelection:
    """S = alpha*H + (1-alpha)*R, P = softmax(S); keep the K = N - ceil(ratio*N)
    most probable tokens visible (ties to the lower index), or draw K without
    replacement proportional to P in multinomial mode."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha {alpha} outside [0, 1]")
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"mask ratio {ratio} outside (0, 1)")
    n = prior.shape[0]
    if logits.shape[0] != n:
        raise StructuralError(f"prior has {n} tokens, logits {logits.shape[0]}")
    k = n - math.ceil(ratio * n)
    if k <= 0:
        raise ConfigError(f"mask ratio {ratio} leaves no visible tokens for N={n}")
    fused = add(mul(Tensor(alpha), prior), mul(Tensor(1.0 - alpha), logits))
    probs = softmax(fused, axis=-1)
    p = probs.data
    if mode == "topk":
        order = np.argsort(-p, kind="stable")
        visible = sorted(order[:k].tolist())
    elif mode == "multinomial":
        if rng is None:
            raise ConfigError("multinomial selection needs an rng")
        visible = sorted(rng.choice(n, size=k, replace=False, p=p).tolist())
    else:
        raise ConfigError(f"unknown selection mode {mode!r}")
    masked = sorted(set(range(n)) - set(visible))
    return MaskSelection(prior=prior, logits=logits, fused=fused, probs=probs,
                         visible=visible, masked=masked, alpha=alpha, ratio=ratio)


def apply_mask(tokens: Tensor, selection: MaskSelection) -> tuple[Tensor, "ScatterRecipe"]:
    """Gather visible rows (order preserved) and a recipe to scatter encoder
    outputs back to full length with a shared mask-token row elsewhere."""
    n = tokens.shape[0]
    if selection.n_tokens != n:
        raise StructuralError(
            f"selection covers {selection.n_tokens} tokens, input has {n}")
    visible_tokens = gather_rows(tokens, selection.visible)
    return visible_tokens, ScatterRecipe(n_tokens=n, visible=list(selection.visible),
                                         masked=list(selection.masked))


@dataclass
class ScatterRecipe:
    n_tokens: int
    visible: list[int]
    masked: list[int]

    def scatter(self, encoded_visible: Tensor, mask_token: Tensor) -> Tensor:
        if encoded_visible.shape[0] != len(self.visible):
            raise StructuralError(
                f"{encoded_visible.shape[0]} encoded rows for {len(self.visible)} slots")
        return scatter_rows(encoded_visible, self.visible, self.n_tokens,
                            fill_row=mask_token)

    def visible_segments(self, full_segments: list[int]) -> list[int]:
        """Per-frame counts of visible tokens, given the full per-frame counts."""
        bounds = np.cumsum([0] + list(full_segments))
        vis = np.asarray(self.visible)
        return [int(((vis >= lo) & (vis < hi)).sum())
                for lo, hi in zip(bounds[:-1], bounds[1:])]


def mask_images(selection: MaskSelection, frames: int, grid: int,
                patch_size: int) -> list[np.ndarray]:
    """Per-frame uint8 images: visible patches white (255), masked black (0)."""
    side = grid * patch_size
    flags = np.zeros(selection.n_tokens, dtype=np.uint8)
    flags[np.asarray(selection.visible, dtype=np.intp)] = 255
    per_frame = flags.reshape(frames, grid, grid)
    images = []
    for f in range(frames):
        img = np.repeat(np.repeat(per_frame[f], patch_size, axis=0), patch_size, axis=1)
        images.append(img.astype(np.uint8))
    return images
