"""Cross-view feature completion and attention-guided view-level prediction.

The completion block queries the (scattered, full-length) current stream
against an adjacent view used as a key/value dictionary; the resulting
cross-attention map also drives the pooling weights of the temporal
prediction heads. The target projector is only ever moved by EMA.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import StructuralError
from .nn import (AttentionParams, FeedForwardParams, LayerNormParams,
                 ProjectorParams, attend, fan_in_init, feed_forward, project)
from .tensor import (Tensor, add, div, layer_normalize, matmul, reshape,
                     softmax, stop_gradient, tmean, transpose)


@dataclass
class CvmfcBlockParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    self_attn: AttentionParams
    ffn: FeedForwardParams
    norm_sa: LayerNormParams
    norm_ffn: LayerNormParams

    @staticmethod
    def create(rng: np.random.Generator, d: int) -> "CvmfcBlockParams":
        return CvmfcBlockParams(
            w_q=fan_in_init(rng, (d, d)), w_k=fan_in_init(rng, (d, d)),
            w_v=fan_in_init(rng, (d, d)),
            self_attn=AttentionParams.create(rng, d),
            ffn=FeedForwardParams.create(rng, d, 2 * d),
            norm_sa=LayerNormParams.create(d),
            norm_ffn=LayerNormParams.create(d))

    def named(self, prefix: str):
        yield f"{prefix}.w_q", self.w_q
        yield f"{prefix}.w_k", self.w_k
        yield f"{prefix}.w_v", self.w_v
        yield from self.self_attn.named(f"{prefix}.self_attn")
        yield from self.ffn.named(f"{prefix}.ffn")
        yield from self.norm_sa.named(f"{prefix}.norm_sa")
        yield from self.norm_ffn.named(f"{prefix}.norm_ffn")


@dataclass
class CvmfcParams:
    """One parameter set shared by the past and future paths."""
    blocks: list

    @staticmethod
    def create(rng: np.random.Generator, d: int, n_blocks: int = 1) -> "CvmfcParams":
        if n_blocks < 1:
            raise StructuralError("cvmfc needs at least one block")
        return CvmfcParams(blocks=[CvmfcBlockParams.create(rng, d)
                                   for _ in range(n_blocks)])

    def named(self, prefix: str):
        for i, b in enumerate(self.blocks):
            yield from b.named(f"{prefix}.block{i}")


def cvmfc_block(z_c_full: Tensor, z_adj: Tensor,
                p: CvmfcBlockParams) -> tuple[Tensor, Tensor]:
    """Cross-attend the current stream into an adjacent view, then refine.

    Queries come from the current stream, keys/values from the adjacent view;
    the raw cross-attention output is refined by pre-norm residual
    self-attention and FFN. Returns (completed stream, attention map).
    """
    if z_c_full.shape[0] != z_adj.shape[0]:
        raise StructuralError(
            f"row mismatch: current {z_c_full.shape[0]}, adjacent {z_adj.shape[0]}")
    d = z_c_full.shape[1]
    q = matmul(z_c_full, p.w_q)
    k = matmul(z_adj, p.w_k)
    v = matmul(z_adj, p.w_v)
    attn = softmax(div(matmul(q, transpose(k)), Tensor(math.sqrt(d))), axis=-1)
    z = matmul(attn, v)
    normed = layer_normalize(z, p.norm_sa.gain, p.norm_sa.shift)
    sa_out, _ = attend(normed, normed, p.self_attn)
    z = add(z, sa_out)
    z = add(z, feed_forward(layer_normalize(z, p.norm_ffn.gain, p.norm_ffn.shift), p.ffn))
    return z, attn


def cvmfc_complete(z_c_full: Tensor, z_adj: Tensor,
                   params: CvmfcParams) -> tuple[Tensor, Tensor]:
    """Compose the blocks; the attention map of the last block is returned."""
    z = z_c_full
    attn = None
    for block in params.blocks:
        z, attn = cvmfc_block(z, z_adj, block)
    return z, attn


@dataclass
class AgtpHeads:
    """Query head (trained) and target head (EMA only)."""
    query: ProjectorParams
    target: ProjectorParams
    momentum: float = 0.996

    @staticmethod
    def create(rng: np.random.Generator, d: int, momentum: float = 0.996) -> "AgtpHeads":
        query = ProjectorParams.create(rng, d)
        return AgtpHeads(query=query, target=query.clone_frozen(), momentum=momentum)

    def named(self, prefix: str):
        yield from self.query.named(f"{prefix}.query")
        yield from self.target.named(f"{prefix}.target")


def agtp_pool(attn: Tensor | None, z_adj: Tensor, target_head: ProjectorParams) -> Tensor:
    """Pool an adjacent view by its cross-attention mass and project with the
    target head; the result carries no gradient.

    `attn` is row-stochastic [N x N]; pooling weights are the re-normalized
    column means. With attn=None the pooling is a plain mean (attention
    pooling disabled).
    """
    z_adj = stop_gradient(z_adj)
    n = z_adj.shape[0]
    if attn is None:
        pooled = tmean(z_adj, axis=0)
    else:
        col_mean = tmean(stop_gradient(attn), axis=0)
        total = float(col_mean.data.sum())
        if total <= 0.0:
            raise StructuralError("attention column mass must be positive")
        weights = div(col_mean, Tensor(total))
        pooled = reshape(matmul(reshape(weights, (1, n)), z_adj), (z_adj.shape[1],))
    return stop_gradient(project(pooled, target_head))


def agtp_current(z_c_visible: Tensor, query_head: ProjectorParams) -> Tensor:
    """Global average pool of the visible current tokens through the query head."""
    if z_c_visible.shape[0] < 1:
        raise StructuralError("current view has no visible tokens to pool")
    return project(tmean(z_c_visible, axis=0), query_head)


def ema_update(target_head: ProjectorParams, query_head: ProjectorParams,
               momentum: float) -> None:
    """target <- m*target + (1-m)*query, once per optimizer step."""
    if not 0.0 <= momentum < 1.0:
        raise StructuralError(f"EMA momentum {momentum} outside [0, 1)")
    for name in ("w1", "b1", "w2", "b2"):
        t = getattr(target_head, name)
        q = getattr(query_head, name)
        if t.shape != q.shape:
            raise StructuralError(f"EMA shape mismatch on {name}: {t.shape} vs {q.shape}")
        t.data[...] = momentum * t.data + (1.0 - momentum) * q.data
