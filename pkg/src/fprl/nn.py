"""Small shared building blocks: init helpers, affine maps, attention, FFN."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import StructuralError
from .tensor import (Tensor, add, concat, div, matmul, mul, relu, reshape,
                     softmax, sqrt, sub, tmean, transpose)


def uniform_init(rng: np.random.Generator, shape, scale: float) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, size=shape), grad_tracked=True)


def fan_in_init(rng: np.random.Generator, shape) -> Tensor:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)); fan_in is the first extent."""
    return uniform_init(rng, shape, 1.0 / math.sqrt(shape[0]))


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), grad_tracked=True)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape), grad_tracked=True)


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def zscore(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Standardize a vector to zero mean / unit variance; constant input -> zeros."""
    var = float(np.var(x.data))
    if var < eps:
        return Tensor(np.zeros(x.shape))
    mu = tmean(x)
    centered = sub(x, mu)
    return div(centered, sqrt(tmean(mul(centered, centered))))


@dataclass
class LayerNormParams:
    gain: Tensor
    shift: Tensor

    @staticmethod
    def create(d: int) -> "LayerNormParams":
        return LayerNormParams(gain=ones_param((d,)), shift=zeros_param((d,)))

    def named(self, prefix: str):
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.shift", self.shift


@dataclass
class AttentionParams:
    """Single-head scaled dot-product self/cross attention."""
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_o: Tensor

    @staticmethod
    def create(rng: np.random.Generator, d: int) -> "AttentionParams":
        return AttentionParams(
            w_q=fan_in_init(rng, (d, d)), w_k=fan_in_init(rng, (d, d)),
            w_v=fan_in_init(rng, (d, d)), w_o=fan_in_init(rng, (d, d)),
            b_o=zeros_param((d,)))

    def named(self, prefix: str):
        for n in ("w_q", "w_k", "w_v", "w_o", "b_o"):
            yield f"{prefix}.{n}", getattr(self, n)


def attend(q_src: Tensor, kv_src: Tensor, p: AttentionParams) -> tuple[Tensor, Tensor]:
    """Returns (output, attention weights); rows of the weights sum to 1."""
    d = q_src.shape[1]
    q = matmul(q_src, p.w_q)
    k = matmul(kv_src, p.w_k)
    v = matmul(kv_src, p.w_v)
    scores = div(matmul(q, transpose(k)), Tensor(math.sqrt(d)))
    attn = softmax(scores, axis=-1)
    out = affine(matmul(attn, v), p.w_o, p.b_o)
    return out, attn


@dataclass
class MultiHeadAttentionParams:
    """Per-head projection blocks plus a combined output projection."""
    heads_q: list
    heads_k: list
    heads_v: list
    w_o: Tensor
    b_o: Tensor

    @staticmethod
    def create(rng: np.random.Generator, d: int, heads: int) -> "MultiHeadAttentionParams":
        if d % heads != 0:
            raise StructuralError(f"head count {heads} does not divide width {d}")
        dh = d // heads
        mk = lambda: [fan_in_init(rng, (d, dh)) for _ in range(heads)]
        return MultiHeadAttentionParams(
            heads_q=mk(), heads_k=mk(), heads_v=mk(),
            w_o=fan_in_init(rng, (d, d)), b_o=zeros_param((d,)))

    @property
    def n_heads(self) -> int:
        return len(self.heads_q)

    def named(self, prefix: str):
        for h in range(self.n_heads):
            yield f"{prefix}.h{h}.w_q", self.heads_q[h]
            yield f"{prefix}.h{h}.w_k", self.heads_k[h]
            yield f"{prefix}.h{h}.w_v", self.heads_v[h]
        yield f"{prefix}.w_o", self.w_o
        yield f"{prefix}.b_o", self.b_o


def multi_head_attend(x: Tensor, p: MultiHeadAttentionParams) -> Tensor:
    dh = p.heads_q[0].shape[1]
    outs = []
    for wq, wk, wv in zip(p.heads_q, p.heads_k, p.heads_v):
        q = matmul(x, wq)
        k = matmul(x, wk)
        v = matmul(x, wv)
        scores = div(matmul(q, transpose(k)), Tensor(math.sqrt(dh)))
        outs.append(matmul(softmax(scores, axis=-1), v))
    return affine(concat(outs, axis=1), p.w_o, p.b_o)


@dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @staticmethod
    def create(rng: np.random.Generator, d: int, hidden: int) -> "FeedForwardParams":
        return FeedForwardParams(
            w1=fan_in_init(rng, (d, hidden)), b1=zeros_param((hidden,)),
            w2=fan_in_init(rng, (hidden, d)), b2=zeros_param((d,)))

    def named(self, prefix: str):
        for n in ("w1", "b1", "w2", "b2"):
            yield f"{prefix}.{n}", getattr(self, n)


def feed_forward(x: Tensor, p: FeedForwardParams) -> Tensor:
    return affine(relu(affine(x, p.w1, p.b1)), p.w2, p.b2)


@dataclass
class ProjectorParams:
    """Two affine maps with a ReLU in between (d -> d' with d' = d)."""
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @staticmethod
    def create(rng: np.random.Generator, d: int, d_out: int | None = None) -> "ProjectorParams":
        d_out = d if d_out is None else d_out
        return ProjectorParams(
            w1=fan_in_init(rng, (d, d)), b1=zeros_param((d,)),
            w2=fan_in_init(rng, (d, d_out)), b2=zeros_param((d_out,)))

    def named(self, prefix: str):
        for n in ("w1", "b1", "w2", "b2"):
            yield f"{prefix}.{n}", getattr(self, n)

    def clone_frozen(self) -> "ProjectorParams":
        return ProjectorParams(
            w1=Tensor(self.w1.data.copy()), b1=Tensor(self.b1.data.copy()),
            w2=Tensor(self.w2.data.copy()), b2=Tensor(self.b2.data.copy()))


def project(x: Tensor, p: ProjectorParams) -> Tensor:
    h = relu(add(matmul(reshape(x, (1, x.size)), p.w1), p.b1))
    return reshape(add(matmul(h, p.w2), p.b2), (p.w2.shape[1],))
