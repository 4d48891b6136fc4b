"""Diagonal selective state-space layers and the alternating-topology encoder.

Each layer wraps a selective scan in an input/output projection with a
pre-norm residual. The scan follows the zero-order-hold discretization

    a_bar = exp(delta * a)
    b_bar = (delta*a)^-1 (exp(delta*a) - 1) * delta * b

with the recurrence h_t = a_bar_t * h_{t-1} + b_bar_t * x_t and readout
y_t = <c_t, h_t>. `a` is diagonal per channel and strictly negative via the
-exp(a_log) parameterization; `delta` is strictly positive via softplus, so
|a_bar| < 1 and the recurrence is contractive.

Bidirectional layers scan each frame's patch segment forward and backward
(outputs merged); unidirectional layers run one causal scan over the whole
token sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ShapeError, StructuralError
from .nn import LayerNormParams, fan_in_init, zeros_param
from .tensor import (Tensor, add, apply_op, broadcast_to, concat, exp,
                     gather_rows, matmul, mul, layer_normalize, reshape,
                     softplus, _unbroadcast)

_SERIES_CUTOFF = 1e-6

BIDIRECTIONAL = "bidirectional"
UNIDIRECTIONAL = "unidirectional"


@dataclass
class SSMLayerParams:
    """One selective-scan layer; `a = -exp(a_log)` gives strictly negative poles."""
    a_log: Tensor          # [d, r]
    b_proj: Tensor         # [d, r], per-token B = x @ b_proj
    c_proj: Tensor         # [d, r], per-token C = x @ c_proj
    delta_w: Tensor        # [d, d]
    delta_b: Tensor        # [d]
    in_w: Tensor           # [d, d]
    in_b: Tensor           # [d]
    out_w: Tensor          # [d, d]
    out_b: Tensor          # [d]
    norm: LayerNormParams
    direction: str

    @staticmethod
    def create(rng: np.random.Generator, d: int, r: int, direction: str) -> "SSMLayerParams":
        return SSMLayerParams(
            a_log=Tensor(np.log(rng.uniform(0.5, 1.5, size=(d, r))), grad_tracked=True),
            b_proj=fan_in_init(rng, (d, r)),
            c_proj=fan_in_init(rng, (d, r)),
            delta_w=fan_in_init(rng, (d, d)),
            delta_b=zeros_param((d,)),
            in_w=fan_in_init(rng, (d, d)),
            in_b=zeros_param((d,)),
            out_w=fan_in_init(rng, (d, d)),
            out_b=zeros_param((d,)),
            norm=LayerNormParams.create(d),
            direction=direction)

    def named(self, prefix: str):
        for n in ("a_log", "b_proj", "c_proj", "delta_w", "delta_b",
                  "in_w", "in_b", "out_w", "out_b"):
            yield f"{prefix}.{n}", getattr(self, n)
        yield from self.norm.named(f"{prefix}.norm")


@dataclass
class EncoderConfig:
    depth: int
    embed_dim: int
    state_dim: int
    patch_size: int
    frames_per_view: int
    topology: list = field(default_factory=list)  # per-layer direction strings
    bidir_merge: str = "sum"                      # "sum" or "mean"

    def __post_init__(self):
        if not self.topology:
            self.topology = [BIDIRECTIONAL if i % 2 == 0 else UNIDIRECTIONAL
                             for i in range(self.depth)]
        if len(self.topology) != self.depth:
            raise StructuralError(
                f"topology lists {len(self.topology)} layers for depth {self.depth}")
        if self.bidir_merge not in ("sum", "mean"):
            raise StructuralError(f"unknown bidir_merge {self.bidir_merge!r}")


def discretize(delta: Tensor, a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Zero-order-hold discretization, elementwise with broadcasting.

    Near delta*a = 0 the exact expression for b_bar cancels catastrophically,
    so |delta*a| < 1e-6 switches to the series delta*b*(1 + u/2 + u^2/6).
    """
    if np.any(delta.data <= 0.0):
        raise DomainError("discretize requires delta > 0")
    u = mul(delta, a)
    a_bar = exp(u)
    b_bar = _discretize_b(delta, a, b)
    return a_bar, b_bar


def _phi(u: np.ndarray) -> np.ndarray:
    """(exp(u)-1)/u with a series fallback near zero."""
    small = np.abs(u) < _SERIES_CUTOFF
    safe = np.where(small, 1.0, u)
    exact = (np.exp(safe) - 1.0) / safe
    series = 1.0 + u / 2.0 + u * u / 6.0
    return np.where(small, series, exact)


def _phi_prime(u: np.ndarray) -> np.ndarray:
    """d/du of (exp(u)-1)/u."""
    small = np.abs(u) < _SERIES_CUTOFF
    safe = np.where(small, 1.0, u)
    exact = (np.exp(safe) * (safe - 1.0) + 1.0) / (safe * safe)
    series = 0.5 + u / 3.0 + u * u / 8.0
    return np.where(small, series, exact)


def _discretize_b(delta: Tensor, a: Tensor, b: Tensor) -> Tensor:
    u = delta.data * a.data
    phi = _phi(u)
    out = phi * delta.data * b.data
    dphi = _phi_prime(u)

    def bwd(g):
        g_delta = g * b.data * (phi + dphi * u)
        g_a = g * dphi * delta.data * delta.data * b.data
        g_b = g * phi * delta.data
        return (_unbroadcast(g_delta, delta.shape),
                _unbroadcast(g_a, a.shape),
                _unbroadcast(g_b, b.shape))

    return apply_op("discretize_b", (delta, a, b), out, bwd)


# ---------------------------------------------------------------------------
# scan kernels

def scan_recurrence(a_bar: Tensor, b_bar: Tensor, x: Tensor, c: Tensor,
                    h0: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Exact sequential recurrence with a hand-written backward rule.

    Shapes: a_bar, b_bar [L,d,r]; x [L,d]; c [L,r]. Returns (y [L,d], final
    hidden state [d,r]). `h0` is a plain boundary value and receives no
    gradient.
    """
    L, d, r = a_bar.shape
    if b_bar.shape != (L, d, r) or x.shape != (L, d) or c.shape != (L, r):
        raise ShapeError(
            f"scan_recurrence shapes: a_bar {a_bar.shape}, b_bar {b_bar.shape}, "
            f"x {x.shape}, c {c.shape}")
    ad, bd, xd, cd = a_bar.data, b_bar.data, x.data, c.data
    hs = np.empty((L, d, r))
    h = np.zeros((d, r)) if h0 is None else np.array(h0, dtype=np.float64)
    y = np.empty((L, d))
    for t in range(L):
        h = ad[t] * h + bd[t] * xd[t][:, None]
        hs[t] = h
        y[t] = hs[t] @ cd[t]
    h_init = np.zeros((d, r)) if h0 is None else np.array(h0, dtype=np.float64)

    def bwd(g):
        g_a = np.empty_like(ad)
        g_b = np.empty_like(bd)
        g_x = np.empty_like(xd)
        g_c = np.empty_like(cd)
        gh = np.zeros((d, r))
        for t in range(L - 1, -1, -1):
            gh = gh + g[t][:, None] * cd[t][None, :]
            g_c[t] = (hs[t] * g[t][:, None]).sum(axis=0)
            h_prev = hs[t - 1] if t > 0 else h_init
            g_a[t] = gh * h_prev
            g_b[t] = gh * xd[t][:, None]
            g_x[t] = (gh * bd[t]).sum(axis=1)
            gh = gh * ad[t]
        return (g_a, g_b, g_x, g_c)

    out = apply_op("scan_recurrence", (a_bar, b_bar, x, c), y, bwd)
    return out, hs[-1].copy()


def scan_recurrence_parallel(a_bar: np.ndarray, b_bar: np.ndarray, x: np.ndarray,
                             c: np.ndarray, block: int = 16) -> np.ndarray:
    """Same recurrence via a blocked prefix scan over affine-map composition.

    Elements (a_t, b_t*x_t) compose as (a1,b1) . (a2,b2) = (a2*a1, a2*b1+b2).
    Values only (no gradient); used as the fast path and as a cross-check
    against the sequential kernel.
    """
    L, d, r = a_bar.shape
    elem_a = a_bar.copy()
    elem_b = b_bar * x[:, :, None]
    pad = (-L) % block
    if pad:
        elem_a = np.concatenate([elem_a, np.ones((pad, d, r))], axis=0)
        elem_b = np.concatenate([elem_b, np.zeros((pad, d, r))], axis=0)
    n_blocks = elem_a.shape[0] // block
    ba = elem_a.reshape(n_blocks, block, d, r)
    bb = elem_b.reshape(n_blocks, block, d, r)
    # in-block inclusive scan, vectorized across blocks
    for t in range(1, block):
        bb[:, t] = ba[:, t] * bb[:, t - 1] + bb[:, t]
        ba[:, t] = ba[:, t] * ba[:, t - 1]
    # carry the running state across block boundaries
    carry = np.zeros((d, r))
    h = np.empty((n_blocks, block, d, r))
    for k in range(n_blocks):
        h[k] = ba[k] * carry + bb[k]
        carry = ba[k, -1] * carry + bb[k, -1]
    h = h.reshape(n_blocks * block, d, r)[:L]
    return np.einsum("lds,ls->ld", h, c)


def _input_dependent_terms(x: Tensor, p: SSMLayerParams):
    delta = softplus(add(matmul(x, p.delta_w), p.delta_b))       # [L, d]
    b = matmul(x, p.b_proj)                                      # [L, r]
    c = matmul(x, p.c_proj)                                      # [L, r]
    a = mul(Tensor(-1.0), exp(p.a_log))                          # [d, r]
    L = x.shape[0]
    d, r = a.shape
    delta3 = broadcast_to(reshape(delta, (L, d, 1)), (L, d, r))
    a3 = broadcast_to(reshape(a, (1, d, r)), (L, d, r))
    b3 = broadcast_to(reshape(b, (L, 1, r)), (L, d, r))
    return delta3, a3, b3, c


def ssm_scan_sequential(x: Tensor, p: SSMLayerParams, reverse: bool = False,
                        h0: np.ndarray | None = None) -> Tensor:
    """Selective scan of an [L x d] sequence: exact step-by-step recurrence."""
    if x.shape[0] == 0:
        return x
    if reverse:
        idx = list(range(x.shape[0] - 1, -1, -1))
        x = gather_rows(x, idx)
    delta3, a3, b3, c = _input_dependent_terms(x, p)
    a_bar, b_bar = discretize(delta3, a3, b3)
    y, _ = scan_recurrence(a_bar, b_bar, x, c, h0=h0)
    if reverse:
        y = gather_rows(y, idx)
    return y


def ssm_scan_parallel(x: Tensor, p: SSMLayerParams, reverse: bool = False,
                      block: int = 16) -> Tensor:
    """Values-only scan via blocked prefix composition; matches sequential to 1e-10."""
    if x.shape[0] == 0:
        return Tensor(x.data.copy())
    xd = x.data[::-1] if reverse else x.data
    xt = Tensor(xd.copy())
    delta3, a3, b3, c = _input_dependent_terms(xt, p)
    u = delta3.data * a3.data
    a_bar = np.exp(u)
    b_bar = _phi(u) * delta3.data * b3.data
    y = scan_recurrence_parallel(a_bar, b_bar, xt.data, c.data, block=block)
    if reverse:
        y = y[::-1]
    return Tensor(y.copy())


# ---------------------------------------------------------------------------
# encoder

def _segment_bounds(segments: list[int], n: int) -> list[tuple[int, int]]:
    if any(s < 0 for s in segments) or sum(segments) != n:
        raise StructuralError(f"segments {segments} do not cover {n} tokens")
    bounds = []
    start = 0
    for s in segments:
        bounds.append((start, start + s))
        start += s
    return bounds


def _bidirectional_layer(x: Tensor, p: SSMLayerParams, segments: list[int],
                         merge: str) -> Tensor:
    pieces = []
    for lo, hi in _segment_bounds(segments, x.shape[0]):
        if lo == hi:
            continue
        seg = gather_rows(x, list(range(lo, hi)))
        fwd = ssm_scan_sequential(seg, p, reverse=False)
        bwd = ssm_scan_sequential(seg, p, reverse=True)
        both = add(fwd, bwd)
        if merge == "mean":
            both = mul(both, Tensor(0.5))
        pieces.append(both)
    return pieces[0] if len(pieces) == 1 else concat(pieces, axis=0)


def encode(tokens: Tensor, segments: list[int], layers: list[SSMLayerParams],
           config: EncoderConfig) -> Tensor:
    """Run the alternating bidirectional/unidirectional stack.

    `segments` gives per-frame token counts (visible counts for masked
    input); bidirectional layers scan within each segment, unidirectional
    layers scan the full sequence causally. Each layer is wrapped as
    x + out_proj(scan(in_proj(norm(x)))).
    """
    if len(layers) != config.depth:
        raise StructuralError(f"{len(layers)} layers for depth {config.depth}")
    if sum(segments) != tokens.shape[0]:
        raise StructuralError(
            f"segments {segments} inconsistent with {tokens.shape[0]} tokens")
    x = tokens
    for p, direction in zip(layers, config.topology):
        inner = layer_normalize(x, p.norm.gain, p.norm.shift)
        inner = add(matmul(inner, p.in_w), p.in_b)
        if direction == BIDIRECTIONAL:
            inner = _bidirectional_layer(inner, p, segments, config.bidir_merge)
        elif direction == UNIDIRECTIONAL:
            inner = ssm_scan_sequential(inner, p, reverse=False)
        else:
            raise StructuralError(f"unknown layer direction {direction!r}")
        inner = add(matmul(inner, p.out_w), p.out_b)
        x = add(x, inner)
    return x
