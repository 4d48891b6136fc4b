"""All learnable state: student/teacher encoders, mask head, completion and
prediction heads, and the reconstruction decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .errors import StructuralError
from .masking import MaskHeadParams
from .nn import (AttentionParams, FeedForwardParams, LayerNormParams,
                 attend, fan_in_init, feed_forward, uniform_init, zeros_param)
from .perception import AgtpHeads, CvmfcParams
from .ssm import EncoderConfig, SSMLayerParams
from .tensor import Tensor, add, layer_normalize, matmul
from .views import EmbedParams


@dataclass
class DecoderBlockParams:
    norm_attn: LayerNormParams
    attn: AttentionParams
    norm_ffn: LayerNormParams
    ffn: FeedForwardParams

    @staticmethod
    def create(rng, d):
        return DecoderBlockParams(norm_attn=LayerNormParams.create(d),
                                  attn=AttentionParams.create(rng, d),
                                  norm_ffn=LayerNormParams.create(d),
                                  ffn=FeedForwardParams.create(rng, d, 2 * d))

    def named(self, prefix: str):
        yield from self.norm_attn.named(f"{prefix}.norm_attn")
        yield from self.attn.named(f"{prefix}.attn")
        yield from self.norm_ffn.named(f"{prefix}.norm_ffn")
        yield from self.ffn.named(f"{prefix}.ffn")


@dataclass
class DecoderParams:
    pos: Tensor                     # [N, d], decoder-side positional signal
    blocks: list
    head_w: Tensor                  # [d, patch_dim]
    head_b: Tensor

    @staticmethod
    def create(rng, d, n_tokens, patch_dim, depth):
        return DecoderParams(pos=uniform_init(rng, (n_tokens, d), 0.02),
                             blocks=[DecoderBlockParams.create(rng, d)
                                     for _ in range(depth)],
                             head_w=fan_in_init(rng, (d, patch_dim)),
                             head_b=zeros_param((patch_dim,)))

    def named(self, prefix: str):
        yield f"{prefix}.pos", self.pos
        for i, b in enumerate(self.blocks):
            yield from b.named(f"{prefix}.block{i}")
        yield f"{prefix}.head_w", self.head_w
        yield f"{prefix}.head_b", self.head_b


def decode_patches(z_full: Tensor, p: DecoderParams) -> Tensor:
    """Self-attention + FFN blocks over the scattered sequence, then an affine
    map back to patch pixel values."""
    x = add(z_full, p.pos)
    for block in p.blocks:
        normed = layer_normalize(x, block.norm_attn.gain, block.norm_attn.shift)
        attn_out, _ = attend(normed, normed, block.attn)
        x = add(x, attn_out)
        x = add(x, feed_forward(
            layer_normalize(x, block.norm_ffn.gain, block.norm_ffn.shift), block.ffn))
    return add(matmul(x, p.head_w), p.head_b)


@dataclass
class EncoderState:
    config: RunConfig
    encoder_config: EncoderConfig
    student_embed: EmbedParams
    student_layers: list
    mask_token: Tensor
    teacher_embed: EmbedParams
    teacher_layers: list
    mask_head: MaskHeadParams
    cvmfc: CvmfcParams
    agtp: AgtpHeads
    decoder: DecoderParams
    frame_side: int

    @property
    def tokens_per_view(self) -> int:
        g = self.frame_side // self.config.patch_size
        return self.config.frames_per_view * g * g

    def named_parameters(self):
        yield from self.student_embed.named("student.embed")
        for i, layer in enumerate(self.student_layers):
            yield from layer.named(f"student.layer{i}")
        yield "student.mask_token", self.mask_token
        yield from self.teacher_embed.named("teacher.embed")
        for i, layer in enumerate(self.teacher_layers):
            yield from layer.named(f"teacher.layer{i}")
        yield from self.mask_head.named("mask_head")
        yield from self.cvmfc.named("cvmfc")
        yield from self.agtp.named("agtp")
        yield from self.decoder.named("decoder")

    def trainable_parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, p in self.named_parameters():
            if name.startswith("teacher.") or name.startswith("agtp.target"):
                continue
            out[name] = p
        return out

    def frozen_parameters(self) -> dict[str, Tensor]:
        return {name: p for name, p in self.named_parameters()
                if name.startswith("teacher.") or name.startswith("agtp.target")}


def _freeze(params) -> None:
    for _, p in params:
        p.grad_tracked = False


def init_encoder_state(cfg: RunConfig, frame_side: int) -> EncoderState:
    """Build every parameter group from the run seed; the teacher gets its own
    deterministic stream and is frozen at initialization."""
    if frame_side % cfg.patch_size:
        raise StructuralError(
            f"frame side {frame_side} not divisible by patch {cfg.patch_size}")
    d = cfg.embed_dim
    g = frame_side // cfg.patch_size
    n_tokens = cfg.frames_per_view * g * g
    patch_dim = cfg.patch_size * cfg.patch_size * 3

    enc_cfg = EncoderConfig(depth=cfg.depth, embed_dim=d, state_dim=cfg.state_dim,
                            patch_size=cfg.patch_size,
                            frames_per_view=cfg.frames_per_view)

    rng = np.random.default_rng(cfg.seed)
    student_embed = EmbedParams.create(rng, patch_dim, d, n_tokens)
    student_layers = [SSMLayerParams.create(rng, d, cfg.state_dim, direction)
                      for direction in enc_cfg.topology]
    mask_token = uniform_init(rng, (d,), 0.02)
    mask_head = MaskHeadParams.create(rng, d, heads=2)
    cvmfc = CvmfcParams.create(rng, d, cfg.cvmfc_blocks)
    agtp = AgtpHeads.create(rng, d, momentum=cfg.ema_momentum)
    decoder = DecoderParams.create(rng, d, n_tokens, patch_dim, cfg.decoder_depth)

    teacher_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7EAC4E]))
    teacher_embed = EmbedParams.create(teacher_rng, patch_dim, d, n_tokens)
    teacher_layers = [SSMLayerParams.create(teacher_rng, d, cfg.state_dim, direction)
                      for direction in enc_cfg.topology]

    state = EncoderState(config=cfg, encoder_config=enc_cfg,
                         student_embed=student_embed, student_layers=student_layers,
                         mask_token=mask_token, teacher_embed=teacher_embed,
                         teacher_layers=teacher_layers, mask_head=mask_head,
                         cvmfc=cvmfc, agtp=agtp, decoder=decoder,
                         frame_side=frame_side)
    _freeze(state.teacher_embed.named("t"))
    for layer in state.teacher_layers:
        _freeze(layer.named("t"))
    _freeze(state.agtp.target.named("t"))
    return state
