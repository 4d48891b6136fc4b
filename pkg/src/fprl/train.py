"""Training loop: view preparation, the per-step forward/backward pass,
optimizer/EMA updates, JSONL metrics, and checkpointing."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_tensors, save_tensors
from .config import RunConfig, config_digest
from .errors import DataError, StructuralError
from .losses import (LossReport, LossWeights, loss_aux_mask, loss_align,
                     loss_cl, loss_rec, loss_total, per_token_rec_errors)
from .masking import (MaskSelection, apply_mask, attention_logits,
                      fuse_and_select, saliency_prior)
from .model import EncoderState, decode_patches, init_encoder_state
from .optim import AdamState, adamw_step, lr_at
from .perception import agtp_current, agtp_pool, cvmfc_complete, ema_update
from .ssm import encode
from .synth import VideoClip, load_dataset
from .tensor import ComputationRecord, Tensor, add, backward, mul, softmax
from .views import sample_views, tokenize


@dataclass
class PreparedClip:
    """Frames of one sampled view triple, ready for tokenization."""
    past: np.ndarray
    current: np.ndarray
    future: np.ndarray


@dataclass
class TrainRunState:
    step: int = 0
    adam: AdamState = field(default_factory=AdamState)
    best_id: str = ""
    last_id: str = ""
    best_total: float = float("inf")


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Stateless per-step stream; resume needs only the step counter."""
    return np.random.default_rng(np.random.SeedSequence([seed, 0x57E9, step]))


def prepare_batch(clips: list[VideoClip], indices: list[int], cfg: RunConfig,
                  rng: np.random.Generator) -> list[PreparedClip]:
    out = []
    for i in indices:
        clip = clips[i]
        triple = sample_views(clip.frames, cfg.window_len, cfg.frames_per_view,
                              rng, frames=clip.pixels)
        out.append(PreparedClip(past=triple.past_frames,
                                current=triple.current_frames,
                                future=triple.future_frames))
    return out


def _select_tokens(state: EncoderState, z_t: Tensor, current_tokens: Tensor,
                   cfg: RunConfig, rng: np.random.Generator | None,
                   frozen: tuple[list, list] | None) -> MaskSelection:
    n = current_tokens.shape[0]
    if cfg.mask_select_mode == "random":
        prior = Tensor(np.zeros(n))
        logits = Tensor(np.zeros(n))
        mode, alpha = "multinomial", cfg.alpha
    else:
        prior = saliency_prior(z_t)
        logits = attention_logits(current_tokens, state.mask_head)
        mode, alpha = cfg.mask_select_mode, cfg.alpha
    if frozen is None:
        return fuse_and_select(prior, logits, alpha, cfg.mask_ratio, mode, rng)
    # frozen index partition (used by gradient checks): probabilities are
    # recomputed from live parameters, the visible/masked split is fixed
    visible, masked = frozen
    fused = add(mul(Tensor(alpha), prior), mul(Tensor(1.0 - alpha), logits))
    return MaskSelection(prior=prior, logits=logits, fused=fused,
                         probs=softmax(fused, axis=-1), visible=list(visible),
                         masked=list(masked), alpha=alpha, ratio=cfg.mask_ratio)


def forward_clip(state: EncoderState, prep: PreparedClip, cfg: RunConfig,
                 rng: np.random.Generator | None,
                 frozen: tuple[list, list] | None = None):
    """One clip through the whole pipeline; returns the per-clip loss pieces."""
    enc_cfg = state.encoder_config
    tv_c_teacher = tokenize(prep.current, cfg.patch_size, state.teacher_embed)
    z_t = encode(tv_c_teacher.tokens, tv_c_teacher.segments,
                 state.teacher_layers, enc_cfg)

    tv_p = tokenize(prep.past, cfg.patch_size, state.student_embed)
    tv_f = tokenize(prep.future, cfg.patch_size, state.student_embed)
    tv_c = tokenize(prep.current, cfg.patch_size, state.student_embed)
    z_p = encode(tv_p.tokens, tv_p.segments, state.student_layers, enc_cfg)
    z_f = encode(tv_f.tokens, tv_f.segments, state.student_layers, enc_cfg)

    selection = _select_tokens(state, z_t, tv_c.tokens, cfg, rng, frozen)
    visible_tokens, recipe = apply_mask(tv_c.tokens, selection)
    z_c_vis = encode(visible_tokens, recipe.visible_segments(tv_c.segments),
                     state.student_layers, enc_cfg)
    z_c_full = recipe.scatter(z_c_vis, state.mask_token)

    x_hat = decode_patches(z_c_full, state.decoder)
    targets = Tensor(tv_c.patches)
    rec = loss_rec(x_hat, targets, selection.masked)

    z_c_p, attn_p = cvmfc_complete(z_c_full, z_p, state.cvmfc)
    z_c_f, attn_f = cvmfc_complete(z_c_full, z_f, state.cvmfc)
    align_parts = loss_align(z_c_p, z_c_f, z_t, selection.masked, cfg.lambda_pf)

    p_c = agtp_current(z_c_vis, state.agtp.query)
    p_p = agtp_pool(attn_p if cfg.agtp_attn_pool else None, z_p, state.agtp.target)
    p_f = agtp_pool(attn_f if cfg.agtp_attn_pool else None, z_f, state.agtp.target)

    if cfg.aux_mask_weight > 0:
        errors = per_token_rec_errors(x_hat, targets)
        aux = loss_aux_mask(selection.probs, errors, selection.masked)
    else:
        aux = Tensor(0.0)
    return rec, align_parts, (p_c, p_p, p_f), aux, selection


def forward_batch(state: EncoderState, prepared: list[PreparedClip], cfg: RunConfig,
                  rng: np.random.Generator | None = None, step: int = 0,
                  frozen_selections: list | None = None):
    """Average the per-clip objectives, compute the in-batch contrastive term,
    and return (total tensor, LossReport, selections)."""
    if not prepared:
        raise StructuralError("empty batch")
    weights = LossWeights(rec=cfg.lambda1, align=cfg.lambda2, contrast=cfg.lambda3,
                          past_future=cfg.lambda_pf, tau=cfg.tau,
                          include_positive_in_denominator=cfg.include_positive_in_denominator,
                          aux_mask_weight=cfg.aux_mask_weight)
    recs, pts, fts, pfs, auxes, triples, selections = [], [], [], [], [], [], []
    for i, prep in enumerate(prepared):
        frozen = None if frozen_selections is None else frozen_selections[i]
        rec, (pt, ft, pf, _), triple, aux, sel = forward_clip(
            state, prep, cfg, rng, frozen)
        recs.append(rec)
        pts.append(pt)
        fts.append(ft)
        pfs.append(pf)
        auxes.append(aux)
        triples.append(triple)
        selections.append(sel)

    b = float(len(prepared))

    def _mean(parts):
        total = parts[0]
        for p in parts[1:]:
            total = total + p
        return total / Tensor(b)

    rec_m = _mean(recs)
    pt_m, ft_m, pf_m = _mean(pts), _mean(fts), _mean(pfs)
    align_m = pt_m + ft_m + Tensor(cfg.lambda_pf) * pf_m
    cl = loss_cl(triples, cfg.tau, include_positive=cfg.include_positive_in_denominator)
    aux_m = _mean(auxes)
    total, report = loss_total(rec_m, (pt_m, ft_m, pf_m, align_m), cl, aux_m,
                               weights, step=step,
                               n_masked=len(selections[0].masked),
                               batch_size=len(prepared))
    return total, report, [(s.visible, s.masked) for s in selections]


def pretrain_step(state: EncoderState, clips: list[VideoClip], cfg: RunConfig,
                  run: TrainRunState) -> tuple[LossReport, float]:
    """Sample a batch, run forward/backward, apply AdamW and the EMA update."""
    step = run.step
    lr_t = lr_at(step, cfg.lr, cfg.warmup_steps, cfg.total_steps)
    rng = step_rng(cfg.seed, step)
    replace = len(clips) < cfg.batch_size
    indices = rng.choice(len(clips), size=cfg.batch_size, replace=replace).tolist()
    prepared = prepare_batch(clips, indices, cfg, rng)

    with ComputationRecord():
        total, report, _ = forward_batch(state, prepared, cfg, rng, step=step)
        grad_map = backward(total)

    trainable = state.trainable_parameters()
    by_id = {id(p): name for name, p in trainable.items()}
    named_grads = {}
    for leaf, grad in grad_map.items():
        name = by_id.get(id(leaf))
        if name is not None:
            named_grads[name] = grad.data
    beta1, beta2 = cfg.betas
    adamw_step(trainable, named_grads, run.adam, lr_t, beta1, beta2,
               cfg.weight_decay)
    if cfg.agtp_ema:
        ema_update(state.agtp.target, state.agtp.query, cfg.ema_momentum)
    run.step += 1
    report.step = step
    return report, lr_t


# ---------------------------------------------------------------------------
# checkpoint plumbing

def state_to_tensors(state: EncoderState, run: TrainRunState) -> dict[str, np.ndarray]:
    out = {}
    for name, p in state.named_parameters():
        out[f"param/{name}"] = p.data
    for name in sorted(run.adam.m):
        out[f"adam_m/{name}"] = run.adam.m[name]
        out[f"adam_v/{name}"] = run.adam.v[name]
    out["meta/step"] = np.array([float(run.step)])
    out["meta/adam_t"] = np.array([float(run.adam.t)])
    return out


def save_checkpoint(path: str | Path, state: EncoderState, run: TrainRunState) -> None:
    save_tensors(path, config_digest(state.config), state_to_tensors(state, run))


def load_checkpoint(path: str | Path, state: EncoderState,
                    run: TrainRunState) -> None:
    """Restore parameters and optimizer state in place; the config digest
    must match the state's config."""
    _, tensors = load_tensors(path, expect_digest=config_digest(state.config))
    params = dict(state.named_parameters())
    for name, p in params.items():
        key = f"param/{name}"
        if key not in tensors:
            raise DataError(f"checkpoint is missing {key}")
        if tensors[key].shape != p.data.shape:
            raise DataError(f"{key} has shape {tensors[key].shape}, "
                            f"expected {p.data.shape}")
        p.data[...] = tensors[key]
    run.adam.m = {}
    run.adam.v = {}
    for key, arr in tensors.items():
        if key.startswith("adam_m/"):
            run.adam.m[key[len("adam_m/"):]] = arr.copy()
        elif key.startswith("adam_v/"):
            run.adam.v[key[len("adam_v/"):]] = arr.copy()
    run.step = int(tensors["meta/step"][0])
    run.adam.t = int(tensors["meta/adam_t"][0])


# ---------------------------------------------------------------------------
# full runs

def read_metrics(path: str | Path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [json.loads(line) for line in lines if line.strip()]


def run_pretraining(cfg: RunConfig, data_dir: str | Path | None = None,
                    out_dir: str | Path | None = None,
                    resume: str | Path | None = None,
                    save_every: int = 0,
                    log: bool = False) -> tuple[EncoderState, TrainRunState, Path]:
    """Train for cfg.total_steps (or the remainder when resuming).

    Writes one JSON object per step to <out_dir>/metrics.jsonl and returns
    (state, run state, metrics path).
    """
    data_dir = Path(cfg.data_dir if data_dir is None else data_dir)
    out = Path(cfg.out_dir if out_dir is None else out_dir)
    out.mkdir(parents=True, exist_ok=True)
    clips = load_dataset(data_dir)
    side = clips[0].side
    for i, clip in enumerate(clips):
        if clip.side != side:
            raise DataError(f"clip {i} side {clip.side} differs from {side}")
        if clip.frames < cfg.window_len:
            raise DataError(f"clip {i} has {clip.frames} frames, "
                            f"window_len is {cfg.window_len}")

    state = init_encoder_state(cfg, side)
    run = TrainRunState()
    if resume is not None:
        load_checkpoint(resume, state, run)

    metrics_path = out / "metrics.jsonl"
    t_start = time.time()
    with open(metrics_path, "a", encoding="utf-8") as sink:
        while run.step < cfg.total_steps:
            report, lr_t = pretrain_step(state, clips, cfg, run)
            record = report.as_dict()
            record["lr"] = lr_t
            record["timestamp"] = time.time()
            sink.write(json.dumps(record) + "\n")
            if log and (run.step % 50 == 0 or run.step == cfg.total_steps):
                print(f"step {run.step:5d}  total {report.total:.4f}  "
                      f"rec {report.rec:.4f}  align {report.align:.4f}  "
                      f"cl {report.cl:.4f}", flush=True)
            if report.total < run.best_total:
                run.best_total = report.total
                run.best_id = f"step{run.step}"
            if save_every and run.step % save_every == 0 and run.step < cfg.total_steps:
                ckpt = out / f"ckpt_{run.step:06d}.fprl"
                save_checkpoint(ckpt, state, run)
                run.last_id = str(ckpt)
    final = out / "ckpt_final.fprl"
    save_checkpoint(final, state, run)
    run.last_id = str(final)
    if log:
        print(f"finished {run.step} steps in {time.time() - t_start:.1f}s", flush=True)
    return state, run, metrics_path
