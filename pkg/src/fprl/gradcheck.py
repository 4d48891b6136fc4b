"""Finite-difference validation of analytic gradients.

`check_function` probes individual operations; `full_objective_check` runs
the complete training objective at desk dimensions and compares every
trainable parameter group against central differences. Probe points whose
forward pass grazes a ReLU kink are rejected and resampled, since central
differences are meaningless across the kink.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .errors import StructuralError
from .synth import ClipSpec, generate_clip
from .model import init_encoder_state
from .tensor import ComputationRecord, Tensor, backward, kink_watch
from .train import PreparedClip, forward_batch, step_rng
from .views import sample_views

KINK_TOL = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray,
                   atol: float = 1e-7) -> float:
    """Norm-relative disagreement, ignoring coordinates where both sides sit
    below the finite-difference noise floor `atol`."""
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    live = (np.abs(analytic) > atol) | (np.abs(numeric) > atol)
    if not live.any():
        return 0.0
    a, n = analytic[live], numeric[live]
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n)))


def check_function(fn, inputs: list[np.ndarray], eps: float = 1e-6,
                   tol: float = 1e-5, atol: float = 1e-7) -> float:
    """Compare the gradient of a scalar-valued fn(*tensors) with central
    differences over every coordinate of every input. Returns the worst
    relative error (and asserts it is within tol)."""
    tensors = [Tensor(x.copy(), grad_tracked=True) for x in inputs]
    with ComputationRecord():
        out = fn(*tensors)
        grads = backward(out)
    max_err = 0.0
    for k, t in enumerate(tensors):
        analytic = grads[t].data if t in grads else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = eps * max(1.0, abs(orig))
            flat[i] = orig + h
            f_plus = fn(*tensors).item()
            flat[i] = orig - h
            f_minus = fn(*tensors).item()
            flat[i] = orig
            num_flat[i] = (f_plus - f_minus) / (2 * h)
        err = relative_error(analytic, numeric, atol=atol)
        max_err = max(max_err, err)
        if err > tol:
            raise AssertionError(
                f"gradient mismatch on input {k}: rel err {err:.3e} > {tol:.1e}")
    return max_err


@dataclass
class GroupResult:
    name: str
    rel_err: float
    coords: int
    resampled: int


def full_objective_check(seed: int = 0, eps: float = 1e-6, tol: float = 1e-4,
                         coords_per_group: int = 4,
                         verbose: bool = False) -> list[GroupResult]:
    """Check every trainable parameter group of the complete objective.

    Desk dimensions (d=32, r=8, N=32, batch 2); the mask partition is frozen
    at the base point so the objective stays smooth, and the auxiliary mask
    term is enabled so the mask head receives gradient.
    """
    cfg = RunConfig(total_steps=10, warmup_steps=1, batch_size=2, window_len=12,
                    aux_mask_weight=0.5, seed=seed)
    spec = ClipSpec(frames=12, side=32, patch_size=8)
    rng = np.random.default_rng(seed)
    clips = [generate_clip(ClipSpec(frames=12, side=32, patch_size=8,
                                    seed=int(rng.integers(1 << 32))))
             for _ in range(cfg.batch_size)]
    state = init_encoder_state(cfg, spec.side)

    view_rng = step_rng(cfg.seed, 0)
    prepared = []
    for clip in clips:
        triple = sample_views(clip.frames, cfg.window_len, cfg.frames_per_view,
                              view_rng, frames=clip.pixels)
        prepared.append(PreparedClip(past=triple.past_frames,
                                     current=triple.current_frames,
                                     future=triple.future_frames))

    # base pass: analytic gradients and the frozen mask partitions
    with ComputationRecord():
        total, _, selections = forward_batch(state, prepared, cfg, view_rng, step=0)
        grad_map = backward(total)
    trainable = state.trainable_parameters()
    analytic = {}
    by_id = {id(p): name for name, p in trainable.items()}
    for leaf, grad in grad_map.items():
        name = by_id.get(id(leaf))
        if name is not None:
            analytic[name] = grad.data

    def loss_value() -> tuple[float, float]:
        sink: list = []
        with kink_watch(sink):
            value, _, _ = forward_batch(state, prepared, cfg, None, step=0,
                                        frozen_selections=selections)
        return value.item(), (min(sink) if sink else np.inf)

    rng = np.random.default_rng(seed + 1)
    base_value, _ = loss_value()
    # central differences lose ~ulp(f)/eps of precision; anything below that
    # is indistinguishable from zero
    fd_floor = 50.0 * abs(base_value) * np.finfo(np.float64).eps / eps
    results = []
    for name, p in trainable.items():
        a_full = analytic.get(name, np.zeros_like(p.data))
        flat = p.data.reshape(-1)
        a_flat = a_full.reshape(-1)
        n_coords = min(coords_per_group, flat.size)
        order = rng.permutation(flat.size)
        taken_a, taken_n = [], []
        resampled = 0
        cursor = 0
        while len(taken_a) < n_coords and cursor < flat.size:
            i = order[cursor]
            cursor += 1
            orig = flat[i]
            h = eps * max(1.0, abs(orig))
            flat[i] = orig + h
            f_plus, kink_plus = loss_value()
            flat[i] = orig - h
            f_minus, kink_minus = loss_value()
            flat[i] = orig
            if min(kink_plus, kink_minus) < KINK_TOL:
                resampled += 1
                continue
            taken_a.append(a_flat[i])
            taken_n.append((f_plus - f_minus) / (2 * h))
        if not taken_a:
            raise StructuralError(f"could not find kink-free probe for {name}")
        err = relative_error(np.array(taken_a), np.array(taken_n), atol=fd_floor)
        results.append(GroupResult(name=name, rel_err=err, coords=len(taken_a),
                                   resampled=resampled))
        if verbose:
            status = "ok " if err < tol else "FAIL"
            print(f"  {status} {name:40s} rel_err {err:.3e}", flush=True)
    return results
