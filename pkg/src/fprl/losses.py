"""Pre-training objectives: masked-pixel reconstruction, cross-view feature
alignment against the frozen teacher, view-level InfoNCE, and the optional
mask-head auxiliary term."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, DomainError, StructuralError
from .tensor import (Tensor, add, concat, div, exp, gather_rows, log, matmul,
                     mul, reshape, row_cosine, sqrt, stop_gradient, sub,
                     tmean, tsum)


@dataclass
class LossWeights:
    rec: float = 1.0            # lambda_1
    align: float = 0.8          # lambda_2
    contrast: float = 1.0       # lambda_3
    past_future: float = 20.0   # lambda_pf
    tau: float = 0.1
    include_positive_in_denominator: bool = False
    aux_mask_weight: float = 0.0

    def __post_init__(self):
        if min(self.rec, self.align, self.contrast, self.past_future) < 0:
            raise DomainError("loss weights must be nonnegative")
        if self.tau <= 0:
            raise DomainError("temperature must be positive")


@dataclass
class LossReport:
    rec: float
    pt: float
    ft: float
    pf: float
    align: float
    cl: float
    aux_mask: float
    total: float
    step: int = 0
    n_masked: int = 0
    batch_size: int = 0

    def as_dict(self) -> dict:
        return {"step": self.step, "rec": self.rec, "pt": self.pt, "ft": self.ft,
                "pf": self.pf, "align": self.align, "cl": self.cl,
                "aux_mask": self.aux_mask, "total": self.total,
                "n_masked": self.n_masked, "batch_size": self.batch_size}


def _l2_normalize_rows(m: Tensor) -> Tensor:
    norms = sqrt(tsum(mul(m, m), axis=1, keepdims=True))
    return div(m, norms)


def loss_rec(x_hat: Tensor, x_target: Tensor, masked: list[int]) -> Tensor:
    """Mean over masked tokens of the squared pixel error against
    per-patch-normalized targets."""
    if not masked:
        raise DomainError("loss_rec needs a non-empty masked set")
    if x_hat.shape != x_target.shape:
        raise StructuralError(f"shape mismatch {x_hat.shape} vs {x_target.shape}")
    diff = sub(gather_rows(x_hat, masked), gather_rows(x_target, masked))
    return tmean(tsum(mul(diff, diff), axis=1))


def per_token_rec_errors(x_hat: Tensor, x_target: Tensor) -> Tensor:
    """Squared error per token, gradient-detached (drives the auxiliary term)."""
    diff = x_hat.data - x_target.data
    return Tensor((diff * diff).sum(axis=1))


def loss_align(z_c_p: Tensor, z_c_f: Tensor, z_t: Tensor, masked: list[int],
               lambda_pf: float) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Cosine alignment of both completed streams to the teacher plus an L2
    consistency between the streams, all over the masked positions.

    Returns (pt, ft, pf, align) with align = pt + ft + lambda_pf * pf.
    """
    if not masked:
        raise DomainError("loss_align needs a non-empty masked set")
    zt = stop_gradient(z_t)
    zt_rows = gather_rows(zt, masked)
    if np.any(np.linalg.norm(zt_rows.data, axis=1) < 1e-12):
        raise DegenerateInputError("teacher feature with zero norm on a masked token")
    zp_rows = gather_rows(z_c_p, masked)
    zf_rows = gather_rows(z_c_f, masked)
    pt = sub(Tensor(1.0), tmean(row_cosine(zp_rows, zt_rows)))
    ft = sub(Tensor(1.0), tmean(row_cosine(zf_rows, zt_rows)))
    d = sub(zp_rows, zf_rows)
    pf = tmean(tsum(mul(d, d), axis=1))
    align = add(add(pt, ft), mul(Tensor(lambda_pf), pf))
    return pt, ft, pf, align


def loss_cl(triples: list[tuple[Tensor, Tensor, Tensor]], tau: float,
            include_positive: bool = False, use_raw_dot: bool = False) -> Tensor:
    """In-batch InfoNCE over view-level embeddings.

    `triples` holds (p_c, p_p, p_f) per batch element; the key set is every
    target embedding in the batch. By default the positive key is excluded
    from its own denominator; `include_positive` switches to the standard
    form. Similarities are cosine on unit-normalized embeddings unless
    `use_raw_dot`.
    """
    if not triples:
        raise StructuralError("loss_cl needs at least one batch element")
    if tau <= 0:
        raise DomainError("temperature must be positive")
    d = triples[0][0].size
    queries = concat([reshape(t[0], (1, d)) for t in triples], axis=0)
    keys = concat([reshape(t[i], (1, d)) for t in triples for i in (1, 2)], axis=0)
    if not use_raw_dot:
        queries = _l2_normalize_rows(queries)
        keys = _l2_normalize_rows(keys)
    sims = div(matmul(queries, keys.T), Tensor(tau))       # [B, 2B]
    e = exp(sims)
    batch = len(triples)
    terms = []
    for b in range(batch):
        row = reshape(gather_rows(e, [b]), (2 * batch,))
        for pos in (2 * b, 2 * b + 1):
            numer = gather_rows(reshape(row, (2 * batch, 1)), [pos])
            if include_positive:
                denom = tsum(row)
            else:
                others = [k for k in range(2 * batch) if k != pos]
                denom = tsum(gather_rows(reshape(row, (2 * batch, 1)), others))
            terms.append(sub(log(denom), log(reshape(numer, ()))))
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return div(total, Tensor(float(batch)))


def loss_aux_mask(probs: Tensor, rec_errors: Tensor, masked: list[int]) -> Tensor:
    """-sum over masked tokens of P_i * err_i; rewards probability mass on
    hard-to-reconstruct tokens. `rec_errors` must be detached."""
    if rec_errors.grad_tracked:
        raise StructuralError("per-token errors must be gradient-detached")
    if not masked:
        return Tensor(0.0)
    p_rows = gather_rows(reshape(probs, (probs.size, 1)), masked)
    e_rows = gather_rows(reshape(rec_errors, (rec_errors.size, 1)), masked)
    return mul(Tensor(-1.0), tsum(mul(p_rows, e_rows)))


def loss_total(rec: Tensor, align_parts: tuple[Tensor, Tensor, Tensor, Tensor],
               cl: Tensor, aux_mask: Tensor, weights: LossWeights,
               step: int = 0, n_masked: int = 0,
               batch_size: int = 0) -> tuple[Tensor, LossReport]:
    """Weighted sum of the objectives plus a per-step report."""
    pt, ft, pf, align = align_parts
    total = add(add(mul(Tensor(weights.rec), rec), mul(Tensor(weights.align), align)),
                add(mul(Tensor(weights.contrast), cl),
                    mul(Tensor(weights.aux_mask_weight), aux_mask)))
    report = LossReport(rec=rec.item(), pt=pt.item(), ft=ft.item(), pf=pf.item(),
                        align=align.item(), cl=cl.item(), aux_mask=aux_mask.item(),
                        total=total.item(), step=step, n_masked=n_masked,
                        batch_size=batch_size)
    return total, report
