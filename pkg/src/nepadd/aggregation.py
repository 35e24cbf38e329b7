"""Attention aggregation between the student (PADD) and teacher (NER) branches.

Attention Fusion mixes the two attended embeddings through a sigmoid gate.
Attention Transfer adds KL(teacher || student) between attention maps as an
auxiliary loss; the teacher map is always treated as a constant.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from nepadd import tensor as nt
from nepadd.errors import ConfigError, ContractError, NumericAbort, ShapeError
from nepadd.layers import Module
from nepadd.tensor import Parameter, Tensor

GATE_MODES = ("per-frame-scalar", "per-dimension")
ROW_REDUCTIONS = ("mean-over-query-rows", "pooled-column-mean")


class FusionGate(Module):
    """g = sigmoid([h_add, h_ner] @ W_g + b); one scalar per frame by default."""

    def __init__(self, dim, rng, mode="per-frame-scalar"):
        if mode not in GATE_MODES:
            raise ConfigError(f"gate mode must be one of {GATE_MODES}, got {mode!r}")
        self.dim, self.mode = dim, mode
        width = 1 if mode == "per-frame-scalar" else dim
        bound = 1.0 / math.sqrt(2 * dim)
        self.w_g = Parameter(rng.uniform(-bound, bound, size=(2 * dim, width)))
        self.b_g = Parameter(np.zeros(width))

    def forward(self, h_add, h_ner):
        return attention_fusion(h_add, h_ner, self)


def attention_fusion(h_add, h_ner, gate: FusionGate):
    """Return (H_fused, g) with H_fused = g*h_add + (1-g)*h_ner."""
    if h_add.shape != h_ner.shape or h_add.ndim != 2:
        raise ShapeError(f"fusion needs equal (T, D) inputs, got {h_add.shape} and {h_ner.shape}")
    if h_add.shape[1] != gate.dim:
        raise ShapeError(f"fusion gate built for D={gate.dim}, got inputs {h_add.shape}")
    g = nt.sigmoid(nt.concat_lastdim(h_add, h_ner) @ gate.w_g + gate.b_g)
    # h_ner + g*(h_add - h_ner) rounds differently at g in {0, 1}; keep the two-term form
    fused = g * h_add + (1.0 - g) * h_ner
    return fused, g


@dataclass(frozen=True)
class TransferConfig:
    lambda_kl: float | None = None
    epsilon_clamp: float = 1e-10
    row_reduction: str = "mean-over-query-rows"

    def __post_init__(self):
        if self.epsilon_clamp <= 0:
            raise ConfigError(f"epsilon_clamp must be > 0, got {self.epsilon_clamp}")
        if self.row_reduction not in ROW_REDUCTIONS:
            raise ConfigError(f"row_reduction must be one of {ROW_REDUCTIONS}")
        if self.lambda_kl is not None and self.lambda_kl < 0:
            raise ConfigError(f"lambda_kl must be >= 0, got {self.lambda_kl}")


def _check_stochastic(name, a, tol=1e-6):
    if a.ndim != 2:
        raise ShapeError(f"{name} must be a 2-D (query x key) map, got {a.shape}")
    dev = np.abs(a.sum(axis=1) - 1.0).max()
    if dev > tol or np.any(a < 0):
        raise ContractError(f"{name} rows are not stochastic (max |row sum - 1| = {dev:.3g})")


def attention_transfer_loss(alpha_ner, alpha_add, cfg: TransferConfig = TransferConfig()):
    """KL(alpha_ner || alpha_add) with gradient into alpha_add only.

    Default reduction averages the per-query-row KL over the T rows; the
    caller averages over utterances. ``pooled-column-mean`` instead compares
    the column means of the two maps.
    """
    p = alpha_ner.data if isinstance(alpha_ner, Tensor) else np.asarray(alpha_ner, float)
    q = nt.as_tensor(alpha_add)
    _check_stochastic("alpha_NER", p)
    _check_stochastic("alpha_ADD", q.data)
    if p.shape != q.shape:
        raise ShapeError(f"attention maps differ in size: {p.shape} vs {q.shape}")
    if cfg.row_reduction == "pooled-column-mean":
        p = p.mean(axis=0, keepdims=True)
        q = nt.mean(q, axis=0, keepdims=True)
    rows = p.shape[0]
    neg_entropy = float(np.sum(_xlogx(p)))
    cross = nt.sum(Tensor(p) * nt.log(nt.clip(q, lo=cfg.epsilon_clamp)))
    return (cross - neg_entropy) * (-1.0 / rows)


def _xlogx(p):
    out = np.zeros_like(p)
    pos = p > 0
    out[pos] = p[pos] * np.log(p[pos])
    return out


def total_loss(loss_ce, loss_kl, lambda_kl):
    """L = L_CE + lambda * L_KL. ``loss_kl=None`` means no transfer term."""
    if lambda_kl is None or lambda_kl < 0:
        raise ContractError(f"lambda_kl must be a number >= 0, got {lambda_kl!r}")
    ce = float(nt.as_tensor(loss_ce).item())
    kl = 0.0 if loss_kl is None else float(nt.as_tensor(loss_kl).item())
    if not (math.isfinite(ce) and math.isfinite(kl)):
        raise NumericAbort(f"non-finite loss: L_CE={ce}, L_KL={kl}")
    if loss_kl is None:
        return loss_ce
    return loss_ce + loss_kl * float(lambda_kl)


def resample_attention(alpha, T_new):
    """Linearly interpolate a T x T map onto T_new x T_new and renormalize rows.

    Only needed when teacher and student frame rates differ; the synthetic
    corpus never exercises it.
    """
    a = np.asarray(alpha.data if isinstance(alpha, Tensor) else alpha, dtype=np.float64)
    T = a.shape[0]
    if T == T_new:
        return a.copy()
    src = np.linspace(0.0, T - 1, T)
    dst = np.linspace(0.0, T - 1, T_new)
    rows = np.stack([np.interp(dst, src, a[:, j]) for j in range(T)], axis=1)
    out = np.stack([np.interp(dst, src, r) for r in rows], axis=0)
    out = np.maximum(out, 0.0)
    return out / out.sum(axis=1, keepdims=True)
