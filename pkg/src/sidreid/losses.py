"""Training objectives: semantic guidance, identification and prototype regularisation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_sem: float = 5.0
    lambda_id: float = 1.0
    lambda_reg: float = 0.001
    alpha: float = 0.4
    beta: float = 1.8
    # replaces every adaptive margin with one constant when set
    fixed_margin: float | None = None

    def __post_init__(self):
        if min(self.lambda_sem, self.lambda_id, self.lambda_reg, self.alpha, self.beta) < 0:
            raise ValueError("loss weights and margin parameters must be non-negative")
        if self.alpha + self.beta <= 0 or self.beta <= 0:
            raise ValueError("beta must be positive so that every margin is defined")


@dataclass
class LossReport:
    total: torch.Tensor
    sem: torch.Tensor
    id_ce: torch.Tensor
    id_triplet: torch.Tensor
    reg: torch.Tensor
    per_group: dict = field(default_factory=dict)

    def as_floats(self) -> dict[str, float]:
        out = {k: float(getattr(self, k).detach()) for k in ("total", "sem", "id_ce", "id_triplet", "reg")}
        for name, vals in self.per_group.items():
            for g, v in vals.items():
                out[f"{name}/{g}"] = float(v)
        return out


def boundary_margin(count_g, count_total, alpha=0.4, beta=1.8):
    """Adaptive margin log(alpha * count_g / count_total + beta); accepts scalars or arrays."""
    if np.any(np.asarray(count_total) <= 0):
        raise ValueError("count_total must be positive")
    ratio = np.asarray(count_g, dtype=np.float64) / np.asarray(count_total, dtype=np.float64)
    if np.any(ratio < 0) or np.any(ratio > 1):
        raise ValueError("count_g must lie in [0, count_total]")
    m = np.log(alpha * ratio + beta)
    return float(m) if np.ndim(m) == 0 else m


def group_margins(sid_counts: Mapping[str, np.ndarray], num_persons: int, weights: LossWeights) -> dict[str, np.ndarray]:
    """Per-group margin tables computed once from training-set person counts."""
    out = {}
    for g, counts in sid_counts.items():
        if weights.fixed_margin is not None:
            out[g] = np.full(len(counts), weights.fixed_margin)
        else:
            out[g] = boundary_margin(np.asarray(counts), num_persons, weights.alpha, weights.beta)
    return out


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a * b).sum(-1) / (a.norm(dim=-1).clamp_min(EPS) * b.norm(dim=-1).clamp_min(EPS))


def semantic_guidance_loss(reps: torch.Tensor, prototypes: Sequence[torch.Tensor], sids: torch.Tensor,
                           margins: Sequence[torch.Tensor], reduce=True):
    """Hinge on cosine similarity between each representation and its SID prototype.

    reps: (B, G, d); prototypes[j]: (S_j, d); sids: (B, G) long; margins[j]: (S_j,).
    Returns the mean over images and groups, or the (B, G) hinge terms with ``reduce=False``.
    """
    terms = []
    for j, (protos, m) in enumerate(zip(prototypes, margins)):
        k = sids[:, j]
        s = cosine(reps[:, j], protos[k])
        terms.append(torch.clamp(1.0 - m[k] - s, min=0.0))
    terms = torch.stack(terms, 1)
    return terms.mean() if reduce else terms


def check_pk(ids: torch.Tensor):
    uniq, counts = torch.unique(ids, return_counts=True)
    if len(uniq) < 2 or bool((counts < 2).any()):
        raise ValueError("identification loss needs at least two identities with two or more samples each")


def pairwise_distance(x: torch.Tensor) -> torch.Tensor:
    sq = (x.unsqueeze(1) - x.unsqueeze(0)).pow(2).sum(-1)
    return sq.clamp_min(EPS).sqrt()


def batch_hard_triplet(feats: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    """Soft-margin triplet terms log(1 + exp(d_ap - d_an)) with the farthest positive and nearest negative.

    feats: (B, d); returns (B,) per-anchor terms.
    """
    dist = pairwise_distance(feats)
    same = ids.unsqueeze(0) == ids.unsqueeze(1)
    d_ap = torch.where(same, dist, torch.full_like(dist, -math.inf)).amax(1)
    d_an = torch.where(same, torch.full_like(dist, math.inf), dist).amin(1)
    return F.softplus(d_ap - d_an)


def identification_loss(reps: torch.Tensor, logits: torch.Tensor, ids: torch.Tensor, reduce=True):
    """Cross-entropy plus batch-hard soft-margin triplet, mined independently per group.

    reps: (B, G, d); logits: (B, G, C); ids: (B,) contiguous train labels.
    """
    check_pk(ids)
    G = reps.shape[1]
    ce = torch.stack([F.cross_entropy(logits[:, j], ids, reduction="none") for j in range(G)], 1)
    tri = torch.stack([batch_hard_triplet(reps[:, j], ids) for j in range(G)], 1)
    if reduce:
        return ce.mean(), tri.mean()
    return ce, tri


def residual_vector(a_m, a_n, basis):
    """sum_l v_l * (A_m(l) - A_n(l)); basis is (L, d)."""
    a_m, a_n = torch.as_tensor(a_m), torch.as_tensor(a_n)
    basis = torch.as_tensor(basis)
    if a_m.shape[-1] != basis.shape[0] or a_n.shape[-1] != basis.shape[0]:
        raise ValueError(f"attribute vector length {a_m.shape[-1]} does not match {basis.shape[0]} basis vectors")
    return (a_m - a_n).to(basis.dtype) @ basis


def group_regularization(protos: torch.Tensor, basis: torch.Tensor, attrs: torch.Tensor) -> torch.Tensor:
    """sum over all ordered SID pairs of ||p_m - p_n - r_mn||^2."""
    # p_m - p_n - (A_m - A_n) V == q_m - q_n with q = P - A V
    q = protos - attrs.to(protos.dtype) @ basis
    diff = q.unsqueeze(1) - q.unsqueeze(0)
    return diff.pow(2).sum()


def regularization_loss(prototypes: Sequence[torch.Tensor], bases: Sequence[torch.Tensor],
                        attrs: Sequence[torch.Tensor], reduce=True):
    terms = torch.stack([group_regularization(p, v, a) for p, v, a in zip(prototypes, bases, attrs)])
    return terms.mean() if reduce else terms


def total_loss(sem, id_ce, id_triplet, reg, weights: LossWeights, per_group=None) -> LossReport:
    total = weights.lambda_sem * sem + weights.lambda_id * (id_ce + id_triplet) + weights.lambda_reg * reg
    return LossReport(total, sem, id_ce, id_triplet, reg, per_group or {})
