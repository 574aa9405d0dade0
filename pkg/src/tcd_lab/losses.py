"""Distillation, orthogonality, and combined training objectives.

All losses accept feature stacks whose tensors are either per-sample
([T, C, H, W]) or batched ([B, T, C, H, W]); batched inputs return the
per-sample mean. Previous-model features are treated as constants: no
gradient flows into the old model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

from .importance import ImportanceMask
from .model import FeatureStack, _unit


@dataclass
class LossWeights:
    """Balance of the combined objective.

    ``lambda_scale`` is the adaptive factor sqrt(|C_1:k| / |C_k|) recomputed
    per incremental step; it multiplies both distillation weights, never the
    orthogonality weight.
    """

    alpha_feat: float = 1.0
    alpha_embed: float = 0.01
    beta: float = 0.1
    lambda_scale: float = 1.0


def adaptive_lambda(n_seen_classes: int, n_new_classes: int) -> float:
    """sqrt(|C_1:k| / |C_k|) where C_1:k includes the new classes."""
    if n_new_classes < 1 or n_seen_classes < n_new_classes:
        raise ValueError("need 1 <= n_new_classes <= n_seen_classes")
    return math.sqrt(n_seen_classes / n_new_classes)


def _pair_layers(current: FeatureStack, previous: FeatureStack):
    if len(current.layers) != len(previous.layers):
        raise ValueError(
            f"layer counts differ: {len(current.layers)} vs {len(previous.layers)}"
        )
    for l, (cur, prev) in enumerate(zip(current.layers, previous.layers)):
        if cur.shape != prev.shape:
            raise ValueError(
                f"layer {l} shapes differ: {tuple(cur.shape)} vs {tuple(prev.shape)}"
            )
        yield l, cur, prev


def _per_tc_sq(diff: Tensor) -> Tensor:
    """Squared Frobenius norm over the spatial dims -> [..., T, C]."""
    return diff.pow(2).sum(dim=(-2, -1))


def distillation_loss(
    current: FeatureStack, previous: FeatureStack, mask: ImportanceMask
) -> Tensor:
    """Importance-weighted squared feature drift, summed over layers.

    sum_l sum_t sum_c M_hat[l][t][c] * ||F_new[l][t][c] - F_old[l][t][c]||_F^2
    """
    if mask.normalized is None:
        raise ValueError("mask is not normalized")
    if len(mask.normalized) != len(current.layers):
        raise ValueError(
            f"mask has {len(mask.normalized)} layers, stacks have {len(current.layers)}"
        )
    total: Tensor | None = None
    for l, cur, prev in _pair_layers(current, previous):
        w = torch.as_tensor(mask.normalized[l], dtype=cur.dtype, device=cur.device)
        if tuple(w.shape) != tuple(cur.shape[-4:-2]):
            raise ValueError(
                f"mask layer {l} shape {tuple(w.shape)} does not match features "
                f"{tuple(cur.shape[-4:-2])}"
            )
        per_tc = _per_tc_sq(cur - prev.detach()) * w
        term = per_tc.sum(dim=(-2, -1))
        total = term if total is None else total + term
    assert total is not None
    return total.mean() if total.dim() > 0 else total


def unweighted_distillation_loss(current: FeatureStack, previous: FeatureStack) -> Tensor:
    """Squared feature drift with all weights equal to one."""
    total: Tensor | None = None
    for _, cur, prev in _pair_layers(current, previous):
        term = _per_tc_sq(cur - prev.detach()).sum(dim=(-2, -1))
        total = term if total is None else total + term
    assert total is not None
    return total.mean() if total.dim() > 0 else total


def orthogonality_loss(current: FeatureStack) -> Tensor:
    """Deviation of each channel's per-frame rows from orthonormality.

    Per layer and channel, the T spatial maps are flattened to rows,
    L2-normalized, and compared against the identity Gram matrix:
    sum_l sum_c ||I_T - R R^T||_F^2. Zero rows survive the epsilon guard as
    near-zero rows and contribute ~1 through the diagonal.
    """
    total: Tensor | None = None
    for feat in current.layers:
        squeeze = feat.dim() == 4
        x = feat.unsqueeze(0) if squeeze else feat
        b, t, c = x.shape[:3]
        rows = x.permute(0, 2, 1, 3, 4).reshape(b, c, t, -1)
        rows = _unit(rows)
        gram = rows @ rows.transpose(-1, -2)
        eye = torch.eye(t, dtype=x.dtype, device=x.device)
        dev = (eye - gram).pow(2).sum(dim=(-2, -1)).sum(dim=-1)  # [B]
        term = dev.squeeze(0) if squeeze else dev
        total = term if total is None else total + term
    if total is None:
        raise ValueError("feature stack has no layers")
    return total.mean() if total.dim() > 0 else total


def embedding_distillation_loss(current: Tensor, previous: Tensor) -> Tensor:
    """Squared Euclidean distance between current and previous embeddings."""
    if current.shape != previous.shape:
        raise ValueError(
            f"embedding shapes differ: {tuple(current.shape)} vs {tuple(previous.shape)}"
        )
    d = (current - previous.detach()).pow(2).sum(dim=-1)
    return d.mean() if d.dim() > 0 else d


def total_loss(
    cls: Tensor | float,
    dist_feat: Tensor | float,
    dist_embed: Tensor | float,
    ortho: Tensor | float,
    w: LossWeights,
) -> Tensor:
    """cls + lambda*alpha_feat*dist_feat + lambda*alpha_embed*dist_embed + beta*ortho."""
    terms = {"cls": cls, "dist_feat": dist_feat, "dist_embed": dist_embed, "ortho": ortho}
    for name, value in terms.items():
        v = value.detach() if torch.is_tensor(value) else torch.tensor(float(value))
        if not torch.isfinite(v).all():
            raise ValueError(f"loss term '{name}' is not finite")
    return (
        _as_tensor(cls)
        + w.lambda_scale * w.alpha_feat * _as_tensor(dist_feat)
        + w.lambda_scale * w.alpha_embed * _as_tensor(dist_embed)
        + w.beta * _as_tensor(ortho)
    )


def _as_tensor(v: Tensor | float) -> Tensor:
    return v if torch.is_tensor(v) else torch.tensor(float(v))
