"""Gradient-sensitivity importance over the time-channel grid.

For each observed layer, the importance of channel c at segment t is the
squared Frobenius norm of the classification-loss gradient with respect to
that feature slice, averaged over the accessible samples. Normalizing each
layer by its own mean puts all layers on a comparable scale (layer mean 1).
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ImportanceMask:
    """Per-layer [T, C_l] sensitivity grids.

    ``raw`` holds the averaged squared gradient norms; ``normalized`` divides
    each layer by its mean so every layer's entries average to 1.
    """

    raw: tuple[np.ndarray, ...]
    normalized: tuple[np.ndarray, ...] | None
    step: int
    sample_count: int
    layer_names: tuple[str, ...]

    def __post_init__(self):
        for l, m in enumerate(self.raw):
            if m.ndim != 2:
                raise ValueError(f"raw layer {l} must be 2-D, got {m.ndim}-D")
            if (m < 0).any():
                raise ValueError(f"raw layer {l} has negative entries")


def compute_importance(
    prev_model, accessible_samples: Sequence, step: int = 0
) -> ImportanceMask:
    """Average squared gradient norms of the old model's loss per (l, t, c).

    ``prev_model`` must expose ``features(frames) -> FeatureStack`` and
    ``classification_loss(stack, label) -> scalar``; its parameters are left
    untouched. Per-sample gradients are probed sequentially and accumulated
    in float64 so the average is insensitive to sample order.
    """
    samples = list(accessible_samples)
    if not samples:
        raise ValueError("accessible_samples is empty; the mask is undefined")
    was_training = getattr(prev_model, "training", False)
    if hasattr(prev_model, "eval"):
        prev_model.eval()
    sums: list[np.ndarray] | None = None
    try:
        with torch.enable_grad():
            for sample in samples:
                frames = torch.from_numpy(np.ascontiguousarray(sample.frames)).unsqueeze(0)
                # graph must exist even when the old model's parameters are
                # frozen, so the probe rides on the input
                frames.requires_grad_(True)
                stack = prev_model.features(frames)
                loss = prev_model.classification_loss(stack, sample.label)
                grads = torch.autograd.grad(loss, stack.layers)
                if sums is None:
                    sums = [
                        np.zeros(tuple(g.shape[-4:-2]), dtype=np.float64) for g in grads
                    ]
                for l, g in enumerate(grads):
                    g2 = g.pow(2).sum(dim=(-2, -1)).reshape(g.shape[-4], g.shape[-3])
                    arr = g2.detach().cpu().double().numpy()
                    if not np.isfinite(arr).all():
                        t, c = np.argwhere(~np.isfinite(arr))[0]
                        raise ValueError(
                            f"non-finite gradient at layer {l}, t={t}, c={c} "
                            f"for sample {sample.id!r}"
                        )
                    sums[l] += arr
    finally:
        if was_training and hasattr(prev_model, "train"):
            prev_model.train()
    assert sums is not None
    raw = tuple(s / len(samples) for s in sums)
    names = tuple(f"block_{l}" for l in range(len(raw)))
    return ImportanceMask(
        raw=raw, normalized=None, step=int(step), sample_count=len(samples), layer_names=names
    )


def normalize_importance(mask: ImportanceMask) -> ImportanceMask:
    """Divide each layer by its mean entry; layer means become exactly 1.

    A layer that is identically zero has no scale to recover; it falls back
    to all-ones (uniform distillation) with a warning.
    """
    normalized = []
    for l, m in enumerate(mask.raw):
        mean = m.mean()
        if mean <= 0.0:
            log.warning(
                "importance layer %d is all-zero; normalizing to uniform ones", l
            )
            normalized.append(np.ones_like(m))
        else:
            normalized.append(m / mean)
    return replace(mask, normalized=tuple(normalized))


def export_heatmap(
    mask: ImportanceMask,
    layer: int,
    channel_range: tuple[int, int],
    out_dir: str | Path,
    stem: str | None = None,
) -> tuple[Path, Path]:
    """Write a T x |range| heatmap image and CSV for one layer's mask.

    Brighter pixels mark larger normalized importance. The CSV (`t,c,value`)
    stores full-precision decimal reprs, so re-reading reproduces the values
    bit-exactly.
    """
    if mask.normalized is None:
        raise ValueError("mask is not normalized; nothing to export")
    if not 0 <= layer < len(mask.normalized):
        raise ValueError(f"layer {layer} out of range [0, {len(mask.normalized)})")
    grid = mask.normalized[layer]
    lo, hi = channel_range
    if not (0 <= lo < hi <= grid.shape[1]):
        raise ValueError(
            f"channel range [{lo}, {hi}) invalid for {grid.shape[1]} channels"
        )
    window = grid[:, lo:hi]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = stem or f"importance_step{mask.step}_layer{layer}"
    png_path = out_dir / f"{base}.png"
    csv_path = out_dir / f"{base}.csv"

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(max(4.0, window.shape[1] / 4.0), 3.0))
    im = ax.imshow(window, aspect="auto", interpolation="nearest", cmap="viridis")
    ax.set_xlabel("channel")
    ax.set_ylabel("segment")
    ax.set_xticks(range(0, window.shape[1], max(1, window.shape[1] // 8)))
    ax.set_xticklabels(range(lo, hi, max(1, window.shape[1] // 8)))
    fig.colorbar(im, ax=ax, label="normalized importance")
    fig.tight_layout()
    fig.savefig(png_path)
    plt.close(fig)

    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "c", "value"])
        for t in range(window.shape[0]):
            for j in range(window.shape[1]):
                writer.writerow([t, lo + j, repr(float(window[t, j]))])
    return png_path, csv_path


def save_mask(mask: ImportanceMask, npz_path: str | Path, json_path: str | Path) -> None:
    """Archive the per-layer matrices plus JSON metadata."""
    arrays = {f"raw_{l}": m for l, m in enumerate(mask.raw)}
    if mask.normalized is not None:
        arrays.update({f"normalized_{l}": m for l, m in enumerate(mask.normalized)})
    np.savez(npz_path, **arrays)
    Path(json_path).write_text(
        json.dumps(
            {
                "step": mask.step,
                "sample_count": mask.sample_count,
                "layer_names": list(mask.layer_names),
            },
            sort_keys=True,
        )
    )


def load_mask(npz_path: str | Path, json_path: str | Path) -> ImportanceMask:
    meta = json.loads(Path(json_path).read_text())
    with np.load(npz_path) as archive:
        n = len(meta["layer_names"])
        raw = tuple(archive[f"raw_{l}"] for l in range(n))
        normalized = None
        if f"normalized_0" in archive:
            normalized = tuple(archive[f"normalized_{l}"] for l in range(n))
    return ImportanceMask(
        raw=raw,
        normalized=normalized,
        step=int(meta["step"]),
        sample_count=int(meta["sample_count"]),
        layer_names=tuple(meta["layer_names"]),
    )
