"""Temporal backbone with channel-shift time mixing and a proxy-cosine head.

The backbone is a small residual convolutional network applied per frame,
with a temporal shift before every block so adjacent segments exchange
information at zero extra cost. Each block's output is an observation point
for feature distillation; the pre-classifier embedding pools over space and
time. The classifier head scores classes by proxy-softmax-weighted cosine
similarity and is trained with a margin-based NCA loss.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .task_data import VideoSample

NORM_EPS = 1e-12


def _unit(v: Tensor, dim: int = -1) -> Tensor:
    """L2-normalize with an epsilon-guarded denominator.

    Uses clamp rather than add so exactly-unit vectors stay bit-exact and
    zero vectors map to zero.
    """
    return v / v.norm(dim=dim, keepdim=True).clamp_min(NORM_EPS)


# ---------------------------------------------------------------------------
# Temporal shift
# ---------------------------------------------------------------------------


def temporal_shift(features: Tensor, shift_fraction: float) -> Tensor:
    """Shift channel blocks along time; vacated boundary slices are zero.

    The first ``floor(shift_fraction * C)`` channels move backward in time
    (slice t receives slice t+1), the next block moves forward (slice t
    receives slice t-1), the rest pass through. Accepts [T, C, H, W] or
    [B, T, C, H, W].
    """
    if not 0.0 <= shift_fraction <= 0.5:
        raise ValueError(f"shift_fraction={shift_fraction} must be in [0, 0.5]")
    squeeze = features.dim() == 4
    x = features.unsqueeze(0) if squeeze else features
    if x.dim() != 5:
        raise ValueError(f"expected 4-D or 5-D tensor, got {features.dim()}-D")
    c = x.shape[2]
    fold = int(shift_fraction * c)
    out = torch.zeros_like(x)
    if fold > 0:
        out[:, :-1, :fold] = x[:, 1:, :fold]  # backward: t <- t+1
        out[:, 1:, fold : 2 * fold] = x[:, :-1, fold : 2 * fold]  # forward: t <- t-1
    out[:, :, 2 * fold :] = x[:, :, 2 * fold :]
    return out.squeeze(0) if squeeze else out


# ---------------------------------------------------------------------------
# Backbone
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BackboneConfig:
    """Shapes and knobs of the desk-scale temporal backbone."""

    t_segments: int
    in_channels: int
    height: int
    width: int
    block_channels: tuple[int, ...] = (8, 16, 32, 32)
    block_strides: tuple[int, ...] = (1, 2, 1, 2)
    shift_fraction: float = 0.125
    embedding_dim: int = 32

    def validate(self) -> None:
        if len(self.block_channels) != len(self.block_strides):
            raise ValueError("block_channels and block_strides lengths differ")
        if len(self.block_channels) < 1:
            raise ValueError("need at least one block")
        if not 0.0 <= self.shift_fraction <= 0.5:
            raise ValueError("shift_fraction must be in [0, 0.5]")
        if min(self.t_segments, self.in_channels, self.height, self.width) < 1:
            raise ValueError("t_segments, in_channels, height, width must be >= 1")
        h, w = self.height, self.width
        for s in self.block_strides:
            h = (h + s - 1) // s
            w = (w + s - 1) // s
        if min(h, w) < 1:
            raise ValueError("spatial size collapses below 1x1")

    @property
    def num_layers(self) -> int:
        return len(self.block_channels)

    def to_dict(self) -> dict:
        return {
            "t_segments": self.t_segments,
            "in_channels": self.in_channels,
            "height": self.height,
            "width": self.width,
            "block_channels": list(self.block_channels),
            "block_strides": list(self.block_strides),
            "shift_fraction": self.shift_fraction,
            "embedding_dim": self.embedding_dim,
        }

    @staticmethod
    def from_dict(d: dict) -> "BackboneConfig":
        return BackboneConfig(
            t_segments=int(d["t_segments"]),
            in_channels=int(d["in_channels"]),
            height=int(d["height"]),
            width=int(d["width"]),
            block_channels=tuple(int(c) for c in d["block_channels"]),
            block_strides=tuple(int(s) for s in d["block_strides"]),
            shift_fraction=float(d["shift_fraction"]),
            embedding_dim=int(d["embedding_dim"]),
        )


class _ShiftBlock(nn.Module):
    """Temporal shift followed by a two-conv residual unit over frames."""

    def __init__(self, c_in: int, c_out: int, stride: int, shift_fraction: float):
        super().__init__()
        self.shift_fraction = shift_fraction
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        if c_in != c_out or stride != 1:
            self.proj: nn.Module | None = nn.Conv2d(c_in, c_out, 1, stride=stride)
        else:
            self.proj = None

    def forward(self, x: Tensor) -> Tensor:  # x: [B, T, C, H, W]
        z = temporal_shift(x, self.shift_fraction)
        b, t = z.shape[:2]
        zf = z.flatten(0, 1)
        h = F.relu(self.conv1(zf))
        h = self.conv2(h)
        skip = self.proj(zf) if self.proj is not None else zf
        out = F.relu(h + skip)
        return out.view(b, t, *out.shape[1:])


@dataclass
class FeatureStack:
    """Observed per-layer features, embedding, and class scores.

    Tensors carry either per-sample shapes ([T, C, H, W], [D], [M]) or a
    leading batch dimension.
    """

    layers: list[Tensor]
    embedding: Tensor
    scores: Optional[Tensor] = None


class TemporalBackbone(nn.Module):
    """L shifted residual blocks over frames plus a pooled linear embedding."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.stem = nn.Conv2d(config.in_channels, config.block_channels[0], 3, padding=1)
        blocks = []
        c_in = config.block_channels[0]
        for c_out, stride in zip(config.block_channels, config.block_strides):
            blocks.append(_ShiftBlock(c_in, c_out, stride, config.shift_fraction))
            c_in = c_out
        self.blocks = nn.ModuleList(blocks)
        self.embed = nn.Linear(c_in, config.embedding_dim)

    def forward(
        self, frames: Tensor, probes: Optional[Sequence[Optional[Tensor]]] = None
    ) -> tuple[list[Tensor], Tensor]:
        cfg = self.config
        if frames.dim() != 5 or tuple(frames.shape[1:]) != (
            cfg.t_segments,
            cfg.in_channels,
            cfg.height,
            cfg.width,
        ):
            raise ValueError(
                f"expected frames of shape [B, {cfg.t_segments}, {cfg.in_channels}, "
                f"{cfg.height}, {cfg.width}], got {tuple(frames.shape)}"
            )
        b, t = frames.shape[:2]
        x = F.relu(self.stem(frames.flatten(0, 1))).view(b, t, -1, cfg.height, cfg.width)
        layers: list[Tensor] = []
        for l, block in enumerate(self.blocks):
            x = block(x)
            if probes is not None and probes[l] is not None:
                x = x + probes[l]
            layers.append(x)
        pooled = x.mean(dim=(3, 4)).mean(dim=1)  # spatial then temporal average
        embedding = self.embed(pooled)
        return layers, embedding


# ---------------------------------------------------------------------------
# Local similarity classifier head
# ---------------------------------------------------------------------------


class LSCHead(nn.Module):
    """Per-class proxy bank scoring by softmax-weighted cosine similarity.

    Each registered class owns ``n_proxy`` unit-norm proxies; the score of
    class m for embedding h is sum_n softmax_n(<w_mn, h_hat>) * <w_mn, h_hat>
    with h_hat the unit-normalized embedding. The scale ``eta`` is a
    trainable parameter; proxies are re-normalized after every optimizer
    step via :meth:`renormalize`.
    """

    def __init__(
        self,
        embedding_dim: int,
        n_proxy: int = 3,
        delta: float = 0.6,
        eta_init: float = 1.0,
        eta_trainable: bool = True,
    ):
        super().__init__()
        if n_proxy < 1:
            raise ValueError("n_proxy must be >= 1")
        self.embedding_dim = embedding_dim
        self.n_proxy = n_proxy
        self.delta = float(delta)
        self.class_ids: list[int] = []
        self.proxies = nn.Parameter(torch.zeros(0, n_proxy, embedding_dim))
        self.eta = nn.Parameter(torch.tensor(float(eta_init)), requires_grad=eta_trainable)

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    def register_classes(
        self, class_ids: Sequence[int], generator: Optional[torch.Generator] = None
    ) -> None:
        """Append fresh unit-norm random proxies for previously unseen classes."""
        new_ids = [int(c) for c in class_ids]
        dup = set(new_ids) & set(self.class_ids)
        if dup:
            raise ValueError(f"classes already registered: {sorted(dup)}")
        if len(set(new_ids)) != len(new_ids):
            raise ValueError("duplicate class ids in registration")
        if not new_ids:
            return
        fresh = torch.randn(
            len(new_ids),
            self.n_proxy,
            self.embedding_dim,
            generator=generator,
            dtype=self.proxies.dtype,
        )
        fresh = _unit(fresh)
        with torch.no_grad():
            data = torch.cat([self.proxies.data, fresh], dim=0)
        self.proxies = nn.Parameter(data)
        self.class_ids.extend(new_ids)

    def renormalize(self) -> None:
        """Restore the unit-norm proxy invariant after an optimizer step."""
        with torch.no_grad():
            self.proxies.data = _unit(self.proxies.data)

    def forward(self, embedding: Tensor) -> Tensor:
        return lsc_scores(embedding, self)

    def position_of(self, class_id: int) -> int:
        return self.class_ids.index(class_id)


def lsc_scores(embedding: Tensor, head: LSCHead) -> Tensor:
    """Per-class proxy-softmax-weighted cosine scores.

    Accepts a single embedding [D] or a batch [B, D]; returns [M] or [B, M]
    with columns ordered like ``head.class_ids``.
    """
    if head.num_classes == 0:
        raise ValueError("no classes registered")
    squeeze = embedding.dim() == 1
    h = embedding.unsqueeze(0) if squeeze else embedding
    h_hat = _unit(h)
    # sims[b, m, n] = <w_mn, h_hat_b>
    sims = torch.einsum("bd,mnd->bmn", h_hat, head.proxies)
    weights = torch.softmax(sims, dim=-1)
    scores = (weights * sims).sum(dim=-1)
    return scores.squeeze(0) if squeeze else scores


def nca_loss(
    scores: Tensor,
    label: Tensor | int,
    eta: Tensor | float,
    delta: Tensor | float,
) -> Tensor:
    """Hinged margin NCA loss over class scores.

    loss = [ -eta*(s_y - delta) + logsumexp_{i != y}(eta * s_i) ]_+
    (log-sum-exp subtracts its max internally, so large eta cannot
    overflow). Accepts per-sample scores [M] with an int label or a batch
    [B, M] with labels [B]; batches return the mean.
    """
    squeeze = scores.dim() == 1
    s = scores.unsqueeze(0) if squeeze else scores
    labels = torch.as_tensor(label, device=s.device, dtype=torch.long).reshape(-1)
    if labels.numel() != s.shape[0]:
        raise ValueError("labels and scores batch sizes differ")
    if labels.min() < 0 or labels.max() >= s.shape[1]:
        raise ValueError("label outside score vector")
    if s.shape[1] == 1:
        return (s.sum() * 0.0) if squeeze else (s.sum(dim=1) * 0.0).mean()
    eta_t = torch.as_tensor(eta, device=s.device, dtype=s.dtype) if not torch.is_tensor(eta) else eta
    z = eta_t * s
    target = z.gather(1, labels.view(-1, 1)).squeeze(1)
    others = z.masked_fill(
        F.one_hot(labels, num_classes=s.shape[1]).bool(), float("-inf")
    )
    loss = torch.relu(-(target - eta_t * float(delta)) + torch.logsumexp(others, dim=1))
    return loss.squeeze(0) if squeeze else loss.mean()


# ---------------------------------------------------------------------------
# Full incremental model
# ---------------------------------------------------------------------------


class IncrementalModel(nn.Module):
    """Backbone plus classifier head; the unit trained at every stage."""

    def __init__(self, backbone: TemporalBackbone, head: LSCHead):
        super().__init__()
        self.backbone = backbone
        self.head = head

    @property
    def config(self) -> BackboneConfig:
        return self.backbone.config

    def features(
        self, frames: Tensor, probes: Optional[Sequence[Optional[Tensor]]] = None
    ) -> FeatureStack:
        frames = frames.to(dtype=next(self.parameters()).dtype)
        layers, embedding = self.backbone(frames, probes=probes)
        scores = lsc_scores(embedding, self.head) if self.head.num_classes else None
        return FeatureStack(layers=layers, embedding=embedding, scores=scores)

    def classification_loss(self, stack: FeatureStack, labels: Tensor | int) -> Tensor:
        if stack.scores is None:
            raise ValueError("no classes registered; scores unavailable")
        positions = _labels_to_positions(labels, self.head)
        return nca_loss(stack.scores, positions, self.head.eta, self.head.delta)


def _labels_to_positions(labels: Tensor | int, head: LSCHead) -> Tensor:
    lab = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    lookup = {c: i for i, c in enumerate(head.class_ids)}
    try:
        return torch.tensor([lookup[int(c)] for c in lab], dtype=torch.long)
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]} not registered in head") from exc


def extract_features(model: IncrementalModel, sample: VideoSample) -> FeatureStack:
    """Forward one sample; returns per-sample (unbatched) tensors."""
    frames = torch.from_numpy(np.ascontiguousarray(sample.frames)).unsqueeze(0)
    stack = model.features(frames)
    return FeatureStack(
        layers=[t.squeeze(0) for t in stack.layers],
        embedding=stack.embedding.squeeze(0),
        scores=None if stack.scores is None else stack.scores.squeeze(0),
    )


def build_model(
    config: BackboneConfig,
    n_proxy: int = 3,
    delta: float = 0.6,
    eta_init: float = 1.0,
    eta_trainable: bool = True,
    init_seed: int = 0,
) -> IncrementalModel:
    """Construct a seeded model with an empty head."""
    with torch.random.fork_rng():
        torch.manual_seed(init_seed)
        backbone = TemporalBackbone(config)
        head = LSCHead(
            config.embedding_dim,
            n_proxy=n_proxy,
            delta=delta,
            eta_init=eta_init,
            eta_trainable=eta_trainable,
        )
    return IncrementalModel(backbone, head)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: IncrementalModel, path: str | Path, step: int) -> None:
    """Single archive: parameter tensors keyed by layer name plus config."""
    payload = {
        "backbone_config": model.config.to_dict(),
        "head": {
            "n_proxy": model.head.n_proxy,
            "delta": model.head.delta,
            "eta_trainable": bool(model.head.eta.requires_grad),
            "class_ids": list(model.head.class_ids),
        },
        "step": int(step),
        "state_dict": model.state_dict(),
    }
    torch.save(payload, str(path))


def load_checkpoint(path: str | Path) -> tuple[IncrementalModel, int]:
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    config = BackboneConfig.from_dict(payload["backbone_config"])
    meta = payload["head"]
    model = build_model(
        config,
        n_proxy=meta["n_proxy"],
        delta=meta["delta"],
        eta_trainable=meta["eta_trainable"],
    )
    sizing = torch.Generator()
    sizing.manual_seed(0)  # placeholder values; overwritten by the state dict
    model.head.register_classes(meta["class_ids"], generator=sizing)
    model.load_state_dict(payload["state_dict"])
    return model, int(payload["step"])
