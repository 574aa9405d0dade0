"""Exemplar memory: herding selection, frame sampling, budget enforcement."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .task_data import VideoSample

log = logging.getLogger(__name__)


class SamplingStrategy(str, Enum):
    ALL = "all"
    RANDOM = "random"
    UNIFORM = "uniform"


def herding_select(features: Sequence[np.ndarray], budget: int) -> list[int]:
    """Greedy selection keeping the running exemplar mean nearest the class mean.

    With mu the mean of all features, iteration j adds the index x minimizing
    ||mu - (sum(chosen) + phi_x) / j||. Ties break to the smallest index, so
    the selection under a smaller budget is always a prefix of the selection
    under a larger one.
    """
    if len(features) == 0:
        raise ValueError("features must be nonempty")
    if budget < 1:
        raise ValueError("budget must be >= 1")
    feats = np.asarray([np.asarray(f, dtype=np.float64).ravel() for f in features])
    if feats.ndim != 2:
        raise ValueError("features must share one dimension")
    mu = feats.mean(axis=0)
    n = feats.shape[0]
    chosen: list[int] = []
    running = np.zeros_like(mu)
    dist = np.empty(n, dtype=np.float64)
    for j in range(1, min(budget, n) + 1):
        cand = (running[None, :] + feats) / j
        dist[:] = np.linalg.norm(mu[None, :] - cand, axis=1)
        dist[chosen] = np.inf
        pick = int(np.argmin(dist))  # argmin takes the first hit: smallest index
        chosen.append(pick)
        running += feats[pick]
    return chosen


def sample_frames(
    frames: np.ndarray, strategy: SamplingStrategy, t_segments: int, seed: int = 0
) -> np.ndarray:
    """Reduce an [N, ...] frame stack to T frames per the chosen strategy.

    UNIFORM picks bin centers i*floor(N/T) + floor(N/(2T)); RANDOM draws T
    sorted indices without replacement from the given seed; ALL returns the
    input unchanged.
    """
    strategy = SamplingStrategy(strategy)
    if strategy is SamplingStrategy.ALL:
        return frames
    n = int(frames.shape[0])
    if n < t_segments:
        raise ValueError(f"cannot sample {t_segments} frames from {n}")
    if strategy is SamplingStrategy.UNIFORM:
        idx = [i * (n // t_segments) + n // (2 * t_segments) for i in range(t_segments)]
    else:
        rng = np.random.default_rng(seed)
        idx = sorted(int(i) for i in rng.choice(n, size=t_segments, replace=False))
    return frames[idx]


@dataclass
class ExemplarMemory:
    """Budgeted per-class store of frame-sampled exemplars."""

    budget_per_class: int
    strategy: SamplingStrategy = SamplingStrategy.UNIFORM
    per_class: dict[int, list[VideoSample]] = field(default_factory=dict)

    def __post_init__(self):
        self.strategy = SamplingStrategy(self.strategy)
        if self.budget_per_class < 1:
            raise ValueError("budget_per_class must be >= 1")

    def classes(self) -> list[int]:
        return sorted(self.per_class)

    def exemplars(self, class_id: int | None = None) -> list[VideoSample]:
        if class_id is not None:
            return list(self.per_class.get(class_id, []))
        out: list[VideoSample] = []
        for c in self.classes():
            out.extend(self.per_class[c])
        return out

    def size(self) -> int:
        return sum(len(v) for v in self.per_class.values())

    def assert_budget(self) -> None:
        for c, items in self.per_class.items():
            if len(items) > self.budget_per_class:
                raise AssertionError(
                    f"class {c} stores {len(items)} > budget {self.budget_per_class}"
                )


def embed_samples(model, samples: Sequence[VideoSample], batch_size: int = 64) -> np.ndarray:
    """Evaluation-mode embeddings, one row per sample."""
    was_training = model.training
    model.eval()
    rows = []
    try:
        with torch.no_grad():
            for start in range(0, len(samples), batch_size):
                batch = samples[start : start + batch_size]
                frames = torch.from_numpy(
                    np.stack([np.ascontiguousarray(s.frames) for s in batch])
                )
                stack = model.features(frames)
                rows.append(stack.embedding.cpu().double().numpy())
    finally:
        if was_training:
            model.train()
    return np.concatenate(rows, axis=0)


def update_memory(
    memory: ExemplarMemory,
    new_samples: Sequence[VideoSample],
    model,
    seed: int = 0,
) -> ExemplarMemory:
    """Herd exemplars for each newly arrived class into the memory.

    Existing classes are untouched (fixed per-class budget). A class with
    fewer samples than the budget stores everything, with a notice.
    """
    by_class: dict[int, list[VideoSample]] = {}
    for s in new_samples:
        by_class.setdefault(s.label, []).append(s)
    overlap = set(by_class) & set(memory.per_class)
    if overlap:
        raise ValueError(f"classes already stored: {sorted(overlap)}")
    for class_id in sorted(by_class):
        group = by_class[class_id]
        if len(group) < memory.budget_per_class:
            log.info(
                "class %d has %d samples, below budget %d; storing all",
                class_id,
                len(group),
                memory.budget_per_class,
            )
        embeddings = embed_samples(model, group)
        order = herding_select(list(embeddings), memory.budget_per_class)
        stored = []
        for rank, idx in enumerate(order):
            src = group[idx]
            frames = sample_frames(
                src.frames,
                memory.strategy,
                t_segments=src.frames.shape[0]
                if memory.strategy is SamplingStrategy.ALL
                else _target_t(model),
                seed=_exemplar_seed(seed, class_id, rank),
            )
            stored.append(
                VideoSample(id=src.id, frames=frames.copy(), label=src.label, origin=src.origin)
            )
        memory.per_class[class_id] = stored
    memory.assert_budget()
    return memory


def _target_t(model) -> int:
    return int(model.config.t_segments)


def _exemplar_seed(seed: int, class_id: int, rank: int) -> int:
    return int(np.random.SeedSequence([seed, class_id, rank]).generate_state(1)[0])


def eval_view(sample: VideoSample, t_segments: int) -> np.ndarray:
    """Deterministic T-frame view of a stored exemplar (uniform when longer)."""
    if sample.frames.shape[0] == t_segments:
        return sample.frames
    return sample_frames(sample.frames, SamplingStrategy.UNIFORM, t_segments)


def train_view(sample: VideoSample, t_segments: int, rng: np.random.Generator) -> np.ndarray:
    """Per-iteration T-frame view; full-video exemplars draw random frames."""
    if sample.frames.shape[0] == t_segments:
        return sample.frames
    idx = sorted(int(i) for i in rng.choice(sample.frames.shape[0], size=t_segments, replace=False))
    return sample.frames[idx]


def class_means(memory: ExemplarMemory, model) -> dict[int, np.ndarray]:
    """Unit-norm mean exemplar embedding per stored class."""
    if memory.size() == 0:
        raise ValueError("memory is empty")
    means: dict[int, np.ndarray] = {}
    t = _target_t(model)
    for class_id in memory.classes():
        items = memory.per_class[class_id]
        if not items:
            raise ValueError(f"class {class_id} has no exemplars")
        views = [
            VideoSample(id=s.id, frames=np.ascontiguousarray(eval_view(s, t)), label=s.label, origin=s.origin)
            for s in items
        ]
        emb = embed_samples(model, views)
        mean = emb.mean(axis=0)
        norm = float(np.linalg.norm(mean))
        if norm < 1e-8:
            log.warning("class %d mean embedding is degenerate (norm %.3e)", class_id, norm)
        means[class_id] = mean / max(norm, 1e-12)
    return means


def save_memory(memory: ExemplarMemory, npz_path: str | Path, json_path: str | Path) -> None:
    arrays = {}
    index: dict[str, list[dict]] = {}
    for class_id in memory.classes():
        entries = []
        for i, s in enumerate(memory.per_class[class_id]):
            arrays[f"ex_{class_id}_{i}"] = s.frames
            entries.append({"id": s.id, "origin": s.origin})
        index[str(class_id)] = entries
    np.savez(npz_path, **arrays)
    Path(json_path).write_text(
        json.dumps(
            {
                "budget_per_class": memory.budget_per_class,
                "strategy": memory.strategy.value,
                "classes": index,
            },
            sort_keys=True,
        )
    )


def load_memory(npz_path: str | Path, json_path: str | Path) -> ExemplarMemory:
    meta = json.loads(Path(json_path).read_text())
    memory = ExemplarMemory(
        budget_per_class=int(meta["budget_per_class"]),
        strategy=SamplingStrategy(meta["strategy"]),
    )
    with np.load(npz_path) as archive:
        for class_s, entries in meta["classes"].items():
            class_id = int(class_s)
            memory.per_class[class_id] = [
                VideoSample(
                    id=e["id"],
                    frames=archive[f"ex_{class_id}_{i}"],
                    label=class_id,
                    origin=e["origin"],
                )
                for i, e in enumerate(entries)
            ]
    return memory
