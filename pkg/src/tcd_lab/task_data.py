"""Task streams, the synthetic subaction dataset, and manifest ingestion.

A task stream is an ordered partition of the class set into disjoint groups:
group 0 is the initial stage, later groups arrive one incremental step at a
time. The synthetic dataset renders each class as an ordered sequence of
"motifs" (spatial patterns translated across frames) so that temporal order,
not per-frame appearance, carries the class identity.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    """Raised when a stream or dataset specification is inconsistent."""


class ManifestError(ValueError):
    """Raised for malformed manifest records."""


# ---------------------------------------------------------------------------
# Task streams
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskStream:
    """Ordered class groups of one incremental scenario.

    ``groups[0]`` is the initial stage; every later group is one incremental
    step. Groups are pairwise disjoint and cover ``class_order`` exactly.
    """

    class_order: tuple[int, ...]
    groups: tuple[tuple[int, ...], ...]
    seed: int

    @property
    def num_stages(self) -> int:
        return len(self.groups)

    @property
    def all_classes(self) -> tuple[int, ...]:
        return self.class_order

    def seen_classes(self, stage: int) -> list[int]:
        """Sorted union of groups 0..stage."""
        seen: list[int] = []
        for g in self.groups[: stage + 1]:
            seen.extend(g)
        return sorted(seen)

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": self.seed,
                "class_order": list(self.class_order),
                "groups": [list(g) for g in self.groups],
            },
            sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> "TaskStream":
        obj = json.loads(text)
        return TaskStream(
            class_order=tuple(int(c) for c in obj["class_order"]),
            groups=tuple(tuple(int(c) for c in g) for g in obj["groups"]),
            seed=int(obj["seed"]),
        )


def build_task_stream(
    class_ids: Iterable[int], seed: int, initial_count: int, group_size: int
) -> TaskStream:
    """Shuffle the classes with ``seed`` and split them into stage groups.

    Group 0 takes the first ``initial_count`` classes of the shuffled order;
    the remainder is split into consecutive groups of exactly ``group_size``.
    A remainder that does not divide evenly is a configuration error; there is
    no silent ragged last group.
    """
    ids = sorted(set(int(c) for c in class_ids))
    if not ids:
        raise ConfigurationError("class_ids must be nonempty")
    if initial_count < 1 or initial_count > len(ids):
        raise ConfigurationError(
            f"initial_count={initial_count} must be in [1, {len(ids)}]"
        )
    remainder = len(ids) - initial_count
    if remainder > 0:
        if group_size < 1:
            raise ConfigurationError(f"group_size={group_size} must be >= 1")
        if remainder % group_size != 0:
            raise ConfigurationError(
                f"{remainder} remaining classes are not divisible into "
                f"groups of {group_size}"
            )
    order = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    groups = [tuple(order[:initial_count])]
    for start in range(initial_count, len(order), group_size):
        groups.append(tuple(order[start : start + group_size]))
    return TaskStream(class_order=tuple(order), groups=tuple(groups), seed=int(seed))


# ---------------------------------------------------------------------------
# Video samples
# ---------------------------------------------------------------------------


@dataclass
class VideoSample:
    """A T-segment frame tensor with its class label.

    ``frames`` is float32 with shape [T, channels, H, W].
    """

    id: str
    frames: np.ndarray
    label: int
    origin: str

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])


# ---------------------------------------------------------------------------
# Synthetic subaction dataset
# ---------------------------------------------------------------------------

_STREAM_MOTIFS = 101
_STREAM_PATTERN = 211
_STREAM_SAMPLE = 307


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator parameters for the synthetic subaction dataset.

    Every class is a distinct ordered sequence of ``motifs_per_class`` motifs,
    each motif spanning ``T // motifs_per_class`` frames. A motif is a spatial
    pattern translated horizontally over its span; the translation direction
    is part of the motif. Classes listed in ``shared_prefix_pairs`` share all
    motifs except the last one, whose two directions distinguish the pair, so
    their videos contain the same frames in different temporal order.
    """

    n_classes: int
    motifs_per_class: int
    shared_prefix_pairs: tuple[tuple[int, int], ...]
    noise_level: float
    T: int
    H: int
    W: int
    channels: int
    seed: int

    def validate(self) -> None:
        if self.n_classes < 1:
            raise ConfigurationError("n_classes must be >= 1")
        if self.motifs_per_class < 1:
            raise ConfigurationError("motifs_per_class must be >= 1")
        if self.T < 1 or self.T % self.motifs_per_class != 0:
            raise ConfigurationError(
                f"T={self.T} must be a positive multiple of "
                f"motifs_per_class={self.motifs_per_class}"
            )
        if min(self.H, self.W, self.channels) < 1:
            raise ConfigurationError("H, W and channels must be >= 1")
        if self.noise_level < 0:
            raise ConfigurationError("noise_level must be >= 0")
        seen: set[int] = set()
        for pair in self.shared_prefix_pairs:
            if len(pair) != 2 or pair[0] == pair[1]:
                raise ConfigurationError(f"invalid shared-prefix pair {pair!r}")
            for c in pair:
                if not 0 <= c < self.n_classes:
                    raise ConfigurationError(f"pair class {c} out of range")
                if c in seen:
                    raise ConfigurationError(f"class {c} appears in two pairs")
                seen.add(c)


def _pattern(spec: SyntheticSpec, pattern_id: int) -> np.ndarray:
    """Unit-RMS spatial pattern [channels, H, W], keyed by (seed, id)."""
    rng = np.random.default_rng(
        np.random.SeedSequence([spec.seed, _STREAM_PATTERN, pattern_id])
    )
    p = rng.standard_normal((spec.channels, spec.H, spec.W))
    p /= max(np.sqrt((p**2).mean()), 1e-12)
    return p.astype(np.float32)


def _class_motifs(spec: SyntheticSpec) -> list[list[tuple[int, int]]]:
    """Per-class motif sequences as (pattern_id, direction) with direction ±1.

    Paired classes are built jointly: identical motifs except the final one,
    which uses the same pattern translated in opposite directions. Pattern
    ids are never reused across classes, so all sequences are distinct.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _STREAM_MOTIFS]))
    partner = {}
    for a, b in spec.shared_prefix_pairs:
        partner[a] = b
        partner[b] = a
    motifs: dict[int, list[tuple[int, int]]] = {}
    next_pattern = 0

    def fresh_motif() -> tuple[int, int]:
        nonlocal next_pattern
        pid = next_pattern
        next_pattern += 1
        direction = 1 if rng.integers(0, 2) == 0 else -1
        return pid, direction

    for c in range(spec.n_classes):
        if c in motifs:
            continue
        seq = [fresh_motif() for _ in range(spec.motifs_per_class - 1)]
        if c in partner:
            pid, _ = fresh_motif()
            motifs[c] = seq + [(pid, 1)]
            motifs[partner[c]] = seq + [(pid, -1)]
        else:
            motifs[c] = seq + [fresh_motif()]
    out = [motifs[c] for c in range(spec.n_classes)]
    if len({tuple(s) for s in out}) != spec.n_classes:
        raise ConfigurationError("motif sequences are not pairwise distinct")
    return out


def _clean_video(spec: SyntheticSpec, seq: list[tuple[int, int]]) -> np.ndarray:
    """Render a motif sequence to [T, channels, H, W] without sample latents."""
    span = spec.T // spec.motifs_per_class
    step = max(1, spec.W // max(span, 1))
    frames = np.empty((spec.T, spec.channels, spec.H, spec.W), dtype=np.float32)
    t = 0
    for pid, direction in seq:
        pat = _pattern(spec, pid)
        for j in range(span):
            offset = j if direction > 0 else span - 1 - j
            frames[t] = np.roll(pat, shift=offset * step, axis=2)
            t += 1
    return frames


def _latent_key(spec: SyntheticSpec, label: int) -> int:
    """Paired classes share one latent stream so their samples align."""
    for a, b in spec.shared_prefix_pairs:
        if label in (a, b):
            return min(a, b)
    return label


def generate_synthetic_dataset(
    spec: SyntheticSpec, samples_per_class: int, first_index: int = 0
) -> list[VideoSample]:
    """Generate ``samples_per_class`` videos per class, deterministically.

    Sample latents (global spatial phase and additive noise) are keyed by
    (seed, latent stream, sample index), so disjoint index ranges give
    disjoint splits of the same classes; paired classes draw identical
    latents at equal indices, keeping their time-averaged frames exactly
    equal sample-for-sample.
    """
    spec.validate()
    if samples_per_class < 0:
        raise ConfigurationError("samples_per_class must be >= 0")
    motifs = _class_motifs(spec)
    clean = [_clean_video(spec, seq) for seq in motifs]
    samples: list[VideoSample] = []
    for label in range(spec.n_classes):
        key = _latent_key(spec, label)
        for i in range(samples_per_class):
            index = first_index + i
            rng = np.random.default_rng(
                np.random.SeedSequence([spec.seed, _STREAM_SAMPLE, key, index])
            )
            dv = int(rng.integers(0, spec.H))
            dh = int(rng.integers(0, spec.W))
            frames = np.roll(clean[label], shift=(dv, dh), axis=(2, 3))
            if spec.noise_level > 0:
                noise = rng.standard_normal(frames.shape).astype(np.float32)
                frames = frames + spec.noise_level * noise
            else:
                frames = frames.copy()
            samples.append(
                VideoSample(
                    id=f"synth-c{label:03d}-i{index:05d}",
                    frames=frames,
                    label=label,
                    origin=f"synthetic(seed={spec.seed},class={label},index={index})",
                )
            )
    return samples


# ---------------------------------------------------------------------------
# Manifest ingestion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRecord:
    """Lazy descriptor of an on-disk video; frames decode on access."""

    path: str
    label: int
    frame_count: int

    def load_frames(self) -> np.ndarray:
        frames = np.load(self.path)
        if frames.shape[0] != self.frame_count:
            raise ManifestError(
                f"{self.path}: stored frame count {frames.shape[0]} does not "
                f"match manifest frame_count {self.frame_count}"
            )
        return frames


def load_manifest(path: str | Path, min_frames: int | None = None) -> list[ManifestRecord]:
    """Parse a `path<TAB>label<TAB>frame_count` manifest into descriptors.

    Records shorter than ``min_frames`` are rejected with a warning; malformed
    lines raise :class:`ManifestError` naming the line number.
    """
    records: list[ManifestRecord] = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ManifestError(
                f"line {lineno}: expected 3 tab-separated fields, got {len(fields)}"
            )
        rec_path, label_s, count_s = fields
        try:
            label = int(label_s)
            frame_count = int(count_s)
        except ValueError as exc:
            raise ManifestError(f"line {lineno}: {exc}") from exc
        if frame_count < 1:
            raise ManifestError(f"line {lineno}: frame_count must be >= 1")
        if min_frames is not None and frame_count < min_frames:
            log.warning(
                "manifest line %d rejected: frame_count %d < required %d (%s)",
                lineno,
                frame_count,
                min_frames,
                rec_path,
            )
            continue
        records.append(ManifestRecord(path=rec_path, label=label, frame_count=frame_count))
    return records
