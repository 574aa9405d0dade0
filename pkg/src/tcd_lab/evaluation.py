"""Dual-protocol evaluation, incremental-accuracy aggregation, reporting."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .memory import ExemplarMemory, class_means, embed_samples
from .task_data import VideoSample


@dataclass
class MetricsRecord:
    """Per-stage evaluation result; accuracies are percentages in [0, 100]."""

    step: int
    seen_class_count: int
    acc_cnn: float
    acc_nme: float
    per_class_accuracy: dict[int, float] = field(default_factory=dict)
    loss_components: dict[str, float] = field(default_factory=dict)
    seen_classes: list[int] | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "step": self.step,
                "seen_class_count": self.seen_class_count,
                "acc_cnn": self.acc_cnn,
                "acc_nme": self.acc_nme,
                "per_class": {str(k): v for k, v in sorted(self.per_class_accuracy.items())},
                "losses": dict(sorted(self.loss_components.items())),
            },
            sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> "MetricsRecord":
        obj = json.loads(text)
        return MetricsRecord(
            step=int(obj["step"]),
            seen_class_count=int(obj["seen_class_count"]),
            acc_cnn=float(obj["acc_cnn"]),
            acc_nme=float(obj["acc_nme"]),
            per_class_accuracy={int(k): float(v) for k, v in obj["per_class"].items()},
            loss_components={k: float(v) for k, v in obj["losses"].items()},
        )


def _eval_thread_cap():
    """Optional cap on torch threads during evaluation (TCD_LAB_THREADS)."""
    raw = os.environ.get("TCD_LAB_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        return None
    return n if n > 0 else None


class _thread_cap:
    def __enter__(self):
        cap = _eval_thread_cap()
        self.saved = torch.get_num_threads()
        if cap is not None:
            torch.set_num_threads(min(cap, self.saved) if self.saved > 0 else cap)
        return self

    def __exit__(self, *exc):
        torch.set_num_threads(self.saved)
        return False


def _accuracy(preds: np.ndarray, labels: np.ndarray) -> tuple[float, dict[int, float]]:
    total = len(labels)
    acc = 100.0 * float((preds == labels).sum()) / total
    per_class: dict[int, float] = {}
    for c in sorted(set(int(x) for x in labels)):
        m = labels == c
        per_class[c] = 100.0 * float((preds[m] == c).sum()) / int(m.sum())
    return acc, per_class


def evaluate_cnn(
    model, samples: Sequence[VideoSample], seen_classes: Sequence[int] | None = None
) -> tuple[float, dict[int, float]]:
    """Top-1 accuracy of the classifier head restricted to seen classes."""
    if not samples:
        raise ValueError("test set is empty")
    head = model.head
    seen = sorted(seen_classes) if seen_classes is not None else sorted(head.class_ids)
    unseen_positions = [i for i, c in enumerate(head.class_ids) if c not in set(seen)]
    was_training = model.training
    model.eval()
    preds = []
    try:
        with torch.no_grad(), _thread_cap():
            for start in range(0, len(samples), 64):
                batch = samples[start : start + 64]
                frames = torch.from_numpy(
                    np.stack([np.ascontiguousarray(s.frames) for s in batch])
                )
                scores = model.features(frames).scores
                if unseen_positions:
                    scores[:, unseen_positions] = float("-inf")
                pos = scores.argmax(dim=1).cpu().numpy()
                for p in pos:
                    pred = head.class_ids[int(p)]
                    assert pred in seen, f"predicted unseen class {pred}"
                    preds.append(pred)
    finally:
        if was_training:
            model.train()
    labels = np.array([s.label for s in samples])
    return _accuracy(np.array(preds), labels)


def nme_predict(embeddings: np.ndarray, means: dict[int, np.ndarray]) -> np.ndarray:
    """Nearest-mean predictions on unit-normalized embeddings.

    Distances are Euclidean between the L2-normalized embedding and the
    unit-norm class means (equivalent to cosine ranking). Ties break to the
    lowest class id.
    """
    ids = sorted(means)
    mat = np.stack([np.asarray(means[c], dtype=np.float64) for c in ids])
    emb = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    emb = emb / np.maximum(norms, 1e-12)
    d2 = ((emb[:, None, :] - mat[None, :, :]) ** 2).sum(axis=2)
    picks = d2.argmin(axis=1)  # first minimum -> lowest class id
    return np.array([ids[int(i)] for i in picks])


def evaluate_nme(
    model, memory: ExemplarMemory, samples: Sequence[VideoSample]
) -> tuple[float, dict[int, float]]:
    """Top-1 accuracy of nearest mean-of-exemplars classification."""
    if not samples:
        raise ValueError("test set is empty")
    means = class_means(memory, model)
    needed = sorted(set(s.label for s in samples))
    missing = [c for c in needed if c not in means]
    if missing:
        raise ValueError(f"memory lacks class means for classes {missing}")
    with _thread_cap():
        embeddings = embed_samples(model, list(samples))
    preds = nme_predict(embeddings, means)
    labels = np.array([s.label for s in samples])
    return _accuracy(preds, labels)


def average_incremental_accuracy(
    records: Sequence[MetricsRecord],
    protocol: str = "cnn",
    include_initial: bool = True,
) -> float:
    """Arithmetic mean of per-stage accuracy over the stream."""
    if not records:
        raise ValueError("no metrics records")
    if protocol.lower() not in ("cnn", "nme"):
        raise ValueError(f"unknown protocol {protocol!r}")
    recs = sorted(records, key=lambda r: r.step)
    if not include_initial:
        recs = [r for r in recs if r.step > 0]
        if not recs:
            raise ValueError("no incremental records after excluding the initial stage")
    key = "acc_cnn" if protocol.lower() == "cnn" else "acc_nme"
    return float(np.mean([getattr(r, key) for r in recs]))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def read_run(run_dir: str | Path) -> tuple[dict, list[MetricsRecord]]:
    """Load a run directory's config echo and ordered stage metrics."""
    run_dir = Path(run_dir)
    config = json.loads((run_dir / "config.json").read_text())
    stage_dirs = sorted(
        (d for d in run_dir.glob("stage_*") if d.is_dir()),
        key=lambda d: int(d.name.split("_")[1]),
    )
    records = []
    gaps = []
    for d in stage_dirs:
        mfile = d / "metrics.json"
        if not mfile.exists():
            gaps.append(str(mfile))
            continue
        records.append(MetricsRecord.from_json(mfile.read_text()))
    expected = _expected_stages(config)
    have = {r.step for r in records}
    gaps.extend(
        f"{run_dir}/stage_{k}/metrics.json" for k in range(expected) if k not in have
    )
    if gaps:
        raise FileNotFoundError("missing stage metrics: " + ", ".join(sorted(set(gaps))))
    return config, sorted(records, key=lambda r: r.step)


def _expected_stages(config: dict) -> int:
    n = int(config["n_classes"])
    initial = int(config["initial_classes"])
    group = int(config["group_size"])
    return 1 + (n - initial) // group if n > initial else 1


def emit_report(run_dirs: Sequence[str | Path], out_dir: str | Path) -> dict[str, Path]:
    """Aggregate runs into a summary CSV and accuracy-vs-step plots."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = []
    for rd in run_dirs:
        config, records = read_run(rd)
        include_initial = bool(config.get("include_initial_in_average", True))
        runs.append((config, records, include_initial))

    rows = []
    curves: dict[tuple[str, str], list[list[float]]] = {}
    for config, records, include_initial in runs:
        method = config["method"]
        seed = config["seeds"][0] if config.get("seeds") else "?"
        final = records[-1]
        for protocol in ("cnn", "nme"):
            avg = average_incremental_accuracy(records, protocol, include_initial)
            final_acc = final.acc_cnn if protocol == "cnn" else final.acc_nme
            rows.append((str(method), protocol, str(seed), avg, final_acc))
            curves.setdefault((str(method), protocol), []).append(
                [r.acc_cnn if protocol == "cnn" else r.acc_nme for r in records]
            )

    # per-(method, protocol) mean over seeds
    grouped: dict[tuple[str, str], list[tuple]] = {}
    for row in rows:
        grouped.setdefault((row[0], row[1]), []).append(row)
    for (method, protocol), group in sorted(grouped.items()):
        if len(group) > 1:
            rows.append(
                (
                    method,
                    protocol,
                    "mean",
                    float(np.mean([g[3] for g in group])),
                    float(np.mean([g[4] for g in group])),
                )
            )

    csv_path = out_dir / "summary.csv"
    lines = ["method,protocol,seed,avg_inc_acc,final_step_acc"]
    for method, protocol, seed, avg, final_acc in sorted(
        rows, key=lambda r: (r[0], r[1], str(r[2]))
    ):
        lines.append(f"{method},{protocol},{seed},{avg!r},{final_acc!r}")
    csv_path.write_text("\n".join(lines) + "\n")

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for (method, protocol), seeds_curves in sorted(curves.items()):
        length = min(len(c) for c in seeds_curves)
        mean_curve = np.mean([c[:length] for c in seeds_curves], axis=0)
        ax.plot(range(length), mean_curve, marker="o", label=f"{method}/{protocol}")
    ax.set_xlabel("incremental stage")
    ax.set_ylabel("accuracy over seen classes (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=7)
    fig.tight_layout()
    plot_path = out_dir / "accuracy_vs_step.png"
    fig.savefig(plot_path)
    plt.close(fig)

    return {"summary_csv": csv_path, "plot": plot_path}
