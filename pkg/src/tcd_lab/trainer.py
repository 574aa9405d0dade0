"""The class-incremental loop: train, refresh importance, herd, fine-tune.

Every stage derives its own random substreams from (run seed, stage index),
so a run resumed from stage-k artifacts continues bit-identically to the
uninterrupted run. All artifacts land in `out/stage_<k>/`.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .evaluation import MetricsRecord, evaluate_cnn, evaluate_nme
from .importance import (
    ImportanceMask,
    compute_importance,
    load_mask,
    normalize_importance,
    save_mask,
)
from .losses import (
    LossWeights,
    adaptive_lambda,
    distillation_loss,
    embedding_distillation_loss,
    orthogonality_loss,
    total_loss,
    unweighted_distillation_loss,
)
from .memory import (
    ExemplarMemory,
    SamplingStrategy,
    load_memory,
    save_memory,
    train_view,
    update_memory,
)
from .model import (
    BackboneConfig,
    IncrementalModel,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from .task_data import (
    ConfigurationError,
    SyntheticSpec,
    TaskStream,
    VideoSample,
    build_task_stream,
    generate_synthetic_dataset,
)

log = logging.getLogger(__name__)

METHODS = ("tcd", "tcd_no_ortho", "tcd_no_mask", "plain_distill", "finetune")

# gate of loss terms per method selector
METHOD_TERMS = {
    "tcd": {"distill": True, "mask": True, "ortho": True},
    "tcd_no_ortho": {"distill": True, "mask": True, "ortho": False},
    "tcd_no_mask": {"distill": True, "mask": False, "ortho": True},
    "plain_distill": {"distill": True, "mask": False, "ortho": False},
    "finetune": {"distill": False, "mask": False, "ortho": False},
}


@dataclass
class ExperimentConfig:
    """Flat, JSON-serializable description of one experiment."""

    # task stream
    n_classes: int = 8
    initial_classes: int = 4
    group_size: int = 2
    # synthetic data
    t_segments: int = 8
    frame_channels: int = 1
    frame_height: int = 8
    frame_width: int = 8
    motifs_per_class: int = 2
    noise_level: float = 0.1
    shared_prefix_pairs: list = field(
        default_factory=lambda: [[0, 1], [2, 3], [4, 5], [6, 7]]
    )
    data_seed: int = 7
    train_samples_per_class: int = 30
    test_samples_per_class: int = 10
    # backbone / head
    block_channels: list = field(default_factory=lambda: [8, 16, 32, 32])
    block_strides: list = field(default_factory=lambda: [1, 2, 1, 2])
    shift_fraction: float = 0.125
    embedding_dim: int = 32
    n_proxy: int = 3
    margin: float = 0.6
    eta_init: float = 1.0
    eta_trainable: bool = True
    # objective
    alpha_feat: float = 1.0
    alpha_embed: float = 0.01
    beta: float = 0.1
    # optimization
    epochs_initial: int = 25
    epochs_incremental: int = 15
    finetune_epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_decay_factor: float = 0.1
    lr_decay_epochs: Optional[list] = None
    # memory
    budget_per_class: int = 5
    sampling_strategy: str = "uniform"
    # protocol
    method: str = "tcd"
    seeds: list = field(default_factory=lambda: [1000, 1993, 2021])
    include_initial_in_average: bool = True

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigurationError(
                f"unknown method {self.method!r}; allowed: {', '.join(METHODS)}"
            )
        SamplingStrategy(self.sampling_strategy)
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not self.seeds:
            raise ConfigurationError("seeds must be nonempty")
        self.backbone_config().validate()
        self.synthetic_spec().validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def allowed_keys() -> list[str]:
        return [f.name for f in fields(ExperimentConfig)]

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        allowed = set(ExperimentConfig.allowed_keys())
        unknown = sorted(set(d) - allowed)
        if unknown:
            raise ConfigurationError(
                f"unknown config keys {unknown}; allowed keys: {sorted(allowed)}"
            )
        config = ExperimentConfig(**d)
        config.validate()
        return config

    @staticmethod
    def from_file(path: str | Path) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))

    def to_file(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            t_segments=self.t_segments,
            in_channels=self.frame_channels,
            height=self.frame_height,
            width=self.frame_width,
            block_channels=tuple(self.block_channels),
            block_strides=tuple(self.block_strides),
            shift_fraction=self.shift_fraction,
            embedding_dim=self.embedding_dim,
        )

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            n_classes=self.n_classes,
            motifs_per_class=self.motifs_per_class,
            shared_prefix_pairs=tuple(tuple(p) for p in self.shared_prefix_pairs),
            noise_level=self.noise_level,
            T=self.t_segments,
            H=self.frame_height,
            W=self.frame_width,
            channels=self.frame_channels,
            seed=self.data_seed,
        )


@dataclass
class StepState:
    """Mutable state carried from one incremental stage to the next."""

    step: int
    model: IncrementalModel
    memory: ExemplarMemory
    mask: Optional[ImportanceMask]  # consumed by stage step+1
    records: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Seed substreams
# ---------------------------------------------------------------------------


def _substream(seed: int, *tags: int) -> int:
    ss = np.random.SeedSequence([int(seed)] + [int(t) for t in tags])
    return int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFF_FFFF_FFFF_FFFF)


def _torch_gen(seed: int, *tags: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(_substream(seed, *tags))
    return g


_TAG_MODEL, _TAG_HEAD, _TAG_TRAIN, _TAG_VIEWS, _TAG_MEMORY, _TAG_FINETUNE = range(6)


# ---------------------------------------------------------------------------
# Optimization helpers
# ---------------------------------------------------------------------------


def _milestones(config: ExperimentConfig, epochs: int) -> list[int]:
    if config.lr_decay_epochs:
        return sorted({int(e) for e in config.lr_decay_epochs if 0 < int(e) < epochs})
    # 50-epoch reference schedule drops at 20 and 30; scale to 0.4E and 0.6E
    return sorted({m for m in (round(0.4 * epochs), round(0.6 * epochs)) if 0 < m < epochs})


def _lr_at(config: ExperimentConfig, epoch: int, epochs: int) -> float:
    drops = sum(1 for m in _milestones(config, epochs) if epoch >= m)
    return config.learning_rate * config.lr_decay_factor**drops


def _final_lr(config: ExperimentConfig) -> float:
    drops = len(_milestones(config, config.epochs_incremental))
    return config.learning_rate * config.lr_decay_factor**drops


def _make_optimizer(model: IncrementalModel, config: ExperimentConfig, head_only: bool):
    head = model.head
    groups = []
    if not head_only:
        groups.append(
            {
                "params": list(model.backbone.parameters()),
                "weight_decay": config.weight_decay,
            }
        )
    groups.append({"params": [head.proxies], "weight_decay": config.weight_decay})
    if head.eta.requires_grad:
        groups.append({"params": [head.eta], "weight_decay": 0.0})
    return torch.optim.SGD(groups, lr=config.learning_rate, momentum=config.momentum)


def _batch_frames(
    items: Sequence[VideoSample], t_segments: int, view_rng: np.random.Generator
) -> torch.Tensor:
    views = [np.ascontiguousarray(train_view(s, t_segments, view_rng)) for s in items]
    return torch.from_numpy(np.stack(views))


def _train_stage(
    model: IncrementalModel,
    items: Sequence[VideoSample],
    config: ExperimentConfig,
    *,
    stage: int,
    seed: int,
    epochs: int,
    allowed_labels: set[int],
    prev_model: Optional[IncrementalModel] = None,
    mask: Optional[ImportanceMask] = None,
    weights: Optional[LossWeights] = None,
    head_only: bool = False,
    seed_tag: int = _TAG_TRAIN,
) -> dict[str, float]:
    """Run one stage's epochs; returns final-epoch mean loss components."""
    terms = METHOD_TERMS[config.method]
    w = weights or LossWeights(0.0, 0.0, 0.0, 1.0)
    use_feat = terms["distill"] and prev_model is not None and w.alpha_feat > 0
    use_embed = terms["distill"] and prev_model is not None and w.alpha_embed > 0
    use_prev = use_feat or use_embed
    use_ortho = terms["ortho"] and w.beta > 0 and not head_only
    if head_only:
        use_feat = use_embed = use_prev = False
    effective = LossWeights(
        alpha_feat=w.alpha_feat if use_feat else 0.0,
        alpha_embed=w.alpha_embed if use_embed else 0.0,
        beta=w.beta if use_ortho else 0.0,
        lambda_scale=w.lambda_scale,
    )
    if use_feat and terms["mask"] and mask is None:
        raise ValueError("method requires an importance mask but none was given")

    optimizer = _make_optimizer(model, config, head_only)
    shuffle_rng = np.random.default_rng(_substream(seed, seed_tag, stage))
    components = {"cls": 0.0, "dist_feat": 0.0, "dist_embed": 0.0, "ortho": 0.0}
    model.train()
    for epoch in range(epochs):
        lr = _lr_at(config, epoch, epochs) if not head_only else _final_lr(config)
        for group in optimizer.param_groups:
            group["lr"] = lr
        view_rng = np.random.default_rng(_substream(seed, seed_tag, stage, 1000 + epoch))
        perm = shuffle_rng.permutation(len(items))
        final_epoch = epoch == epochs - 1
        seen_samples = 0
        for start in range(0, len(perm), config.batch_size):
            batch = [items[i] for i in perm[start : start + config.batch_size]]
            labels = [s.label for s in batch]
            if not set(labels) <= allowed_labels:
                raise AssertionError(
                    f"batch leaks classes {sorted(set(labels) - allowed_labels)}"
                )
            frames = _batch_frames(batch, config.t_segments, view_rng)
            stack = model.features(frames)
            label_t = torch.tensor(labels, dtype=torch.long)
            cls = model.classification_loss(stack, label_t)
            dist_feat: torch.Tensor | float = 0.0
            dist_embed: torch.Tensor | float = 0.0
            ortho: torch.Tensor | float = 0.0
            if use_prev:
                with torch.no_grad():
                    prev_stack = prev_model.features(frames)
            if use_feat:
                if terms["mask"]:
                    dist_feat = distillation_loss(stack, prev_stack, mask)
                else:
                    dist_feat = unweighted_distillation_loss(stack, prev_stack)
            if use_embed:
                dist_embed = embedding_distillation_loss(
                    stack.embedding, prev_stack.embedding
                )
            if use_ortho:
                ortho = orthogonality_loss(stack)
            loss = total_loss(cls, dist_feat, dist_embed, ortho, effective)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            model.head.renormalize()
            if final_epoch:
                b = len(batch)
                seen_samples += b
                components["cls"] += float(cls.detach()) * b
                components["dist_feat"] += float(
                    dist_feat.detach() if torch.is_tensor(dist_feat) else dist_feat
                ) * b
                components["dist_embed"] += float(
                    dist_embed.detach() if torch.is_tensor(dist_embed) else dist_embed
                ) * b
                components["ortho"] += float(
                    ortho.detach() if torch.is_tensor(ortho) else ortho
                ) * b
        if epochs > 0 and final_epoch and seen_samples:
            components = {k: v / seen_samples for k, v in components.items()}
    model.eval()
    return components


def register_new_classes(model: IncrementalModel, class_ids: Sequence[int], seed: int, stage: int) -> None:
    """Add seeded unit-norm proxies for a stage's new classes."""
    model.head.register_classes(class_ids, generator=_torch_gen(seed, _TAG_HEAD, stage))


def finetune_classifier(
    model: IncrementalModel,
    memory: ExemplarMemory,
    config: ExperimentConfig,
    seed: int,
    stage: int,
) -> IncrementalModel:
    """Balanced head-only fine-tuning on the exemplar store.

    Only proxies and eta receive updates; backbone outputs are bit-identical
    before and after. Empty memory skips with a warning.
    """
    exemplars = memory.exemplars()
    if not exemplars:
        log.warning("exemplar memory empty; skipping classifier fine-tuning")
        return model
    if config.finetune_epochs < 1:
        return model
    _train_stage(
        model,
        exemplars,
        config,
        stage=stage,
        seed=seed,
        epochs=config.finetune_epochs,
        allowed_labels=set(memory.classes()),
        head_only=True,
        seed_tag=_TAG_FINETUNE,
    )
    return model


# ---------------------------------------------------------------------------
# Stage drivers
# ---------------------------------------------------------------------------


def _evaluate_stage(
    model: IncrementalModel,
    memory: ExemplarMemory,
    test_by_class: dict[int, list[VideoSample]],
    seen: list[int],
    step: int,
    components: dict[str, float],
) -> MetricsRecord:
    test = [s for c in seen for s in test_by_class.get(c, [])]
    acc_cnn, per_class = evaluate_cnn(model, test, seen)
    acc_nme, _ = evaluate_nme(model, memory, test)
    return MetricsRecord(
        step=step,
        seen_class_count=len(seen),
        acc_cnn=acc_cnn,
        acc_nme=acc_nme,
        per_class_accuracy=per_class,
        loss_components=components,
        seen_classes=list(seen),
    )


def run_incremental_step(
    state: StepState,
    task_samples: list[VideoSample],
    config: ExperimentConfig,
    seed: int,
    stream: TaskStream,
    test_by_class: dict[int, list[VideoSample]],
) -> StepState:
    """One incremental stage k: extend head, train, refresh mask, herd, tune."""
    k = state.step + 1
    if not task_samples:
        raise ValueError(f"stage {k} received no training samples")
    new_classes = list(stream.groups[k])
    register_new_classes(state.model, new_classes, seed, k)

    prev_model = copy.deepcopy(state.model)
    prev_model.eval()
    for p in prev_model.parameters():
        p.requires_grad_(False)

    seen = stream.seen_classes(k)
    weights = LossWeights(
        alpha_feat=config.alpha_feat,
        alpha_embed=config.alpha_embed,
        beta=config.beta,
        lambda_scale=adaptive_lambda(len(seen), len(new_classes)),
    )
    replay = state.memory.exemplars()
    components = _train_stage(
        state.model,
        list(task_samples) + replay,
        config,
        stage=k,
        seed=seed,
        epochs=config.epochs_incremental,
        allowed_labels=set(seen),
        prev_model=prev_model,
        mask=state.mask,
        weights=weights,
    )

    # next stage's mask comes from the just-trained model over what is still
    # accessible now: the old exemplars plus this stage's data
    accessible = replay + list(task_samples)
    mask_next = normalize_importance(
        compute_importance(state.model, accessible, step=k + 1)
    )
    update_memory(
        state.memory, task_samples, state.model, seed=_substream(seed, _TAG_MEMORY, k)
    )
    finetune_classifier(state.model, state.memory, config, seed, stage=k)
    record = _evaluate_stage(
        state.model, state.memory, test_by_class, seen, k, components
    )
    return StepState(
        step=k,
        model=state.model,
        memory=state.memory,
        mask=mask_next,
        records=state.records + [record],
    )


def _run_initial_stage(
    config: ExperimentConfig,
    seed: int,
    stream: TaskStream,
    train_by_class: dict[int, list[VideoSample]],
    test_by_class: dict[int, list[VideoSample]],
) -> StepState:
    model = build_model(
        config.backbone_config(),
        n_proxy=config.n_proxy,
        delta=config.margin,
        eta_init=config.eta_init,
        eta_trainable=config.eta_trainable,
        init_seed=_substream(seed, _TAG_MODEL),
    )
    initial_classes = list(stream.groups[0])
    register_new_classes(model, initial_classes, seed, 0)
    items = [s for c in initial_classes for s in train_by_class[c]]
    terms = METHOD_TERMS[config.method]
    weights = LossWeights(0.0, 0.0, config.beta if terms["ortho"] else 0.0, 1.0)
    components = _train_stage(
        model,
        items,
        config,
        stage=0,
        seed=seed,
        epochs=config.epochs_initial,
        allowed_labels=set(initial_classes),
        weights=weights,
    )
    mask = normalize_importance(compute_importance(model, items, step=1))
    memory = ExemplarMemory(
        budget_per_class=config.budget_per_class,
        strategy=SamplingStrategy(config.sampling_strategy),
    )
    update_memory(memory, items, model, seed=_substream(seed, _TAG_MEMORY, 0))
    record = _evaluate_stage(
        model, memory, test_by_class, sorted(initial_classes), 0, components
    )
    return StepState(step=0, model=model, memory=memory, mask=mask, records=[record])


# ---------------------------------------------------------------------------
# Experiment driver
# ---------------------------------------------------------------------------


def _stage_dir(out_dir: Path, k: int) -> Path:
    return out_dir / f"stage_{k}"


def _stage_complete(out_dir: Path, k: int) -> bool:
    d = _stage_dir(out_dir, k)
    needed = ["checkpoint.pt", "mask.npz", "mask.json", "memory.npz", "memory.json", "metrics.json"]
    return all((d / n).exists() for n in needed)


def _persist_stage(out_dir: Path, state: StepState) -> None:
    d = _stage_dir(out_dir, state.step)
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state.model, d / "checkpoint.pt", state.step)
    assert state.mask is not None
    save_mask(state.mask, d / "mask.npz", d / "mask.json")
    save_memory(state.memory, d / "memory.npz", d / "memory.json")
    (d / "metrics.json").write_text(state.records[-1].to_json())


def _load_stage(out_dir: Path, k: int, records: list[MetricsRecord]) -> StepState:
    d = _stage_dir(out_dir, k)
    model, _ = load_checkpoint(d / "checkpoint.pt")
    mask = load_mask(d / "mask.npz", d / "mask.json")
    memory = load_memory(d / "memory.npz", d / "memory.json")
    record = MetricsRecord.from_json((d / "metrics.json").read_text())
    return StepState(step=k, model=model, memory=memory, mask=mask, records=records + [record])


def run_experiment(
    config: ExperimentConfig,
    seed: int,
    out_dir: str | Path,
    resume: bool = False,
    stop_after_stage: Optional[int] = None,
) -> list[MetricsRecord]:
    """Run the full incremental protocol for one seed.

    Artifacts: `config.json` echo, `task_stream.json`, `log.txt`, and one
    `stage_<k>/` directory per stage holding checkpoint, mask, memory, and
    metrics. With ``resume`` the completed stages are loaded from disk and
    the remaining ones reproduce the uninterrupted run exactly.
    """
    config.validate()
    torch.set_num_threads(1)  # bitwise reproducibility of reductions
    out = Path(out_dir)
    echo = ExperimentConfig.from_dict({**config.to_dict(), "seeds": [int(seed)]})
    marker = out / "config.json"
    if marker.exists():
        existing = json.loads(marker.read_text())
        if existing != echo.to_dict():
            raise ConfigurationError(
                f"{out} already holds a run with a different config"
            )
        if not resume:
            raise ConfigurationError(
                f"{out} already exists; pass resume=True to continue it"
            )
    out.mkdir(parents=True, exist_ok=True)
    marker.write_text(json.dumps(echo.to_dict(), sort_keys=True, indent=2) + "\n")

    handler = logging.FileHandler(out / "log.txt")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    root = logging.getLogger("tcd_lab")
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    try:
        stream = build_task_stream(
            range(config.n_classes), seed, config.initial_classes, config.group_size
        )
        (out / "task_stream.json").write_text(stream.to_json())
        spec = config.synthetic_spec()
        train = generate_synthetic_dataset(spec, config.train_samples_per_class)
        test = generate_synthetic_dataset(
            spec, config.test_samples_per_class, first_index=config.train_samples_per_class
        )
        train_by_class: dict[int, list[VideoSample]] = {}
        for s in train:
            train_by_class.setdefault(s.label, []).append(s)
        test_by_class: dict[int, list[VideoSample]] = {}
        for s in test:
            test_by_class.setdefault(s.label, []).append(s)

        state: Optional[StepState] = None
        records: list[MetricsRecord] = []
        for k in range(stream.num_stages):
            if resume and _stage_complete(out, k):
                state = _load_stage(out, k, records)
                records = state.records
                log.info("stage %d loaded from disk", k)
            else:
                if k == 0:
                    state = _run_initial_stage(
                        config, seed, stream, train_by_class, test_by_class
                    )
                else:
                    assert state is not None
                    task_samples = [
                        s for c in stream.groups[k] for s in train_by_class[c]
                    ]
                    state = run_incremental_step(
                        state, task_samples, config, seed, stream, test_by_class
                    )
                records = state.records
                _persist_stage(out, state)
                rec = records[-1]
                log.info(
                    "stage %d: cnn=%.2f nme=%.2f over %d classes",
                    k,
                    rec.acc_cnn,
                    rec.acc_nme,
                    rec.seen_class_count,
                )
            if stop_after_stage is not None and k >= stop_after_stage:
                break
        return records
    finally:
        root.removeHandler(handler)
        handler.close()
