"""Training loops: ancestor pretraining on the task union, super-network
search training with frozen bases, descendant fine-tuning, evaluation, and
the learngene-vs-scratch comparison experiment.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import SGD, Tape, cross_entropy
from .datasets import DatasetHandle
from .router import RouteMode
from .supernet import SuperNet
from .vit import ViTClassifier


def poly_lr(step: int, total_steps: int, lr0: float, power: float = 0.9) -> float:
    """Polynomial decay: lr0 * (1 - step/total_steps) ** power."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if lr0 <= 0:
        raise ValueError("lr0 must be positive")
    if power < 0:
        raise ValueError("power must be non-negative")
    return lr0 * (1.0 - step / total_steps) ** power


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 32
    lr: float = 5e-4
    per_dataset_lrs: tuple[float, ...] | None = None
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    mode: RouteMode = RouteMode.BATCH

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    split: str
    dataset_id: int
    loss: float
    accuracy: float
    lr: float
    wall_ms: float


@dataclass
class Metrics:
    records: list[EpochRecord] = field(default_factory=list)

    def add(self, **kw) -> None:
        self.records.append(EpochRecord(**kw))

    def final_accuracies(self) -> dict[int, float]:
        out: dict[int, float] = {}
        for r in self.records:
            if r.split == "test":
                out[r.dataset_id] = r.accuracy
        return out

    def train_losses(self) -> list[float]:
        return [r.loss for r in self.records if r.split == "train"]

    def to_text(self, include_wall: bool = False) -> str:
        """Tab-separated records; wall time is zeroed unless requested so the
        emitted artifact is a pure function of config and seed."""
        lines = ["epoch\tsplit\tdataset\tloss\taccuracy\tlr\twall_ms"]
        for r in self.records:
            wall = r.wall_ms if include_wall else 0
            lines.append(
                f"{r.epoch}\t{r.split}\t{r.dataset_id}\t{r.loss:.6f}\t"
                f"{r.accuracy:.6f}\t{r.lr:.8f}\t{wall:.0f}"
            )
        return "\n".join(lines) + "\n"


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((np.argmax(logits, axis=1) == labels).mean())


def evaluate(net: ViTClassifier, dataset: DatasetHandle, batch_size: int = 64) -> float:
    """Top-1 accuracy over the full test split; deterministic."""
    if net.config.num_classes != dataset.num_classes:
        raise ValueError(
            f"model head has {net.config.num_classes} classes, "
            f"dataset has {dataset.num_classes}"
        )
    hits = 0
    for batch in dataset.test_batches(batch_size):
        logits = net.forward(batch.inputs).data
        hits += int((np.argmax(logits, axis=1) == batch.labels).sum())
    return hits / len(dataset.test_labels)


def evaluate_supernet(
    net: SuperNet,
    dataset: DatasetHandle,
    dataset_id: int,
    mode: RouteMode = RouteMode.BATCH,
    batch_size: int = 64,
) -> float:
    hits = 0
    for batch in dataset.test_batches(batch_size):
        logits, _ = net.forward(batch.inputs, dataset_id, mode=mode, training=False)
        hits += int((np.argmax(logits.data, axis=1) == batch.labels).sum())
    return hits / len(dataset.test_labels)


# ---------------------------------------------------------------------------
# ancestor pretraining (joint over the task union, shared label space)


def pretrain_ansnet(
    model: ViTClassifier, datasets: list[DatasetHandle], cfg: TrainConfig
) -> Metrics:
    for d in datasets:
        if d.num_classes != model.config.num_classes:
            raise ValueError("pretraining needs a shared label space across tasks")
    inputs = np.concatenate([d.train_inputs for d in datasets])
    labels = np.concatenate([d.train_labels for d in datasets])
    n = len(labels)
    steps_per_epoch = max(1, n // cfg.batch_size)
    total_steps = max(1, cfg.epochs * steps_per_epoch)

    metrics = Metrics()
    opt = SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum,
              weight_decay=cfg.weight_decay)
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.monotonic()
        order = np.random.default_rng(
            np.random.SeedSequence((cfg.seed, 13, epoch))
        ).permutation(n)
        losses, accs = [], []
        for lo in range(0, steps_per_epoch * cfg.batch_size, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            lr = poly_lr(step, total_steps, cfg.lr, cfg.poly_power)
            with Tape() as tape:
                logits = model.forward(inputs[idx])
                loss = cross_entropy(logits, labels[idx])
            tape.backward(loss)
            opt.step(lr=lr)
            losses.append(loss.item())
            accs.append(_accuracy(logits.data, labels[idx]))
            step += 1
        metrics.add(epoch=epoch + 1, split="train", dataset_id=0,
                    loss=float(np.mean(losses)), accuracy=float(np.mean(accs)),
                    lr=lr, wall_ms=(time.monotonic() - t0) * 1e3)
    return metrics


# ---------------------------------------------------------------------------
# super-network search training


def train_supernet(
    net: SuperNet, datasets: list[DatasetHandle], cfg: TrainConfig
) -> Metrics:
    """Round-robin over datasets, one dataset per batch; only the
    dataset-specific blocks, adapters and heads receive updates."""
    if len(datasets) != net.num_datasets:
        raise ValueError(
            f"net expects {net.num_datasets} datasets, got {len(datasets)}"
        )
    for t, d in enumerate(datasets):
        if d.num_classes != net.head_sizes[t]:
            raise ValueError(f"head {t + 1} sized {net.head_sizes[t]} but dataset "
                             f"{d.dataset_id} has {d.num_classes} classes")
    lrs = cfg.per_dataset_lrs or tuple([cfg.lr] * net.num_datasets)
    if len(lrs) != net.num_datasets:
        raise ValueError("need one learning rate per dataset")

    metrics = Metrics()
    if cfg.epochs == 0:
        return metrics
    opt = SGD(net.trainable_parameters(), lr=cfg.lr, momentum=cfg.momentum,
              weight_decay=cfg.weight_decay)
    noise_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 17)))
    batches_per_epoch = max(
        1, min(len(d.train_labels) for d in datasets) // cfg.batch_size
    )
    total_steps = cfg.epochs * batches_per_epoch * net.num_datasets

    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.monotonic()
        iters = [d.train_batches(cfg.batch_size, epoch=epoch) for d in datasets]
        sums = np.zeros(net.num_datasets)
        accs = np.zeros(net.num_datasets)
        counts = np.zeros(net.num_datasets)
        for _ in range(batches_per_epoch):
            for t in range(net.num_datasets):
                batch = next(iters[t])
                lr = poly_lr(step, total_steps, lrs[t], cfg.poly_power)
                with Tape() as tape:
                    logits, _ = net.forward(
                        batch.inputs, t + 1, mode=cfg.mode, training=True,
                        rng=noise_rng,
                    )
                    loss = cross_entropy(logits, batch.labels)
                tape.backward(loss)
                opt.step(lr=lr)
                sums[t] += loss.item()
                accs[t] += _accuracy(logits.data, batch.labels)
                counts[t] += 1
                step += 1
        wall = (time.monotonic() - t0) * 1e3
        for t in range(net.num_datasets):
            metrics.add(epoch=epoch + 1, split="train", dataset_id=t + 1,
                        loss=float(sums[t] / counts[t]),
                        accuracy=float(accs[t] / counts[t]),
                        lr=poly_lr(step - 1, total_steps, lrs[t], cfg.poly_power),
                        wall_ms=wall / net.num_datasets)
    return metrics


# ---------------------------------------------------------------------------
# descendant fine-tuning


def finetune_desnet(
    net: ViTClassifier, dataset: DatasetHandle, cfg: TrainConfig,
    eval_each_epoch: bool = True,
) -> Metrics:
    if net.config.num_classes != dataset.num_classes:
        raise ValueError(
            f"model head has {net.config.num_classes} classes, dataset has "
            f"{dataset.num_classes}"
        )
    metrics = Metrics()
    if cfg.epochs == 0:
        return metrics
    opt = SGD(net.parameters(), lr=cfg.lr, momentum=cfg.momentum,
              weight_decay=cfg.weight_decay)
    steps_per_epoch = max(1, len(dataset.train_labels) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.monotonic()
        losses, accs = [], []
        for bi, batch in enumerate(dataset.train_batches(cfg.batch_size, epoch=epoch)):
            if bi >= steps_per_epoch:
                break
            lr = poly_lr(step, total_steps, cfg.lr, cfg.poly_power)
            with Tape() as tape:
                logits = net.forward(batch.inputs)
                loss = cross_entropy(logits, batch.labels)
            tape.backward(loss)
            opt.step(lr=lr)
            losses.append(loss.item())
            accs.append(_accuracy(logits.data, batch.labels))
            step += 1
        wall = (time.monotonic() - t0) * 1e3
        metrics.add(epoch=epoch + 1, split="train", dataset_id=dataset.dataset_id,
                    loss=float(np.mean(losses)), accuracy=float(np.mean(accs)),
                    lr=lr, wall_ms=wall)
        if eval_each_epoch:
            acc = evaluate(net, dataset, batch_size=cfg.batch_size)
            metrics.add(epoch=epoch + 1, split="test", dataset_id=dataset.dataset_id,
                        loss=0.0, accuracy=acc, lr=lr, wall_ms=0.0)
    return metrics


# ---------------------------------------------------------------------------
# learngene-init vs scratch comparison


@dataclass
class CompareSeedResult:
    seed: int
    learngene_curve: list[float]
    scratch_curve: list[float]

    @property
    def learngene_final(self) -> float:
        return self.learngene_curve[-1]

    @property
    def scratch_final(self) -> float:
        return self.scratch_curve[-1]

    def epochs_to_reach_scratch_final(self) -> int | None:
        """1-based epoch where the learngene curve first meets the scratch
        twin's final accuracy; None if never."""
        for e, acc in enumerate(self.learngene_curve, start=1):
            if acc >= self.scratch_final:
                return e
        return None


@dataclass
class CompareResult:
    epochs: int
    per_seed: list[CompareSeedResult]

    @property
    def learngene_mean_final(self) -> float:
        return float(np.mean([r.learngene_final for r in self.per_seed]))

    @property
    def scratch_mean_final(self) -> float:
        return float(np.mean([r.scratch_final for r in self.per_seed]))

    def seeds_reaching_within(self, budget_fraction: float) -> int:
        limit = budget_fraction * self.epochs
        n = 0
        for r in self.per_seed:
            e = r.epochs_to_reach_scratch_final()
            if e is not None and e <= limit:
                n += 1
        return n

    def to_text(self) -> str:
        lines = ["seed\tepoch\tlearngene_acc\tscratch_acc"]
        for r in self.per_seed:
            for e, (a, s) in enumerate(zip(r.learngene_curve, r.scratch_curve), 1):
                lines.append(f"{r.seed}\t{e}\t{a:.6f}\t{s:.6f}")
        lines.append(f"mean_final\tlearngene\t{self.learngene_mean_final:.6f}\t-")
        lines.append(f"mean_final\tscratch\t{self.scratch_mean_final:.6f}\t-")
        return "\n".join(lines) + "\n"


def _test_curve(metrics: Metrics) -> list[float]:
    return [r.accuracy for r in metrics.records if r.split == "test"]


def compare_init_vs_scratch(
    build_learngene_net,
    dataset: DatasetHandle,
    cfg: TrainConfig,
    seeds: list[int],
) -> CompareResult:
    """Train matched descendant twins from learngene init and from scratch.

    ``build_learngene_net(seed)`` must return a fresh learngene-initialized
    model; the scratch twin reuses the same config with all weights drawn
    from the seed.
    """
    per_seed = []
    for seed in seeds:
        lg_net = build_learngene_net(seed)
        scratch_net = ViTClassifier(lg_net.config, seed=seed)
        run_cfg = replace(cfg, seed=seed)
        lg_metrics = finetune_desnet(lg_net, dataset, run_cfg)
        scratch_metrics = finetune_desnet(scratch_net, dataset, run_cfg)
        per_seed.append(
            CompareSeedResult(seed, _test_curve(lg_metrics), _test_curve(scratch_metrics))
        )
    return CompareResult(cfg.epochs, per_seed)
