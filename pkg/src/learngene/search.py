"""Path inference over a trained super-network, base-block usage tallies,
threshold extraction of the shared layers, and the Batch-vs-Img selection
overlap report.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .router import BlockChoice, RouteMode
from .supernet import SuperNet
from .vit import EncoderBlock, ModelConfig


class ExtractionError(ValueError):
    """No layer cleared the usage threshold."""


@dataclass
class PathRecord:
    """Per-dataset routing outcome: one choice per layer, plus vote strength."""

    dataset_id: int  # 1-based
    choices: list[BlockChoice]
    base_vote_fractions: list[float]

    def base_indices(self) -> set[int]:
        """1-based layer indices routed through the base block."""
        return {i + 1 for i, c in enumerate(self.choices) if c is BlockChoice.BASE}


@dataclass
class UsageTally:
    """usage[t-1][i-1] says whether dataset t used base block i; totals are
    per-layer sums across datasets."""

    usage: np.ndarray   # (M, L) of 0/1
    totals: np.ndarray  # (L,) ints

    @property
    def num_datasets(self) -> int:
        return self.usage.shape[0]

    @property
    def depth(self) -> int:
        return self.usage.shape[1]


@dataclass
class ExtractionConfig:
    threshold: int  # extract layer i iff totals[i] > threshold

    @classmethod
    def default_for(cls, num_datasets: int) -> "ExtractionConfig":
        return cls(threshold=num_datasets // 2)


@dataclass
class LearngeneLayers:
    """The persisted artifact: extracted base blocks with their 1-based
    source indices and the config they came from."""

    indices: list[int]
    blocks: list[EncoderBlock]
    source_config: ModelConfig
    num_datasets: int = 0
    threshold: int = 0
    totals: list[int] = field(default_factory=list)


def infer_dataset_path(
    net: SuperNet,
    dataset_id: int,
    eval_batches,
    mode: RouteMode = RouteMode.BATCH,
) -> PathRecord:
    """Derive the routing path for one dataset from held-out batches.

    Per layer, the base block is chosen iff the mean base-vote fraction over
    all batches is >= 0.5. Runs with noise disabled, so the result is a pure
    function of the net and the batches.
    """
    batches = list(eval_batches)
    if not batches:
        raise ValueError("need at least one evaluation batch")
    sums = np.zeros(net.depth, dtype=np.float64)
    for batch in batches:
        inputs = batch.inputs if hasattr(batch, "inputs") else batch
        _, decisions = net.forward(inputs, dataset_id, mode=mode, training=False)
        sums += [d.base_vote_fraction for d in decisions]
    means = sums / len(batches)
    choices = [
        BlockChoice.BASE if m >= 0.5 else BlockChoice.DATASET_SPECIFIC for m in means
    ]
    return PathRecord(dataset_id, choices, [float(m) for m in means])


def tally_usage(paths: list[PathRecord]) -> UsageTally:
    """Count base-block usage per layer across all dataset paths."""
    if not paths:
        raise ValueError("no paths to tally")
    depth = len(paths[0].choices)
    if any(len(p.choices) != depth for p in paths):
        raise ValueError("paths have mismatched lengths")
    ids = [p.dataset_id for p in paths]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate dataset_id in paths")
    usage = np.zeros((len(paths), depth), dtype=np.int64)
    for row, p in enumerate(sorted(paths, key=lambda p: p.dataset_id)):
        usage[row] = [1 if c is BlockChoice.BASE else 0 for c in p.choices]
    return UsageTally(usage=usage, totals=usage.sum(axis=0))


def extract_learngene(
    net: SuperNet, tally: UsageTally, cfg: ExtractionConfig
) -> LearngeneLayers:
    """Copy out every base block used by strictly more than `threshold`
    datasets, in layer order."""
    if tally.depth != net.depth:
        raise ValueError(
            f"tally depth {tally.depth} does not match net depth {net.depth}"
        )
    indices = [i + 1 for i in range(tally.depth) if tally.totals[i] > cfg.threshold]
    if not indices:
        raise ExtractionError(
            f"no layer exceeds usage threshold {cfg.threshold}; "
            f"totals={tally.totals.tolist()} — lower the threshold"
        )
    blocks = [net.layers[i - 1].base.copy(trainable=True) for i in indices]
    return LearngeneLayers(
        indices=indices,
        blocks=blocks,
        source_config=net.config,
        num_datasets=tally.num_datasets,
        threshold=cfg.threshold,
        totals=tally.totals.tolist(),
    )


# ---------------------------------------------------------------------------
# Batch-vs-Img selection overlap


@dataclass
class OverlapRecord:
    dataset_id: int
    set_batch: set[int]
    set_img: set[int]
    intersection: set[int]
    jaccard: float


def selection_overlap_report(
    paths_batch: list[PathRecord], paths_img: list[PathRecord]
) -> list[OverlapRecord]:
    """Per dataset, compare the base-block index sets selected under the two
    propagation modes. Jaccard of two empty sets is defined as 1.0."""
    if len(paths_batch) != len(paths_img):
        raise ValueError("mode path lists differ in length")
    by_id = {p.dataset_id: p for p in paths_img}
    records = []
    for pb in sorted(paths_batch, key=lambda p: p.dataset_id):
        pi = by_id.get(pb.dataset_id)
        if pi is None:
            raise ValueError(f"dataset {pb.dataset_id} missing from img paths")
        if len(pb.choices) != len(pi.choices):
            raise ValueError("paths have mismatched lengths")
        a, b = pb.base_indices(), pi.base_indices()
        union = a | b
        inter = a & b
        jac = 1.0 if not union else len(inter) / len(union)
        records.append(OverlapRecord(pb.dataset_id, a, b, inter, jac))
    return records


def format_overlap_report(records: list[OverlapRecord]) -> str:
    def fmt(s: set[int]) -> str:
        return ",".join(str(i) for i in sorted(s)) if s else "-"

    lines = ["dataset\tset_batch\tset_img\tintersection\tjaccard"]
    for r in records:
        lines.append(
            f"{r.dataset_id}\t{fmt(r.set_batch)}\t{fmt(r.set_img)}\t"
            f"{fmt(r.intersection)}\t{r.jaccard:.4f}"
        )
    mean = np.mean([r.jaccard for r in records]) if records else 1.0
    lines.append(f"mean_jaccard\t{mean:.4f}")
    return "\n".join(lines) + "\n"


def format_paths(paths: list[PathRecord]) -> str:
    lines = ["dataset\tchoices\tbase_vote_fractions"]
    for p in sorted(paths, key=lambda p: p.dataset_id):
        tags = "".join(c.short for c in p.choices)
        fracs = ",".join(f"{f:.6f}" for f in p.base_vote_fractions)
        lines.append(f"{p.dataset_id}\t{tags}\t{fracs}")
    return "\n".join(lines) + "\n"


def parse_paths(text: str) -> list[PathRecord]:
    lines = [ln for ln in text.strip().splitlines() if ln]
    if not lines or not lines[0].startswith("dataset\t"):
        raise ValueError("not a path record file")
    paths = []
    for ln in lines[1:]:
        id_s, tags, fracs = ln.split("\t")
        choices = [BlockChoice.from_short(c) for c in tags]
        paths.append(
            PathRecord(int(id_s), choices, [float(f) for f in fracs.split(",")])
        )
    return paths
