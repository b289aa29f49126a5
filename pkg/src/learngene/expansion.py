"""Stage partition of extracted layer indices and depth-expansion planning.

Adjacent extracted indices form a stage. Extra depth is handed out one slot
at a time over a stage priority order (default: last stage first, then
backwards), repeating round-robin when there are more slots than priority
entries. Neighbor expansion duplicates a stage's final layer; cyclic
expansion appends the stage's layers again in their original order.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .search import LearngeneLayers
from .vit import ViTClassifier


class Strategy(enum.Enum):
    NEIGHBOR = "neighbor"
    CYCLIC = "cyclic"


@dataclass
class StagePlan:
    stages: list[list[int]]

    @property
    def indices(self) -> list[int]:
        return [i for stage in self.stages for i in stage]


@dataclass
class ExpansionPlan:
    strategy: Strategy
    priority: list[int]       # stage positions, visited round-robin
    target_depth: int
    sequence: list[int]       # learngene indices realizing the target depth


def split_into_stages(indices: list[int]) -> StagePlan:
    """Partition strictly increasing indices into maximal consecutive runs."""
    if not indices:
        raise ValueError("cannot stage an empty index list")
    if any(b <= a for a, b in zip(indices, indices[1:])):
        raise ValueError(f"indices must be strictly increasing, got {indices}")
    stages = [[indices[0]]]
    for idx in indices[1:]:
        if idx == stages[-1][-1] + 1:
            stages[-1].append(idx)
        else:
            stages.append([idx])
    return StagePlan(stages)


def default_priority(num_stages: int) -> list[int]:
    """Reverse stage order: last, then middle, then first."""
    return list(range(num_stages - 1, -1, -1))


def plan_expansion(
    plan: StagePlan,
    target_depth: int,
    strategy: Strategy = Strategy.NEIGHBOR,
    priority: list[int] | None = None,
) -> ExpansionPlan:
    """Assign extra depth to stages and emit the layer index sequence."""
    count = len(plan.indices)
    if target_depth < count:
        raise ValueError(
            f"target depth {target_depth} below layer count {count}"
        )
    if priority is None:
        priority = default_priority(len(plan.stages))
    if not priority:
        raise ValueError("priority order must not be empty")
    if len(set(priority)) != len(priority):
        raise ValueError(f"priority order has duplicates: {priority}")
    for pos in priority:
        if not 0 <= pos < len(plan.stages):
            raise ValueError(f"priority position {pos} out of range for {len(plan.stages)} stages")

    extras = [0] * len(plan.stages)
    for k in range(target_depth - count):
        extras[priority[k % len(priority)]] += 1

    sequence: list[int] = []
    for stage, extra in zip(plan.stages, extras):
        sequence.extend(stage)
        if strategy is Strategy.NEIGHBOR:
            sequence.extend([stage[-1]] * extra)
        else:
            sequence.extend(stage[k % len(stage)] for k in range(extra))
    return ExpansionPlan(strategy, list(priority), target_depth, sequence)


def instantiate_desnet(
    lg: LearngeneLayers,
    plan: ExpansionPlan,
    num_classes: int,
    seed: int,
) -> ViTClassifier:
    """Build a descendant: blocks copied from the extracted layers per the
    plan sequence (duplicates get independent parameter sets), embedding and
    head freshly seeded, everything trainable."""
    by_index = {i: blk for i, blk in zip(lg.indices, lg.blocks)}
    missing = [i for i in plan.sequence if i not in by_index]
    if missing:
        raise ValueError(f"plan references layers absent from the extraction: {missing}")
    config = lg.source_config.with_depth(len(plan.sequence))
    if num_classes != config.num_classes:
        from dataclasses import replace

        config = replace(config, num_classes=num_classes)
    net = ViTClassifier(config, seed=seed)
    net.blocks = [by_index[i].copy(trainable=True) for i in plan.sequence]
    return net


def format_plan(plan: ExpansionPlan, stage_plan: StagePlan) -> str:
    lines = [
        f"strategy\t{plan.strategy.value}",
        f"priority\t{','.join(str(p) for p in plan.priority)}",
        f"target_depth\t{plan.target_depth}",
        f"stages\t{';'.join(','.join(str(i) for i in s) for s in stage_plan.stages)}",
        f"sequence\t{','.join(str(i) for i in plan.sequence)}",
    ]
    return "\n".join(lines) + "\n"
