"""Per-layer two-way router between the frozen base block and the trainable
dataset-specific block.

Probabilities come from softmax(x @ w_gate + softplus(x @ w_noise)) over
pooled per-sample features. Column 0 is the dataset-specific block, column 1
the base block; ties always go to the base block, which keeps pretrained
knowledge by default.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

COL_DATASET_SPECIFIC = 0
COL_BASE = 1

ADAPTER_INIT_STD = 0.02


class BlockChoice(enum.Enum):
    DATASET_SPECIFIC = "dataset_specific"
    BASE = "base"

    @property
    def short(self) -> str:
        return "B" if self is BlockChoice.BASE else "D"

    @classmethod
    def from_short(cls, s: str) -> "BlockChoice":
        if s == "B":
            return cls.BASE
        if s == "D":
            return cls.DATASET_SPECIFIC
        raise ValueError(f"unknown block tag {s!r}")


class RouteMode(enum.Enum):
    BATCH = "batch"
    IMG = "img"


@dataclass
class AdapterWeights:
    """Router weights: a gate matrix plus a softplus-smoothed noise matrix."""

    w_gate: Parameter
    w_noise: Parameter

    @classmethod
    def create(cls, embed_dim: int, rng: np.random.Generator) -> "AdapterWeights":
        w1 = rng.normal(0.0, ADAPTER_INIT_STD, size=(embed_dim, 2)).astype(np.float32)
        w2 = rng.normal(0.0, ADAPTER_INIT_STD, size=(embed_dim, 2)).astype(np.float32)
        return cls(Parameter(w1), Parameter(w2))

    def parameters(self) -> list[Parameter]:
        return [self.w_gate, self.w_noise]

    def copy(self) -> "AdapterWeights":
        return AdapterWeights(self.w_gate.copy(), self.w_noise.copy())


@dataclass
class RoutingDecision:
    """Outcome of routing one batch at one layer."""

    per_sample_probs: np.ndarray  # (N, 2): columns (dataset_specific, base)
    mode: RouteMode
    selected: BlockChoice | np.ndarray  # one tag (Batch) or per-sample tags (Img)
    base_vote_fraction: float


def route_probabilities(
    adapter: AdapterWeights,
    x: Tensor,
    training: bool = False,
    gaussian_noise: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Per-sample probabilities over (dataset_specific, base).

    The smoothed noise branch is always added, exactly as written; the
    optional Gaussian multiplier on it is off by default and only ever
    applies during training.
    """
    if x.data.ndim != 2 or x.data.shape[1] != adapter.w_gate.data.shape[0]:
        raise ValueError(
            f"router expects (N, {adapter.w_gate.data.shape[0]}) input, got {x.data.shape}"
        )
    noise_branch = ad.softplus(ad.matmul(x, adapter.w_noise))
    if gaussian_noise and training:
        if rng is None:
            raise ValueError("gaussian_noise=True during training requires an rng")
        eps = Tensor(rng.standard_normal(noise_branch.data.shape).astype(np.float32))
        noise_branch = ad.mul(noise_branch, eps)
    logits = ad.add(ad.matmul(x, adapter.w_gate), noise_branch)
    return ad.softmax_rows(logits)


def base_votes(probs: np.ndarray) -> np.ndarray:
    """Per-sample boolean: True when the base block wins (ties to base)."""
    probs = np.asarray(probs)
    return probs[:, COL_BASE] >= probs[:, COL_DATASET_SPECIFIC]


def select_batch_majority(probs) -> tuple[BlockChoice, float]:
    """Whole-batch selection: base wins on at least half the votes."""
    data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    if data.shape[0] < 1:
        raise ValueError("majority selection needs at least one sample")
    frac = float(base_votes(data).mean())
    choice = BlockChoice.BASE if frac >= 0.5 else BlockChoice.DATASET_SPECIFIC
    return choice, frac


def route_per_sample(probs) -> np.ndarray:
    """Per-sample tags; downstream forward keeps outputs in batch order."""
    data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    if data.shape[0] < 1:
        raise ValueError("per-sample routing needs at least one sample")
    votes = base_votes(data)
    return np.array(
        [BlockChoice.BASE if v else BlockChoice.DATASET_SPECIFIC for v in votes],
        dtype=object,
    )
