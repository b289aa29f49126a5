"""Pipeline configuration: JSON file, strict validation.

Validation walks the whole document and returns every violation at once;
unknown keys are rejected at all levels. An extraction threshold outside
[1, num_datasets] is legal for sensitivity sweeps and only raises a warning.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .datasets import TaskShift, default_shift_schedule
from .expansion import Strategy
from .router import RouteMode
from .vit import ModelConfig, TokenInputSpec

DEFAULT_PER_DATASET_LRS = (
    5e-4, 1e-6, 1e-5, 1e-5, 1e-5, 5e-4, 5e-4, 1e-5, 1e-4, 1e-5, 1e-5, 1e-5,
)


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class FamilySection:
    num_datasets: int = 12
    num_classes: int = 4
    tokens_per_sample: int = 16
    input_dim: int = 32
    train_size: int = 256
    test_size: int = 128
    max_angle: float = math.pi / 3
    base_noise: float = 0.45
    noise_step: float = 0.02


@dataclass
class ModelSection:
    embed_dim: int = 64
    num_heads: int = 4
    mlp_ratio: int = 4
    depth: int = 12


@dataclass
class PhaseSection:
    epochs: int = 1
    batch_size: int = 32
    lr: float = 5e-4
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0


@dataclass
class SearchSection(PhaseSection):
    mode: str = "batch"
    per_dataset_lrs: list[float] | None = None
    gaussian_noise: bool = False
    gate_gradient: bool = True
    eval_batches: int = 4


@dataclass
class ExtractionSection:
    threshold: int = 6


@dataclass
class ExpansionSection:
    strategy: str = "neighbor"
    priority: str | list[int] = "reverse"
    target_depths: list[int] = field(default_factory=lambda: [6, 7])


@dataclass
class CompareSection:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 5e-4
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    target_depth: int = 6
    budget_fraction: float = 0.7


@dataclass
class PipelineConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    model: ModelSection = field(default_factory=ModelSection)
    family: FamilySection = field(default_factory=FamilySection)
    pretrain: PhaseSection = field(default_factory=lambda: PhaseSection(epochs=8))
    search: SearchSection = field(default_factory=lambda: SearchSection(epochs=4))
    extraction: ExtractionSection = field(default_factory=ExtractionSection)
    expansion: ExpansionSection = field(default_factory=ExpansionSection)
    finetune: PhaseSection = field(default_factory=lambda: PhaseSection(epochs=10))
    compare: CompareSection = field(default_factory=CompareSection)
    warnings: list[str] = field(default_factory=list)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            embed_dim=self.model.embed_dim,
            num_heads=self.model.num_heads,
            depth=self.model.depth,
            num_classes=self.family.num_classes,
            input_spec=TokenInputSpec(self.family.tokens_per_sample,
                                      self.family.input_dim),
            mlp_ratio=self.model.mlp_ratio,
        )

    def shift_schedule(self) -> list[TaskShift]:
        return default_shift_schedule(
            self.family.num_datasets, self.family.max_angle,
            self.family.base_noise, self.family.noise_step,
        )

    def heldout_shift(self) -> TaskShift:
        # a fresh angle inside the family's fan, off the task grid
        return TaskShift(angle=0.55 * self.family.max_angle,
                         noise_scale=self.family.base_noise)

    def search_lrs(self) -> tuple[float, ...]:
        if self.search.per_dataset_lrs is not None:
            return tuple(self.search.per_dataset_lrs)
        pattern = DEFAULT_PER_DATASET_LRS
        m = self.family.num_datasets
        return tuple(pattern[t % len(pattern)] for t in range(m))

    def route_mode(self) -> RouteMode:
        return RouteMode(self.search.mode)

    def expansion_strategy(self) -> Strategy:
        return Strategy(self.expansion.strategy)

    def expansion_priority(self, num_stages: int) -> list[int] | None:
        if self.expansion.priority == "reverse":
            return None  # planner default: last stage first
        return list(self.expansion.priority)


# ---------------------------------------------------------------------------
# validation


def _check_fields(data: dict, section: str, fields: dict, errors: list[str]) -> dict:
    """fields: name -> (kind, constraint) where constraint(v) returns an
    error string or None."""
    out = {}
    for key in data:
        if key not in fields:
            errors.append(f"{section}.{key}: unknown key")
    for name, (kinds, check) in fields.items():
        if name not in data:
            continue
        value = data[name]
        if not isinstance(value, kinds) or isinstance(value, bool) and bool not in (
            kinds if isinstance(kinds, tuple) else (kinds,)
        ):
            errors.append(f"{section}.{name}: expected {_kind_name(kinds)}")
            continue
        msg = check(value) if check else None
        if msg:
            errors.append(f"{section}.{name}: {msg}")
        else:
            out[name] = value
    return out


def _kind_name(kinds) -> str:
    if not isinstance(kinds, tuple):
        kinds = (kinds,)
    return "/".join(k.__name__ for k in kinds)


def _positive(v):
    return None if v > 0 else f"must be positive, got {v}"


def _non_negative(v):
    return None if v >= 0 else f"must be >= 0, got {v}"


def _int_list(v):
    if not all(isinstance(x, int) and not isinstance(x, bool) for x in v):
        return "must be a list of integers"
    return None


def _float_list(v):
    if not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        return "must be a list of numbers"
    if any(x <= 0 for x in v):
        return "entries must be positive"
    return None


_NUM = (int, float)

_PHASE_FIELDS = {
    "epochs": (int, _non_negative),
    "batch_size": (int, _positive),
    "lr": (_NUM, _positive),
    "poly_power": (_NUM, _non_negative),
    "momentum": (_NUM, _non_negative),
    "weight_decay": (_NUM, _non_negative),
}


def validate_config(data: dict) -> PipelineConfig:
    """Typed config or ConfigError carrying the complete violation list."""
    errors: list[str] = []
    cfg = PipelineConfig()
    if not isinstance(data, dict):
        raise ConfigError(["top level: expected a JSON object"])

    top_known = {"seed", "output_dir", "model", "family", "pretrain", "search",
                 "extraction", "expansion", "finetune", "compare"}
    for key in data:
        if key not in top_known:
            errors.append(f"{key}: unknown key")

    top = _check_fields(
        {k: v for k, v in data.items() if k in ("seed", "output_dir")},
        "top", {"seed": (int, _non_negative), "output_dir": (str, None)}, errors,
    )
    cfg.seed = top.get("seed", cfg.seed)
    cfg.output_dir = top.get("output_dir", cfg.output_dir)

    def section(name):
        raw = data.get(name, {})
        if not isinstance(raw, dict):
            errors.append(f"{name}: expected an object")
            return {}
        return raw

    model = _check_fields(section("model"), "model", {
        "embed_dim": (int, _positive),
        "num_heads": (int, _positive),
        "mlp_ratio": (int, _positive),
        "depth": (int, _positive),
    }, errors)
    for k, v in model.items():
        setattr(cfg.model, k, v)
    if cfg.model.embed_dim % cfg.model.num_heads != 0:
        errors.append("model.embed_dim: must be divisible by model.num_heads")

    family = _check_fields(section("family"), "family", {
        "num_datasets": (int, lambda v: None if v >= 2 else "must be >= 2"),
        "num_classes": (int, lambda v: None if v >= 2 else "must be >= 2"),
        "tokens_per_sample": (int, _positive),
        "input_dim": (int, _positive),
        "train_size": (int, _positive),
        "test_size": (int, _positive),
        "max_angle": (_NUM, _non_negative),
        "base_noise": (_NUM, _positive),
        "noise_step": (_NUM, _non_negative),
    }, errors)
    for k, v in family.items():
        setattr(cfg.family, k, v)
    if cfg.family.num_classes > cfg.family.input_dim:
        errors.append("family.num_classes: cannot exceed family.input_dim")

    for phase_name in ("pretrain", "finetune"):
        parsed = _check_fields(section(phase_name), phase_name, _PHASE_FIELDS, errors)
        target = getattr(cfg, phase_name)
        for k, v in parsed.items():
            setattr(target, k, v)

    search_fields = dict(_PHASE_FIELDS)
    search_fields.update({
        "mode": (str, lambda v: None if v in ("batch", "img") else
                 f"must be 'batch' or 'img', got {v!r}"),
        "per_dataset_lrs": (list, _float_list),
        "gaussian_noise": (bool, None),
        "gate_gradient": (bool, None),
        "eval_batches": (int, _positive),
    })
    parsed = _check_fields(section("search"), "search", search_fields, errors)
    for k, v in parsed.items():
        setattr(cfg.search, k, v)
    if (cfg.search.per_dataset_lrs is not None
            and len(cfg.search.per_dataset_lrs) != cfg.family.num_datasets):
        errors.append(
            f"search.per_dataset_lrs: need {cfg.family.num_datasets} entries, "
            f"got {len(cfg.search.per_dataset_lrs)}"
        )

    parsed = _check_fields(section("extraction"), "extraction", {
        "threshold": (int, None),
    }, errors)
    for k, v in parsed.items():
        setattr(cfg.extraction, k, v)
    if not 1 <= cfg.extraction.threshold <= cfg.family.num_datasets:
        cfg.warnings.append(
            f"extraction.threshold {cfg.extraction.threshold} outside "
            f"[1, {cfg.family.num_datasets}]"
        )

    def _priority_ok(v):
        if v == "reverse":
            return None
        if isinstance(v, list):
            if not v:
                return "must be 'reverse' or a non-empty list of stage positions"
            if _int_list(v) or any(x < 0 for x in v) or len(set(v)) != len(v):
                return "stage positions must be distinct non-negative integers"
            return None
        return "must be 'reverse' or a list of stage positions"

    parsed = _check_fields(section("expansion"), "expansion", {
        "strategy": (str, lambda v: None if v in ("neighbor", "cyclic") else
                     f"must be 'neighbor' or 'cyclic', got {v!r}"),
        "priority": ((str, list), _priority_ok),
        "target_depths": (list, lambda v: _int_list(v) or
                          (None if v and all(x >= 1 for x in v) else
                           "must be a non-empty list of depths >= 1")),
    }, errors)
    for k, v in parsed.items():
        setattr(cfg.expansion, k, v)

    parsed = _check_fields(section("compare"), "compare", {
        "epochs": (int, _positive),
        "batch_size": (int, _positive),
        "lr": (_NUM, _positive),
        "seeds": (list, _int_list),
        "target_depth": (int, _positive),
        "budget_fraction": (_NUM, lambda v: None if 0 < v <= 1 else
                            "must be in (0, 1]"),
    }, errors)
    for k, v in parsed.items():
        setattr(cfg.compare, k, v)

    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path) -> PipelineConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError([f"cannot read config: {exc}"]) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config is not valid JSON: {exc}"]) from exc
    return validate_config(data)


def default_config_dict() -> dict:
    """The shipped default configuration, as a plain JSON-ready dict."""
    return {
        "seed": 0,
        "output_dir": "runs/default",
        "model": {"embed_dim": 64, "num_heads": 4, "mlp_ratio": 4, "depth": 12},
        "family": {
            "num_datasets": 12, "num_classes": 4, "tokens_per_sample": 16,
            "input_dim": 32, "train_size": 256, "test_size": 128,
            "max_angle": 1.0472, "base_noise": 0.45, "noise_step": 0.02,
        },
        "pretrain": {"epochs": 8, "batch_size": 32, "lr": 5e-4},
        "search": {"epochs": 4, "batch_size": 32, "mode": "batch",
                   "eval_batches": 4},
        "extraction": {"threshold": 6},
        "expansion": {"strategy": "neighbor", "priority": "reverse",
                      "target_depths": [6, 7]},
        "finetune": {"epochs": 10, "batch_size": 32, "lr": 5e-4},
        "compare": {"epochs": 10, "batch_size": 32, "lr": 5e-4,
                    "seeds": [0, 1, 2], "target_depth": 6,
                    "budget_fraction": 0.7},
    }
