"""Searchable super-network: each layer pairs the frozen base block with a
trainable copy-initialized twin and a per-layer routing adapter.

During training the selected block's output is multiplied by
p_selected / stop_gradient(p_selected). The factor is exactly 1.0 in value,
so forward results are bit-identical to hard routing, but it gives the
adapter weights a gradient path (the same signal as scaling by the gate
probability). Inference skips the factor entirely.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .router import (
    AdapterWeights,
    BlockChoice,
    COL_BASE,
    COL_DATASET_SPECIFIC,
    RouteMode,
    RoutingDecision,
    route_per_sample,
    route_probabilities,
    select_batch_majority,
)
from .vit import EncoderBlock, ModelConfig, ViTClassifier

GATE_EPS = 1e-12


class ArchitectureMismatch(ValueError):
    """Two supernets being compared do not share an architecture."""


@dataclass
class SuperLayer:
    base: EncoderBlock             # frozen
    dataset_specific: EncoderBlock  # trainable, byte-identical copy at construction
    adapter: AdapterWeights

    def block_for(self, choice: BlockChoice) -> EncoderBlock:
        return self.base if choice is BlockChoice.BASE else self.dataset_specific

    def trainable_parameters(self) -> list[Parameter]:
        return self.dataset_specific.parameters() + self.adapter.parameters()


class SuperNet:
    """Ancestor network expanded with per-layer twins, adapters and one
    classification head per dataset."""

    def __init__(self, config: ModelConfig, num_datasets: int, head_sizes: list[int]):
        if num_datasets < 1:
            raise ValueError("num_datasets must be >= 1")
        if len(head_sizes) != num_datasets:
            raise ValueError("need one head size per dataset")
        self.config = config
        self.num_datasets = num_datasets
        self.head_sizes = list(head_sizes)
        # weight containers are populated by expand_to_supernet / persistence
        self.embed_w: Parameter
        self.embed_b: Parameter
        self.pos_embed: Parameter
        self.norm_gain: Parameter
        self.norm_bias: Parameter
        self.layers: list[SuperLayer] = []
        self.heads: list[tuple[Parameter, Parameter]] = []
        self.gate_gradient = True
        self.gaussian_noise = False

    @property
    def depth(self) -> int:
        return len(self.layers)

    def trainable_parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for layer in self.layers:
            params.extend(layer.trainable_parameters())
        for w, b in self.heads:
            params.extend([w, b])
        return params

    def frozen_parameters(self) -> list[tuple[str, Parameter]]:
        named = [
            ("embed_w", self.embed_w),
            ("embed_b", self.embed_b),
            ("pos_embed", self.pos_embed),
            ("norm_gain", self.norm_gain),
            ("norm_bias", self.norm_bias),
        ]
        for i, layer in enumerate(self.layers):
            for name, p in layer.base.named_parameters():
                named.append((f"layer{i:02d}.base.{name}", p))
        return named

    # -- forward ----------------------------------------------------------

    def _embed(self, batch) -> Tensor:
        arr = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float32)
        spec = self.config.input_spec
        if arr.ndim != 3 or arr.shape[1] != spec.num_tokens or arr.shape[2] != spec.input_dim:
            raise ValueError(
                f"expected batch (B, {spec.num_tokens}, {spec.input_dim}), got {arr.shape}"
            )
        x = batch if isinstance(batch, Tensor) else Tensor(arr)
        return ad.add(ad.add(ad.matmul(x, self.embed_w), self.embed_b), self.pos_embed)

    def _gate_scale(self, y: Tensor, p_sel: Tensor) -> Tensor:
        # exact-identity forward factor that carries gradient into p_sel
        p = ad.add_scalar(p_sel, GATE_EPS)
        factor = ad.div(p, ad.stop_gradient(p))
        factor = ad.reshape(factor, (y.shape[0], 1, 1))
        return ad.mul(y, factor)

    def forward(
        self,
        batch,
        dataset_id: int,
        mode: RouteMode = RouteMode.BATCH,
        training: bool = False,
        rng: np.random.Generator | None = None,
        force_choices: list[BlockChoice] | None = None,
    ) -> tuple[Tensor, list[RoutingDecision]]:
        """Routed forward pass; dataset_id is 1-based."""
        if not 1 <= dataset_id <= self.num_datasets:
            raise ValueError(f"unknown dataset_id {dataset_id} (have 1..{self.num_datasets})")
        if force_choices is not None and len(force_choices) != self.depth:
            raise ValueError("force_choices must supply one choice per layer")

        x = self._embed(batch)
        decisions: list[RoutingDecision] = []
        for li, layer in enumerate(self.layers):
            pooled = ad.reduce_mean(x, axis=1)
            probs = route_probabilities(
                layer.adapter, pooled,
                training=training, gaussian_noise=self.gaussian_noise, rng=rng,
            )
            pdata = probs.data.copy()
            if mode is RouteMode.BATCH:
                choice, frac = select_batch_majority(pdata)
                if force_choices is not None:
                    choice = force_choices[li]
                y = layer.block_for(choice).forward(x)
                if training and self.gate_gradient:
                    col = COL_BASE if choice is BlockChoice.BASE else COL_DATASET_SPECIFIC
                    y = self._gate_scale(y, ad.slice_last(probs, col, col + 1))
                x = y
                decisions.append(RoutingDecision(pdata, mode, choice, frac))
            else:
                tags = route_per_sample(pdata)
                frac = float(np.mean([t is BlockChoice.BASE for t in tags]))
                if force_choices is not None:
                    tags = np.array([force_choices[li]] * x.shape[0], dtype=object)
                base_mask = np.array([t is BlockChoice.BASE for t in tags], dtype=bool)
                y_base = layer.base.forward(x)
                y_spec = layer.dataset_specific.forward(x)
                y = ad.select_rows(base_mask, y_base, y_spec)
                if training and self.gate_gradient:
                    p_base = ad.slice_last(probs, COL_BASE, COL_BASE + 1)
                    p_spec = ad.slice_last(probs, COL_DATASET_SPECIFIC, COL_DATASET_SPECIFIC + 1)
                    p_sel = ad.select_rows(base_mask, p_base, p_spec)
                    y = self._gate_scale(y, p_sel)
                x = y
                decisions.append(RoutingDecision(pdata, mode, tags, frac))

        x = ad.layer_norm(x, self.norm_gain, self.norm_bias)
        pooled = ad.reduce_mean(x, axis=1)
        head_w, head_b = self.heads[dataset_id - 1]
        logits = ad.add(ad.matmul(pooled, head_w), head_b)
        return logits, decisions

    __call__ = forward


def expand_to_supernet(
    ans: ViTClassifier,
    num_datasets: int,
    seed: int,
    head_sizes: list[int] | None = None,
) -> SuperNet:
    """Grow a trained network into the searchable super-network.

    Base blocks, embedding and final norm are frozen copies of the source;
    each dataset-specific block starts byte-identical to its base; adapters
    start from N(0, 0.02^2). Heads reuse the source head when the class
    count matches, otherwise they are freshly seeded.
    """
    if num_datasets < 1:
        raise ValueError("num_datasets must be >= 1")
    if head_sizes is None:
        head_sizes = [ans.config.num_classes] * num_datasets
    net = SuperNet(ans.config, num_datasets, head_sizes)
    rng = np.random.default_rng(seed)

    net.embed_w = ans.embed_w.copy(trainable=False)
    net.embed_b = ans.embed_b.copy(trainable=False)
    net.pos_embed = ans.pos_embed.copy(trainable=False)
    net.norm_gain = ans.norm_gain.copy(trainable=False)
    net.norm_bias = ans.norm_bias.copy(trainable=False)

    for blk in ans.blocks:
        base = blk.copy(trainable=False)
        twin = blk.copy(trainable=True)
        adapter = AdapterWeights.create(ans.config.embed_dim, rng)
        net.layers.append(SuperLayer(base, twin, adapter))

    d = ans.config.embed_dim
    for size in head_sizes:
        if size == ans.config.num_classes:
            net.heads.append((ans.head_w.copy(trainable=True), ans.head_b.copy(trainable=True)))
        else:
            w = Parameter(rng.normal(0.0, 0.02, size=(d, size)).astype(np.float32))
            b = Parameter(np.zeros(size, dtype=np.float32))
            net.heads.append((w, b))
    return net


# ---------------------------------------------------------------------------
# freezing contract


def frozen_bytes(net: SuperNet) -> bytes:
    """Canonical byte string of every frozen tensor (bases + embedding + norm)."""
    chunks = []
    for name, p in net.frozen_parameters():
        chunks.append(name.encode("utf-8"))
        chunks.append(p.data.astype("<f4", copy=False).tobytes())
    return b"".join(chunks)


def frozen_digest(net: SuperNet) -> str:
    return hashlib.sha256(frozen_bytes(net)).hexdigest()


def verify_frozen_base(net_before: SuperNet, net_after: SuperNet) -> bool:
    """True iff base blocks and embedding are bit-identical between snapshots."""
    if (
        net_before.config != net_after.config
        or net_before.depth != net_after.depth
        or net_before.num_datasets != net_after.num_datasets
    ):
        raise ArchitectureMismatch("supernets differ in architecture")
    return frozen_bytes(net_before) == frozen_bytes(net_after)


# ---------------------------------------------------------------------------
# flat array views (used by persistence)


def supernet_state(net: SuperNet) -> list[tuple[str, np.ndarray]]:
    items = [
        ("embed_w", net.embed_w.data),
        ("embed_b", net.embed_b.data),
        ("pos_embed", net.pos_embed.data),
        ("norm_gain", net.norm_gain.data),
        ("norm_bias", net.norm_bias.data),
    ]
    for i, layer in enumerate(net.layers):
        for name, p in layer.base.named_parameters():
            items.append((f"layer{i:02d}.base.{name}", p.data))
        for name, p in layer.dataset_specific.named_parameters():
            items.append((f"layer{i:02d}.specific.{name}", p.data))
        items.append((f"layer{i:02d}.adapter.w_gate", layer.adapter.w_gate.data))
        items.append((f"layer{i:02d}.adapter.w_noise", layer.adapter.w_noise.data))
    for t, (w, b) in enumerate(net.heads):
        items.append((f"head{t + 1:02d}.w", w.data))
        items.append((f"head{t + 1:02d}.b", b.data))
    return items


def load_supernet_state(net: SuperNet, arrays: dict[str, np.ndarray]) -> None:
    for name, arr in supernet_state(net):
        src = arrays.get(name)
        if src is None:
            raise KeyError(f"checkpoint missing tensor {name!r}")
        if src.shape != arr.shape:
            raise ValueError(f"tensor {name!r} shape {src.shape} != expected {arr.shape}")
        arr[...] = src
