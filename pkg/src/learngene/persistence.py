"""Binary persistence for learngene artifacts and model checkpoints, plus
the storage-cost report comparing one stored learngene against a shelf of
pretrained variable-depth models.

Both containers share one layout (see docs/FORMATS.md):
  magic (4 bytes) | u32 version | u64 body_len | body | u32 crc32(body)
The body is a length-prefixed JSON header followed by raw little-endian
float32 tensor payloads in the order the header lists them.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .search import LearngeneLayers
from .vit import (
    EncoderBlock,
    ImageInputSpec,
    ModelConfig,
    TokenInputSpec,
    count_block_parameters,
    count_trunk_parameters,
)

LEARNGENE_MAGIC = b"LGNE"
CHECKPOINT_MAGIC = b"LGCK"
FORMAT_VERSION = 1


class PersistenceError(Exception):
    """Base class for artifact file problems."""


class BadMagicError(PersistenceError):
    pass


class VersionError(PersistenceError):
    pass


class TruncatedFileError(PersistenceError):
    pass


class ChecksumError(PersistenceError):
    pass


class HeaderError(PersistenceError):
    pass


# ---------------------------------------------------------------------------
# config <-> json


def config_to_dict(config: ModelConfig) -> dict:
    spec = config.input_spec
    if isinstance(spec, TokenInputSpec):
        spec_d = {"kind": "tokens", "num_tokens": spec.num_tokens,
                  "input_dim": spec.input_dim}
    else:
        spec_d = {"kind": "image", "image_size": spec.image_size,
                  "patch_size": spec.patch_size, "channels": spec.channels}
    return {
        "embed_dim": config.embed_dim,
        "num_heads": config.num_heads,
        "depth": config.depth,
        "num_classes": config.num_classes,
        "mlp_ratio": config.mlp_ratio,
        "input_spec": spec_d,
    }


def config_from_dict(d: dict) -> ModelConfig:
    spec_d = d["input_spec"]
    if spec_d["kind"] == "tokens":
        spec = TokenInputSpec(spec_d["num_tokens"], spec_d["input_dim"])
    elif spec_d["kind"] == "image":
        spec = ImageInputSpec(spec_d["image_size"], spec_d["patch_size"],
                              spec_d["channels"])
    else:
        raise HeaderError(f"unknown input spec kind {spec_d['kind']!r}")
    return ModelConfig(
        embed_dim=d["embed_dim"], num_heads=d["num_heads"], depth=d["depth"],
        num_classes=d["num_classes"], input_spec=spec, mlp_ratio=d["mlp_ratio"],
    )


# ---------------------------------------------------------------------------
# shared container


def _pack(magic: bytes, header: dict, arrays: list[tuple[str, np.ndarray]]) -> bytes:
    header = dict(header)
    header["tensors"] = [
        {"name": name, "shape": list(arr.shape)} for name, arr in arrays
    ]
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray()
    body += struct.pack("<I", len(hjson))
    body += hjson
    for _, arr in arrays:
        body += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    body = bytes(body)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    return magic + struct.pack("<IQ", FORMAT_VERSION, len(body)) + body + struct.pack("<I", crc)


def _unpack(blob: bytes, magic: bytes, path) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 4 or blob[:4] != magic:
        raise BadMagicError(f"{path}: bad magic bytes (expected {magic!r})")
    if len(blob) < 16:
        raise TruncatedFileError(f"{path}: file shorter than fixed header")
    version, body_len = struct.unpack("<IQ", blob[4:16])
    if version != FORMAT_VERSION:
        raise VersionError(
            f"{path}: format version {version} not supported (have {FORMAT_VERSION})"
        )
    if len(blob) != 16 + body_len + 4:
        raise TruncatedFileError(
            f"{path}: expected {16 + body_len + 4} bytes, found {len(blob)}"
        )
    body = blob[16:16 + body_len]
    stored = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != stored:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    (hlen,) = struct.unpack("<I", body[:4])
    if 4 + hlen > len(body):
        raise TruncatedFileError(f"{path}: header extends past body")
    try:
        header = json.loads(body[4:4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"{path}: malformed header ({exc})") from exc
    arrays: dict[str, np.ndarray] = {}
    off = 4 + hlen
    for entry in header.get("tensors", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = off + count * 4
        if end > len(body):
            raise TruncatedFileError(f"{path}: tensor {entry['name']!r} runs past body")
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=off).reshape(shape)
        arrays[entry["name"]] = arr.copy()
        off = end
    if off != len(body):
        raise HeaderError(f"{path}: {len(body) - off} unaccounted payload bytes")
    return header, arrays


def _read(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


# ---------------------------------------------------------------------------
# learngene files


def learngene_bytes(lg: LearngeneLayers) -> bytes:
    header = {
        "config": config_to_dict(lg.source_config),
        "indices": lg.indices,
        "num_datasets": lg.num_datasets,
        "threshold": lg.threshold,
        "usage_totals": lg.totals,
    }
    arrays = []
    for idx, blk in zip(lg.indices, lg.blocks):
        for name, p in blk.named_parameters():
            arrays.append((f"layer{idx:02d}.{name}", p.data))
    return _pack(LEARNGENE_MAGIC, header, arrays)


def save_learngene(lg: LearngeneLayers, path) -> None:
    with open(path, "wb") as fh:
        fh.write(learngene_bytes(lg))


def load_learngene(path) -> LearngeneLayers:
    header, arrays = _unpack(_read(path), LEARNGENE_MAGIC, path)
    config = config_from_dict(header["config"])
    indices = list(header["indices"])
    blocks = []
    rng = np.random.default_rng(0)
    for idx in indices:
        blk = EncoderBlock(config, rng)
        for name, p in blk.named_parameters():
            key = f"layer{idx:02d}.{name}"
            if key not in arrays:
                raise HeaderError(f"{path}: missing tensor {key!r}")
            if arrays[key].shape != p.data.shape:
                raise HeaderError(f"{path}: tensor {key!r} has wrong shape")
            p.data = arrays[key].copy()
            p.grad = np.zeros_like(p.data)
        blocks.append(blk)
    return LearngeneLayers(
        indices=indices,
        blocks=blocks,
        source_config=config,
        num_datasets=int(header.get("num_datasets", 0)),
        threshold=int(header.get("threshold", 0)),
        totals=[int(t) for t in header.get("usage_totals", [])],
    )


# ---------------------------------------------------------------------------
# generic checkpoints


def save_checkpoint(path, kind: str, meta: dict,
                    arrays: list[tuple[str, np.ndarray]]) -> None:
    header = {"kind": kind, "meta": meta}
    with open(path, "wb") as fh:
        fh.write(_pack(CHECKPOINT_MAGIC, header, arrays))


def load_checkpoint(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    header, arrays = _unpack(_read(path), CHECKPOINT_MAGIC, path)
    return header.get("kind", ""), header.get("meta", {}), arrays


# ---------------------------------------------------------------------------
# storage accounting


@dataclass
class StorageReport:
    """Trunk-parameter accounting: the stored learngene (counted at the
    depth it supports, without any classification head) versus one pretrained
    trunk per requested descendant depth."""

    block_params: int
    overhead_params: int           # embedding + position + final norm
    num_learngene_layers: int
    learngene_params: int
    depths: list[int]
    per_desnet_params: list[int]
    total_params: int
    saving: float                  # 1 - learngene/total

    def to_text(self) -> str:
        lines = [
            f"block_params\t{self.block_params}",
            f"overhead_params\t{self.overhead_params}",
            f"learngene_layers\t{self.num_learngene_layers}",
            f"learngene_params\t{self.learngene_params}",
            "depth\tparams",
        ]
        for d, p in zip(self.depths, self.per_desnet_params):
            lines.append(f"{d}\t{p}")
        lines.append(f"total_params\t{self.total_params}")
        lines.append(f"saving\t{100.0 * self.saving:.2f}%")
        return "\n".join(lines) + "\n"


def storage_report(config: ModelConfig, num_learngene_layers: int,
                   desnet_depths: list[int]) -> StorageReport:
    if not desnet_depths:
        raise ValueError("need at least one descendant depth")
    if num_learngene_layers < 1:
        raise ValueError("learngene must contain at least one layer")
    block = count_block_parameters(config)
    trunk0 = count_trunk_parameters(config.with_depth(1)) - block
    lg_params = trunk0 + num_learngene_layers * block
    per = [trunk0 + d * block for d in desnet_depths]
    total = sum(per)
    return StorageReport(
        block_params=block,
        overhead_params=trunk0,
        num_learngene_layers=num_learngene_layers,
        learngene_params=lg_params,
        depths=list(desnet_depths),
        per_desnet_params=per,
        total_params=total,
        saving=1.0 - lg_params / total,
    )
