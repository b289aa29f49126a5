"""Synthetic classification task family with controllable distribution shift,
plus a byte-exact binary container for datasets on disk.

All tasks share one set of orthonormal class anchors; each task rotates the
anchors by its own angle inside a fixed random plane and draws token
sequences where a subset of token positions carries the class signal. Bigger
angles and noise scales move a task further from the family anchor.

File layout (all little-endian), see docs/FORMATS.md:
  magic "DSET" | u32 version | u32 task_id | u32 seed | u32 num_classes
  | u32 tokens_per_sample | u32 input_dim | u32 train_size | u32 test_size
  | f32 angle | f32 noise_scale
  | train inputs f32 | train labels i32 | test inputs f32 | test labels i32
  | u32 crc32 of everything after the magic
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

DATASET_MAGIC = b"DSET"
DATASET_VERSION = 1

SIGNAL_TOKEN_FRACTION = 0.25


class DatasetFormatError(ValueError):
    """On-disk dataset violates the documented format."""


@dataclass(frozen=True)
class TaskShift:
    angle: float
    noise_scale: float
    num_classes: int | None = None


@dataclass(frozen=True)
class SyntheticTaskSpec:
    task_id: int   # 1-based
    seed: int
    num_classes: int
    tokens_per_sample: int
    input_dim: int
    angle: float
    noise_scale: float
    train_size: int
    test_size: int


@dataclass
class Batch:
    inputs: np.ndarray   # (B, tokens, input_dim) float32
    labels: np.ndarray   # (B,) int32
    dataset_id: int      # 1-based

    def __post_init__(self):
        if self.inputs.shape[0] < 1 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("batch inputs/labels mismatch")


def _balanced_labels(n: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.array([i % num_classes for i in range(n)], dtype=np.int32)
    return labels[rng.permutation(n)]


def _rotation(dim: int, angle: float, basis: np.ndarray) -> np.ndarray:
    """Rotate by `angle` in the plane of the first two basis vectors."""
    u, v = basis[:, 0], basis[:, 1]
    c, s = np.cos(angle), np.sin(angle)
    return (
        np.eye(dim)
        + (c - 1.0) * (np.outer(u, u) + np.outer(v, v))
        + s * (np.outer(v, u) - np.outer(u, v))
    )


class DatasetHandle:
    """In-memory dataset with deterministic batch iteration."""

    def __init__(self, spec: SyntheticTaskSpec, train_inputs, train_labels,
                 test_inputs, test_labels):
        self.spec = spec
        self.train_inputs = train_inputs
        self.train_labels = train_labels
        self.test_inputs = test_inputs
        self.test_labels = test_labels

    @property
    def dataset_id(self) -> int:
        return self.spec.task_id

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def train_batches(self, batch_size: int, epoch: int = 0):
        """Shuffled train batches; the order is a pure function of
        (spec.seed, epoch)."""
        rng = np.random.default_rng(np.random.SeedSequence((self.spec.seed, 7919, epoch)))
        order = rng.permutation(len(self.train_labels))
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            yield Batch(self.train_inputs[idx], self.train_labels[idx], self.dataset_id)

    def test_batches(self, batch_size: int):
        n = len(self.test_labels)
        for lo in range(0, n, batch_size):
            yield Batch(
                self.test_inputs[lo:lo + batch_size],
                self.test_labels[lo:lo + batch_size],
                self.dataset_id,
            )


def _family_geometry(base_seed: int, num_classes: int, input_dim: int):
    if num_classes > input_dim:
        raise ValueError("num_classes cannot exceed input_dim for orthonormal anchors")
    rng = np.random.default_rng(np.random.SeedSequence((base_seed, 104729)))
    anchors, _ = np.linalg.qr(rng.normal(size=(input_dim, num_classes)))
    plane, _ = np.linalg.qr(rng.normal(size=(input_dim, 2)))
    return anchors.T, plane  # (C, F) rows, (F, 2) plane basis


def make_task(base_seed: int, task_id: int, shift: TaskShift, num_classes: int,
              tokens_per_sample: int, input_dim: int,
              train_size: int, test_size: int) -> DatasetHandle:
    classes = shift.num_classes or num_classes
    anchors, plane = _family_geometry(base_seed, classes, input_dim)
    rot = _rotation(input_dim, shift.angle, plane)
    means = anchors @ rot.T

    spec = SyntheticTaskSpec(
        task_id=task_id,
        seed=int(np.random.SeedSequence((base_seed, task_id)).generate_state(1)[0]),
        num_classes=classes,
        tokens_per_sample=tokens_per_sample,
        input_dim=input_dim,
        angle=shift.angle,
        noise_scale=shift.noise_scale,
        train_size=train_size,
        test_size=test_size,
    )
    rng = np.random.default_rng(spec.seed)
    n_signal = max(1, int(round(SIGNAL_TOKEN_FRACTION * tokens_per_sample)))

    def draw(n):
        labels = _balanced_labels(n, classes, rng)
        x = rng.normal(0.0, shift.noise_scale, size=(n, tokens_per_sample, input_dim))
        for i in range(n):
            slots = rng.choice(tokens_per_sample, size=n_signal, replace=False)
            x[i, slots] += means[labels[i]]
        return x.astype(np.float32), labels

    train_x, train_y = draw(train_size)
    test_x, test_y = draw(test_size)
    return DatasetHandle(spec, train_x, train_y, test_x, test_y)


def default_shift_schedule(num_tasks: int, max_angle: float = np.pi / 3,
                           base_noise: float = 0.5, noise_step: float = 0.02):
    """Angles fan out from 0 to max_angle; noise grows mildly with task id."""
    if num_tasks < 1:
        raise ValueError("num_tasks must be >= 1")
    if num_tasks == 1:
        return [TaskShift(0.0, base_noise)]
    return [
        TaskShift(
            angle=max_angle * t / (num_tasks - 1),
            noise_scale=base_noise + noise_step * t,
        )
        for t in range(num_tasks)
    ]


def generate_task_family(
    num_tasks: int,
    base_seed: int,
    shift_schedule: list[TaskShift] | None = None,
    num_classes: int = 4,
    tokens_per_sample: int = 16,
    input_dim: int = 32,
    train_size: int = 256,
    test_size: int = 128,
) -> list[DatasetHandle]:
    """M related-but-shifted tasks; fully deterministic in base_seed."""
    if num_tasks < 2:
        raise ValueError("a task family needs at least 2 tasks")
    if shift_schedule is None:
        shift_schedule = default_shift_schedule(num_tasks)
    if len(shift_schedule) != num_tasks:
        raise ValueError("shift schedule length must equal num_tasks")
    return [
        make_task(base_seed, t + 1, shift_schedule[t], num_classes,
                  tokens_per_sample, input_dim, train_size, test_size)
        for t in range(num_tasks)
    ]


# ---------------------------------------------------------------------------
# binary container

_HEADER = struct.Struct("<4sIIIIIIIIff")


def save_dataset(handle: DatasetHandle, path) -> None:
    spec = handle.spec
    body = bytearray()
    body += _HEADER.pack(
        DATASET_MAGIC, DATASET_VERSION, spec.task_id, spec.seed,
        spec.num_classes, spec.tokens_per_sample, spec.input_dim,
        spec.train_size, spec.test_size, spec.angle, spec.noise_scale,
    )[4:]  # magic written separately so the crc covers everything after it
    body += handle.train_inputs.astype("<f4", copy=False).tobytes()
    body += handle.train_labels.astype("<i4", copy=False).tobytes()
    body += handle.test_inputs.astype("<f4", copy=False).tobytes()
    body += handle.test_labels.astype("<i4", copy=False).tobytes()
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(bytes(body))
        fh.write(struct.pack("<I", crc))


def load_dataset(path) -> DatasetHandle:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic bytes")
    if len(blob) < _HEADER.size + 4:
        raise DatasetFormatError(f"{path}: truncated header")
    (_, version, task_id, seed, num_classes, tokens, dim,
     n_train, n_test, angle, noise) = _HEADER.unpack(blob[:_HEADER.size])
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    f_train = n_train * tokens * dim * 4
    f_test = n_test * tokens * dim * 4
    expected = _HEADER.size + f_train + n_train * 4 + f_test + n_test * 4 + 4
    if len(blob) != expected:
        raise DatasetFormatError(
            f"{path}: truncated or oversized file ({len(blob)} bytes, expected {expected})"
        )
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    actual_crc = zlib.crc32(blob[4:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise DatasetFormatError(f"{path}: checksum mismatch")

    off = _HEADER.size

    def take(count, dtype, shape):
        nonlocal off
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off).reshape(shape)
        off += count * 4
        return np.ascontiguousarray(arr)

    train_x = take(n_train * tokens * dim, "<f4", (n_train, tokens, dim))
    train_y = take(n_train, "<i4", (n_train,))
    test_x = take(n_test * tokens * dim, "<f4", (n_test, tokens, dim))
    test_y = take(n_test, "<i4", (n_test,))
    for split, labels in (("train", train_y), ("test", test_y)):
        bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
        if bad.size:
            raise DatasetFormatError(
                f"{path}: {split} record {int(bad[0])} has label "
                f"{int(labels[bad[0]])} outside [0, {num_classes})"
            )
    spec = SyntheticTaskSpec(
        task_id=task_id, seed=seed, num_classes=num_classes,
        tokens_per_sample=tokens, input_dim=dim,
        angle=float(angle), noise_scale=float(noise),
        train_size=n_train, test_size=n_test,
    )
    return DatasetHandle(spec, train_x, train_y, test_x, test_y)
