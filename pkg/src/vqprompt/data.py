"""Deterministic synthetic class-incremental benchmark and dataset files.

Every class is an anchor token sequence drawn uniform in (-1, 1) plus
per-sample Gaussian noise. Pretraining classes are disjoint from the
continual ones; each class splits 80/20 into train/test. The whole
benchmark is a pure function of the generation seed.

Dataset file format, version 1 (all integers little-endian):

  offset  size  field
  0       4     magic ``VQPD``
  4       4     u32 version (= 1)
  8       4     u32 task id (0 = pretraining)
  12      1     u8 split (0 = train, 1 = test)
  13      4     u32 sample count n
  17      4     u32 tokens per sample
  21      4     u32 token width
  25      4n    u32 labels
  ...           f64 token values, n * tokens * width, row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ContractError, FormatError, ProtocolError

_MAGIC = b"VQPD"
_VERSION = 1
_SPLIT_CODES = {"train": 0, "test": 1}
_SPLIT_NAMES = {v: k for k, v in _SPLIT_CODES.items()}


@dataclass
class TaskDataset:
    """One split of one task: token sequences and their global labels."""

    task_id: int
    split: str
    tokens: np.ndarray   # (n, tokens_per_sample, token_dim) float64
    labels: np.ndarray   # (n,) uint32

    def __post_init__(self):
        if self.split not in _SPLIT_CODES:
            raise ContractError(f"split must be 'train' or 'test', got {self.split!r}")
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.uint32)
        if self.tokens.ndim != 3 or self.tokens.shape[0] != self.labels.shape[0]:
            raise ContractError(
                f"tokens {self.tokens.shape} inconsistent with "
                f"{self.labels.shape[0]} labels"
            )

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels.astype(np.int64))


class TaskSplits(NamedTuple):
    train: TaskDataset
    test: TaskDataset


@dataclass
class TaskSequence:
    """Ordered tasks with mutually disjoint label sets."""

    tasks: list[TaskSplits]
    seed: int | None = None

    def __post_init__(self):
        validate_disjoint([split.train for split in self.tasks])

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def all_classes(self) -> np.ndarray:
        return np.unique(
            np.concatenate([t.train.classes for t in self.tasks])
        )

    @property
    def num_classes(self) -> int:
        return int(self.all_classes.size)

    def task_classes(self, index: int) -> list[int]:
        return [int(c) for c in self.tasks[index].train.classes]


def validate_disjoint(datasets) -> None:
    """Raise unless every pair of label sets is disjoint."""
    seen: dict[int, int] = {}
    for pos, ds in enumerate(datasets):
        for c in ds.classes:
            c = int(c)
            if c in seen:
                raise ProtocolError(
                    f"class {c} appears in datasets {seen[c]} and {pos}; "
                    f"task label sets must be mutually disjoint"
                )
            seen[c] = pos


def generate_benchmark(
    seed: int,
    tasks: int = 5,
    classes_per_task: int = 2,
    samples_per_class: int = 100,
    noise_scale: float = 0.5,
    *,
    pretrain_classes: int = 10,
    pretrain_samples_per_class: int = 200,
    tokens_per_sample: int = 16,
    token_dim: int = 32,
) -> tuple[TaskSplits, TaskSequence]:
    """Build the pretraining split pair and the continual task sequence."""
    if tasks < 1:
        raise ContractError(f"need at least 1 task, got {tasks}")
    if classes_per_task < 2:
        raise ContractError(f"need >= 2 classes per task, got {classes_per_task}")
    if samples_per_class < 1 or pretrain_samples_per_class < 1:
        raise ContractError("samples per class must be positive")
    if pretrain_classes < 2:
        raise ContractError(f"need >= 2 pretraining classes, got {pretrain_classes}")
    if noise_scale < 0:
        raise ContractError(f"noise scale must be nonnegative, got {noise_scale}")

    rng = np.random.default_rng(seed)
    n_continual = tasks * classes_per_task
    continual_anchors = rng.uniform(
        -1.0, 1.0, size=(n_continual, tokens_per_sample, token_dim)
    )
    pretrain_anchors = rng.uniform(
        -1.0, 1.0, size=(pretrain_classes, tokens_per_sample, token_dim)
    )

    def _class_samples(anchor, count):
        noise = rng.standard_normal((count, tokens_per_sample, token_dim))
        return anchor[None, :, :] + noise_scale * noise

    def _build(task_id, class_ids, anchors, count):
        n_train = int(count * 0.8)
        train_tokens, train_labels, test_tokens, test_labels = [], [], [], []
        for cls, anchor in zip(class_ids, anchors):
            samples = _class_samples(anchor, count)
            train_tokens.append(samples[:n_train])
            test_tokens.append(samples[n_train:])
            train_labels.append(np.full(n_train, cls, dtype=np.uint32))
            test_labels.append(np.full(count - n_train, cls, dtype=np.uint32))
        return TaskSplits(
            TaskDataset(task_id, "train",
                        np.concatenate(train_tokens), np.concatenate(train_labels)),
            TaskDataset(task_id, "test",
                        np.concatenate(test_tokens), np.concatenate(test_labels)),
        )

    task_list = []
    for t in range(tasks):
        ids = range(t * classes_per_task, (t + 1) * classes_per_task)
        anchors = continual_anchors[t * classes_per_task:(t + 1) * classes_per_task]
        task_list.append(_build(t + 1, ids, anchors, samples_per_class))

    pretrain_ids = range(n_continual, n_continual + pretrain_classes)
    pretrain = _build(0, pretrain_ids, pretrain_anchors, pretrain_samples_per_class)

    sequence = TaskSequence(task_list, seed=seed)
    validate_disjoint([pretrain.train] + [t.train for t in task_list])
    return pretrain, sequence


# ---------------------------------------------------------------------------
# binary dataset files
# ---------------------------------------------------------------------------

def write_dataset(path, dataset: TaskDataset) -> None:
    n, n_tokens, width = dataset.tokens.shape
    header = struct.pack(
        "<4sIIBIII",
        _MAGIC,
        _VERSION,
        dataset.task_id,
        _SPLIT_CODES[dataset.split],
        n,
        n_tokens,
        width,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dataset.labels.astype("<u4").tobytes())
        fh.write(dataset.tokens.astype("<f8").tobytes())


def read_dataset(path) -> TaskDataset:
    raw = Path(path).read_bytes()

    def _need(offset, count, what):
        if offset + count > len(raw):
            raise FormatError(
                f"{path}: truncated while reading {what} at byte offset {offset}"
            )

    _need(0, 25, "header")
    magic = raw[0:4]
    if magic != _MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte offset 0")
    version, task_id, split_code, n, n_tokens, width = struct.unpack_from(
        "<IIBIII", raw, 4
    )
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte offset 4")
    if split_code not in _SPLIT_NAMES:
        raise FormatError(f"{path}: bad split code {split_code} at byte offset 12")
    offset = 25
    label_bytes = 4 * n
    _need(offset, label_bytes, "labels")
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=offset).copy()
    offset += label_bytes
    token_count = n * n_tokens * width
    _need(offset, 8 * token_count, "token values")
    tokens = (
        np.frombuffer(raw, dtype="<f8", count=token_count, offset=offset)
        .copy()
        .reshape(n, n_tokens, width)
    )
    offset += 8 * token_count
    if offset != len(raw):
        raise FormatError(
            f"{path}: {len(raw) - offset} unexpected trailing bytes at "
            f"byte offset {offset}"
        )
    return TaskDataset(task_id, _SPLIT_NAMES[split_code], tokens, labels)


# ---------------------------------------------------------------------------
# benchmark directory layout
# ---------------------------------------------------------------------------

def write_benchmark(directory, pretrain: TaskSplits, sequence: TaskSequence) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_dataset(directory / "pretrain_train.bin", pretrain.train)
    write_dataset(directory / "pretrain_test.bin", pretrain.test)
    for i, task in enumerate(sequence.tasks, start=1):
        write_dataset(directory / f"task_{i:02d}_train.bin", task.train)
        write_dataset(directory / f"task_{i:02d}_test.bin", task.test)
    lines = [_manifest_line("pretrain", pretrain)]
    lines += [
        _manifest_line(f"task {i}", task)
        for i, task in enumerate(sequence.tasks, start=1)
    ]
    (directory / "manifest.txt").write_text("".join(line + "\n" for line in lines))


def _manifest_line(name: str, splits: TaskSplits) -> str:
    classes = splits.train.classes
    return (
        f"{name}: id={splits.train.task_id} "
        f"classes={classes.min()}-{classes.max()} "
        f"train={len(splits.train)} test={len(splits.test)}"
    )


def read_benchmark(directory) -> tuple[TaskSplits, TaskSequence]:
    directory = Path(directory)
    pretrain = TaskSplits(
        read_dataset(directory / "pretrain_train.bin"),
        read_dataset(directory / "pretrain_test.bin"),
    )
    tasks = []
    index = 1
    while (directory / f"task_{index:02d}_train.bin").exists():
        tasks.append(
            TaskSplits(
                read_dataset(directory / f"task_{index:02d}_train.bin"),
                read_dataset(directory / f"task_{index:02d}_test.bin"),
            )
        )
        index += 1
    if not tasks:
        raise FormatError(f"{directory}: no task files found")
    return pretrain, TaskSequence(tasks)
