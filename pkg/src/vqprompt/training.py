"""Class-incremental training over a frozen backbone.

Per task: prompts, keys and classifier train with the composite loss
(masked cross-entropy restricted to the current task's classes, plus the
quantization and commitment terms in ``vq`` mode). After each task,
per-class feature statistics are collected and, when enabled, the
classifier is re-balanced on pseudo features sampled from those
statistics; evaluation then covers every seen task with all seen classes
as candidates.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import Backbone
from .data import TaskDataset, TaskSequence, validate_disjoint
from .errors import ContractError, DataError, ProtocolError
from .metrics import AccuracyMatrix, caa, faa, write_matrix_csv, write_metrics_csv
from .optim import AdamW, cosine_rate
from .prompting import (
    LossWeights,
    PromptPool,
    compute_query,
    select_prompt_batch,
    total_loss,
)
from .tensor import (
    Tensor,
    add_rowvec,
    cross_entropy_masked,
    matmul,
    no_grad,
    transpose_last,
)

MODES = ("vq", "soft", "none")
VARIANCE_FLOOR = 1e-6


@dataclass
class TrainConfig:
    seed: int
    mode: str = "vq"
    calibrate: bool = True
    learning_rate: float = 0.0025
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    epochs: int = 20
    batch_size: int = 16
    calibration_epochs: int = 10
    calibration_lr: float = 0.01
    calibration_batch_size: int = 64
    pseudo_per_class: int = 64
    temperature: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.temperature <= 0:
            raise ContractError(f"temperature must be positive, got {self.temperature}")
        if self.batch_size < 1 or self.calibration_batch_size < 1:
            raise ContractError("batch sizes must be positive")


class ClassifierHead:
    """Single global linear head; rows for unseen classes stay untrained."""

    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = weight
        self.bias = bias

    @classmethod
    def build(cls, num_classes: int, dim: int, rng: np.random.Generator) -> "ClassifierHead":
        bound = 1.0 / np.sqrt(dim)
        weight = Tensor(
            rng.uniform(-bound, bound, size=(num_classes, dim)), requires_grad=True
        )
        bias = Tensor(np.zeros(num_classes), requires_grad=True)
        return cls(weight, bias)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def logits(self, features: Tensor) -> Tensor:
        return add_rowvec(matmul(features, transpose_last(self.weight)), self.bias)

    def raw_logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weight.data.T + self.bias.data

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def checksum(self) -> str:
        digest = hashlib.sha256()
        digest.update(self.weight.data.tobytes())
        digest.update(self.bias.data.tobytes())
        return digest.hexdigest()


class ClassStatistics:
    """Per-class diagonal Gaussian fit of prompted features."""

    def __init__(self):
        self._by_class: dict[int, tuple[np.ndarray, np.ndarray, int]] = {}

    def add_class(self, cls: int, mean: np.ndarray, variance: np.ndarray, count: int) -> None:
        cls = int(cls)
        if cls in self._by_class:
            raise ProtocolError(
                f"statistics for class {cls} already collected; past-task "
                f"features are unavailable and are never recomputed"
            )
        self._by_class[cls] = (mean, variance, count)

    def classes(self) -> list[int]:
        return sorted(self._by_class)

    def get(self, cls: int) -> tuple[np.ndarray, np.ndarray, int]:
        return self._by_class[int(cls)]

    def __len__(self) -> int:
        return len(self._by_class)


@dataclass
class ContinualState:
    backbone: Backbone
    pool: PromptPool | None
    head: ClassifierHead
    stats: ClassStatistics


def _prompt_map(backbone: Backbone, prompt_batch: Tensor) -> dict[int, Tensor]:
    # one shared selection feeds every prompt-receiving block
    return {block: prompt_batch for block in backbone.config.prompt_blocks}


def encode_with_prompts(state: ContinualState, tokens: np.ndarray, mode: str,
                        temperature: float, queries: np.ndarray | None = None):
    """Feature batch through the mode's prompting path (graph-recorded).

    Returns (features, selection); selection is None in ``none`` mode.
    ``queries`` may carry precomputed query features for the batch; they
    are a pure function of the frozen backbone and the tokens, so callers
    looping over epochs compute them once.
    """
    if mode == "none" or state.pool is None:
        return state.backbone.encode(tokens), None
    if queries is None:
        queries = compute_query(tokens, state.backbone).data
    selection = select_prompt_batch(
        state.pool, queries, temperature, quantize=(mode == "vq")
    )
    prompt_batch = selection.quantized if mode == "vq" else selection.continuous
    features = state.backbone.encode(
        tokens, _prompt_map(state.backbone, prompt_batch)
    )
    return features, selection


def train_task(
    state: ContinualState,
    dataset: TaskDataset,
    config: TrainConfig,
    rng: np.random.Generator,
    task_classes=None,
) -> list[dict]:
    """One task's optimization; returns per-epoch mean loss components."""
    if not state.backbone.frozen:
        raise ContractError("train_task requires a frozen backbone")
    if task_classes is None:
        task_classes = [int(c) for c in dataset.classes]
    task_classes = sorted(int(c) for c in task_classes)
    labels = dataset.labels.astype(np.int64)
    outside = set(labels.tolist()) - set(task_classes)
    if outside:
        raise DataError(
            f"dataset labels {sorted(outside)} outside task classes {task_classes}"
        )

    params: list[Tensor] = []
    if config.mode in ("vq", "soft"):
        params += state.pool.parameters()
    params += state.head.parameters()
    optimizer = AdamW(
        params,
        lr=config.learning_rate,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )

    n = len(dataset)
    task_queries = None
    if config.mode != "none":
        task_queries = compute_query(dataset.tokens, state.backbone).data
    batches_per_epoch = max(1, (n + config.batch_size - 1) // config.batch_size)
    total_steps = config.epochs * batches_per_epoch
    trace = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        sums = {"ce": 0.0, "vq": 0.0, "commit": 0.0, "total": 0.0}
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            tokens = dataset.tokens[idx]
            features, selection = encode_with_prompts(
                state, tokens, config.mode, config.temperature,
                queries=None if task_queries is None else task_queries[idx],
            )
            logits = state.head.logits(features)
            ce = cross_entropy_masked(logits, labels[idx], task_classes)
            if config.mode == "vq":
                quant = selection.mean_vq_loss()
                commit = selection.mean_commitment_loss()
                loss = total_loss(ce, quant, commit, config.weights)
                sums["vq"] += quant.item() * len(idx)
                sums["commit"] += commit.item() * len(idx)
            else:
                loss = ce
            loss.backward()
            optimizer.step(lr=cosine_rate(step, total_steps, config.learning_rate))
            step += 1
            sums["ce"] += ce.item() * len(idx)
            sums["total"] += loss.item() * len(idx)
        trace.append(
            {"epoch": epoch, **{k: v / n for k, v in sums.items()}}
        )
    return trace


def collect_class_statistics(
    state: ContinualState, dataset: TaskDataset, config: TrainConfig
) -> list[int]:
    """Fit a floored diagonal Gaussian per new class; returns added classes."""
    with no_grad():
        features, _ = encode_with_prompts(
            state, dataset.tokens, config.mode, config.temperature
        )
    features = features.data
    labels = dataset.labels.astype(np.int64)
    added = []
    for cls in np.unique(labels):
        rows = features[labels == cls]
        if rows.shape[0] < 2:
            warnings.warn(
                f"class {int(cls)} has {rows.shape[0]} sample(s); "
                f"variance floored at {VARIANCE_FLOOR}"
            )
        mean = rows.mean(axis=0)
        variance = np.maximum(rows.var(axis=0), VARIANCE_FLOOR)
        state.stats.add_class(int(cls), mean, variance, rows.shape[0])
        added.append(int(cls))
    return added


def sample_pseudo_features(
    stats: ClassStatistics, per_class: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``per_class`` vectors from each class Gaussian, class-blocked."""
    if per_class <= 0:
        raise ContractError(f"per_class must be positive, got {per_class}")
    classes = stats.classes()
    if not classes:
        raise ContractError("sample_pseudo_features: no statistics collected")
    rng = np.random.default_rng(seed)
    feats, labels = [], []
    for cls in classes:
        mean, variance, _ = stats.get(cls)
        draws = mean + np.sqrt(variance) * rng.standard_normal(
            (per_class, mean.shape[0])
        )
        feats.append(draws)
        labels.append(np.full(per_class, cls, dtype=np.int64))
    return np.concatenate(feats), np.concatenate(labels)


def calibrate_classifier(
    head: ClassifierHead, stats: ClassStatistics, config: TrainConfig, seed: int
) -> None:
    """Re-balance the head on pseudo features of every seen class.

    Touches only the head parameters; zero calibration epochs is a no-op.
    """
    if config.calibration_epochs <= 0:
        return
    classes = stats.classes()
    if not classes:
        raise ContractError("calibrate_classifier: no statistics collected")
    n_classes = len(classes)
    per_class = config.pseudo_per_class
    seed_rng = np.random.default_rng(seed)
    optimizer = AdamW(
        head.parameters(),
        lr=config.calibration_lr,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )
    samples_per_epoch = n_classes * per_class
    batches_per_epoch = max(
        1, (samples_per_epoch + config.calibration_batch_size - 1)
        // config.calibration_batch_size
    )
    total_steps = config.calibration_epochs * batches_per_epoch
    step = 0
    for _ in range(config.calibration_epochs):
        feats, labels = sample_pseudo_features(
            stats, per_class, int(seed_rng.integers(0, 2**63 - 1))
        )
        # interleave classes so every batch stays balanced
        order = (
            np.arange(samples_per_epoch)
            .reshape(n_classes, per_class)
            .T.reshape(-1)
        )
        feats, labels = feats[order], labels[order]
        for start in range(0, samples_per_epoch, config.calibration_batch_size):
            idx = slice(start, start + config.calibration_batch_size)
            logits = head.logits(Tensor(feats[idx]))
            loss = cross_entropy_masked(logits, labels[idx], classes)
            loss.backward()
            optimizer.step(
                lr=cosine_rate(step, total_steps, config.calibration_lr)
            )
            step += 1


def evaluate_split(
    state: ContinualState,
    test_sets: list[TaskDataset],
    seen_classes,
    config: TrainConfig,
) -> list[float]:
    """Top-1 accuracy per test set with every seen class as a candidate."""
    seen = sorted(int(c) for c in seen_classes)
    if not seen:
        raise ContractError("evaluate_split: empty candidate class set")
    accuracies = []
    for dataset in test_sets:
        if len(dataset) == 0:
            raise ContractError(
                f"evaluate_split: empty test set for task {dataset.task_id}"
            )
        with no_grad():
            features, _ = encode_with_prompts(
                state, dataset.tokens, config.mode, config.temperature
            )
        logits = state.head.raw_logits(features.data)
        masked = np.full_like(logits, -np.inf)
        masked[:, seen] = logits[:, seen]
        predicted = np.argmax(masked, axis=1)
        accuracies.append(float(np.mean(predicted == dataset.labels.astype(np.int64))))
    return accuracies


@dataclass
class RunResult:
    matrix: AccuracyMatrix
    loss_traces: list[list[dict]]
    state: ContinualState

    @property
    def faa(self) -> float:
        return faa(self.matrix)

    @property
    def caa(self) -> float:
        return caa(self.matrix)


def run_continual(
    backbone: Backbone,
    sequence: TaskSequence,
    config: TrainConfig,
    *,
    pool_size: int = 10,
    prompt_length: int = 8,
    out_dir=None,
) -> RunResult:
    """Full continual protocol: train, collect, calibrate, evaluate per task."""
    if not backbone.frozen:
        raise ContractError("run_continual requires a frozen backbone")
    validate_disjoint([t.train for t in sequence.tasks])
    frozen_before = backbone.checksum()

    rng = np.random.default_rng(config.seed)
    pool = None
    if config.mode in ("vq", "soft"):
        pool = PromptPool.build(
            pool_size, prompt_length, backbone.config.embed_dim, rng
        )
    num_classes = int(sequence.all_classes.max()) + 1
    head = ClassifierHead.build(num_classes, backbone.config.embed_dim, rng)
    state = ContinualState(backbone, pool, head, ClassStatistics())

    matrix = AccuracyMatrix(sequence.num_tasks)
    traces = []
    seen: list[int] = []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "checkpoints").mkdir(exist_ok=True)

    for t, task in enumerate(sequence.tasks):
        trace = train_task(
            state, task.train, config, rng, task_classes=sequence.task_classes(t)
        )
        traces.append(trace)
        collect_class_statistics(state, task.train, config)
        seen += sequence.task_classes(t)
        if config.calibrate:
            calibrate_classifier(
                state.head, state.stats, config,
                seed=int(rng.integers(0, 2**63 - 1)),
            )
        column = evaluate_split(
            state, [earlier.test for earlier in sequence.tasks[: t + 1]],
            seen, config,
        )
        for i, acc in enumerate(column):
            matrix.set_entry(i, t, acc)
        if out_dir is not None:
            _write_task_artifacts(out_dir, t, state, trace)

    if backbone.checksum() != frozen_before:
        raise ProtocolError("frozen backbone parameters changed during the run")

    if out_dir is not None:
        write_matrix_csv(out_dir / "accuracy_matrix.csv", matrix)
        write_metrics_csv(out_dir / "metrics.csv", matrix)
        _write_forgetting_csv(out_dir / "forgetting.csv", matrix)

    return RunResult(matrix, traces, state)


def _write_task_artifacts(out_dir: Path, task_index: int, state: ContinualState,
                          trace: list[dict]) -> None:
    from .checkpoint import save_backbone  # deferred: checkpoint imports backbone

    loss_path = out_dir / f"losses_task_{task_index + 1:02d}.csv"
    with open(loss_path, "w") as fh:
        fh.write("epoch,ce,vq,commit,total\n")
        for row in trace:
            fh.write(
                f"{row['epoch']},{row['ce']!r},{row['vq']!r},"
                f"{row['commit']!r},{row['total']!r}\n"
            )
    extra_header = {}
    extra_blobs = [
        ("head.weight", state.head.weight.data),
        ("head.bias", state.head.bias.data),
    ]
    if state.pool is not None:
        extra_header.update(
            {"pool_size": state.pool.size, "prompt_length": state.pool.length}
        )
        extra_blobs = [
            ("prompt.P", state.pool.prompts.data),
            ("prompt.K", state.pool.keys.data),
        ] + extra_blobs
    save_backbone(
        out_dir / "checkpoints" / f"task_{task_index + 1:02d}.ckpt",
        state.backbone,
        extra_header=extra_header,
        extra_blobs=extra_blobs,
    )


def _write_forgetting_csv(path, matrix: AccuracyMatrix) -> None:
    with open(path, "w") as fh:
        fh.write("task,after_task,accuracy\n")
        for j in range(matrix.num_tasks):
            for i in range(j + 1):
                fh.write(f"{i + 1},{j + 1},{matrix.entry(i, j)!r}\n")
