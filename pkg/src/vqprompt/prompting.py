"""Discrete prompt selection over a learnable codebook.

Pipeline per input: a frozen query feature scores every pool key, the
scores form a convex combination of pool elements (the continuous
prompt), and a nearest-neighbour lookup snaps that combination to one
codebook element. The lookup itself has no gradient, so the quantized
prompt is wired with a straight-through connector that routes the
downstream gradient entirely to the continuous prompt; two asymmetric
regularizers then shape the codebook:

* the quantization term pulls the selected element toward the (gradient
  blocked) continuous prompt,
* the commitment term pulls the continuous prompt toward the (gradient
  blocked) selected element.

Both are squared L2 over all prompt entries, matching the flattened
distance the lookup minimizes.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .backbone import Backbone
from .errors import ContractError, DimensionError
from .tensor import (
    Tensor,
    add,
    index_select,
    matmul,
    no_grad,
    reshape,
    scale,
    select,
    softmax,
    stop_gradient,
    straight_through,
    sub,
    sum_squares,
    transpose_last,
)


@dataclass
class LossWeights:
    lambda_q: float = 0.4
    lambda_c: float = 0.1

    def __post_init__(self):
        if self.lambda_q < 0 or self.lambda_c < 0:
            raise ContractError(
                f"loss weights must be nonnegative, got "
                f"lambda_q={self.lambda_q}, lambda_c={self.lambda_c}"
            )


class PromptPool:
    """Codebook of ``size`` prompts (each ``length x dim``) plus their keys.

    Both tensors are trainable during continual learning; the shapes are
    fixed for the whole run. The prompt length must be even so a prompt
    can split into key/value halves for prefix injection.
    """

    def __init__(self, prompts: Tensor, keys: Tensor):
        if prompts.ndim != 3:
            raise DimensionError(f"prompt pool must be 3-D, got {prompts.shape}")
        if keys.ndim != 2 or keys.shape[0] != prompts.shape[0] \
                or keys.shape[1] != prompts.shape[2]:
            raise DimensionError(
                f"keys {keys.shape} incompatible with pool {prompts.shape}"
            )
        if prompts.shape[1] % 2 != 0:
            raise ContractError(
                f"prompt length must be even, got {prompts.shape[1]}"
            )
        self.prompts = prompts
        self.keys = keys

    @classmethod
    def build(cls, size: int, length: int, dim: int, rng: np.random.Generator) -> "PromptPool":
        bound = 1.0 / math.sqrt(dim)
        prompts = Tensor(
            rng.uniform(-bound, bound, size=(size, length, dim)), requires_grad=True
        )
        keys = Tensor(
            rng.uniform(-bound, bound, size=(size, dim)), requires_grad=True
        )
        return cls(prompts, keys)

    @property
    def size(self) -> int:
        return self.prompts.shape[0]

    @property
    def length(self) -> int:
        return self.prompts.shape[1]

    @property
    def dim(self) -> int:
        return self.prompts.shape[2]

    def element(self, index: int) -> Tensor:
        """Graph view of one codebook element; gradients scatter back into it."""
        if not 0 <= index < self.size:
            raise ContractError(f"pool index {index} outside 0..{self.size - 1}")
        return select(self.prompts, 0, index)

    def parameters(self) -> list[Tensor]:
        return [self.prompts, self.keys]

    def checksum(self) -> str:
        digest = hashlib.sha256()
        digest.update(self.prompts.data.tobytes())
        digest.update(self.keys.data.tobytes())
        return digest.hexdigest()


@dataclass
class PromptSelection:
    """Everything one input's selection produced, for loss wiring."""

    scores: Tensor                 # (pool size,) on the simplex
    continuous: Tensor             # (length, dim) convex combination
    quantized: Tensor | None       # straight-through wired codebook element
    index: int | None              # argmin codebook index
    codebook_row: Tensor | None    # raw graph view of that element


def compute_query(tokens, backbone: Backbone) -> Tensor:
    """Frozen-backbone class feature used to score the pool keys.

    The result is a constant: no gradient flows into the backbone.
    """
    if not backbone.frozen:
        raise ContractError("compute_query requires a frozen backbone")
    with no_grad():
        return backbone.encode(tokens)


def similarity_scores(pool: PromptPool, query: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax over key/query inner products, sharpened by ``temperature``."""
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    if query.shape != (pool.dim,):
        raise DimensionError(
            f"query shape {query.shape} does not match key width {pool.dim}"
        )
    logits = matmul(pool.keys, query)
    if temperature != 1.0:
        logits = scale(logits, 1.0 / temperature)
    return softmax(logits, axis=-1)


def aggregate_prompt(pool: PromptPool, scores: Tensor) -> Tensor:
    """Convex combination of pool elements weighted by ``scores``."""
    if scores.shape != (pool.size,):
        raise DimensionError(
            f"scores shape {scores.shape} does not match pool size {pool.size}"
        )
    flat = reshape(pool.prompts, (pool.size, pool.length * pool.dim))
    return reshape(matmul(scores, flat), (pool.length, pool.dim))


def quantize_prompt(pool: PromptPool, continuous: Tensor) -> tuple[Tensor, int]:
    """Snap to the nearest codebook element (flattened L2, ties to lowest index).

    The returned prompt equals the codebook element bit-for-bit and is
    wired so that downstream gradients route entirely to ``continuous``.
    """
    if continuous.shape != (pool.length, pool.dim):
        raise DimensionError(
            f"continuous prompt {continuous.shape} does not match pool "
            f"element shape ({pool.length}, {pool.dim})"
        )
    diffs = pool.prompts.data.reshape(pool.size, -1) - continuous.data.reshape(1, -1)
    distances = np.einsum("ij,ij->i", diffs, diffs)
    index = int(np.argmin(distances))
    quantized = straight_through(pool.element(index), continuous)
    return quantized, index


def vq_loss(continuous: Tensor, codebook_row: Tensor) -> Tensor:
    """Squared distance pulling the codebook row toward the frozen prompt.

    Pass the *raw* codebook element (``pool.element(k)``), not the
    straight-through output: the gradient must reach only the codebook.
    """
    if continuous.shape != codebook_row.shape:
        raise DimensionError(
            f"vq_loss: shapes {continuous.shape} and {codebook_row.shape} differ"
        )
    return sum_squares(sub(stop_gradient(continuous), codebook_row))


def commitment_loss(continuous: Tensor, codebook_row: Tensor) -> Tensor:
    """Squared distance pulling the continuous prompt toward the frozen row."""
    if continuous.shape != codebook_row.shape:
        raise DimensionError(
            f"commitment_loss: shapes {continuous.shape} and "
            f"{codebook_row.shape} differ"
        )
    return sum_squares(sub(continuous, stop_gradient(codebook_row)))


def total_loss(ce: Tensor, vq: Tensor, commit: Tensor, weights: LossWeights) -> Tensor:
    """Task loss plus weighted quantization and commitment terms."""
    return add(ce, add(scale(vq, weights.lambda_q), scale(commit, weights.lambda_c)))


def soft_prompt_forward(pool: PromptPool, query: Tensor, temperature: float) -> Tensor:
    """Continuous prompt used directly, skipping quantization entirely."""
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    return aggregate_prompt(pool, similarity_scores(pool, query, temperature))


def select_prompt(
    pool: PromptPool,
    query: Tensor,
    temperature: float = 1.0,
    quantize: bool = True,
) -> PromptSelection:
    """Run the full selection pipeline for one query."""
    scores = similarity_scores(pool, query, temperature)
    continuous = aggregate_prompt(pool, scores)
    if not quantize:
        return PromptSelection(scores, continuous, None, None, None)
    quantized, index = quantize_prompt(pool, continuous)
    return PromptSelection(scores, continuous, quantized, index, pool.element(index))


# ---------------------------------------------------------------------------
# batched selection: the hot path used by the training loop. One graph for
# the whole batch instead of per-sample subgraphs; math identical to the
# per-sample functions above (verified by parity tests).
# ---------------------------------------------------------------------------

@dataclass
class BatchSelection:
    """Batch counterpart of ``PromptSelection`` (leading batch axis)."""

    scores: Tensor                  # (batch, pool size)
    continuous: Tensor              # (batch, length, dim)
    quantized: Tensor | None        # (batch, length, dim), straight-through wired
    indices: np.ndarray | None      # (batch,) argmin codebook indices
    codebook_rows: Tensor | None    # raw gathered rows; gradients scatter to pool

    def mean_vq_loss(self) -> Tensor:
        """Batch mean of the per-sample quantization terms."""
        diff = sub(stop_gradient(self.continuous), self.codebook_rows)
        return scale(sum_squares(diff), 1.0 / self.scores.shape[0])

    def mean_commitment_loss(self) -> Tensor:
        """Batch mean of the per-sample commitment terms."""
        diff = sub(self.continuous, stop_gradient(self.codebook_rows))
        return scale(sum_squares(diff), 1.0 / self.scores.shape[0])


def select_prompt_batch(
    pool: PromptPool,
    queries: np.ndarray,
    temperature: float = 1.0,
    quantize: bool = True,
) -> BatchSelection:
    """Selection pipeline for a batch of (constant) query features."""
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != pool.dim:
        raise DimensionError(
            f"queries {queries.shape} do not match key width {pool.dim}"
        )
    batch = queries.shape[0]
    logits = matmul(Tensor(queries), transpose_last(pool.keys))
    if temperature != 1.0:
        logits = scale(logits, 1.0 / temperature)
    scores = softmax(logits, axis=-1)
    flat = reshape(pool.prompts, (pool.size, pool.length * pool.dim))
    continuous = reshape(matmul(scores, flat), (batch, pool.length, pool.dim))
    if not quantize:
        return BatchSelection(scores, continuous, None, None, None)
    diffs = pool.prompts.data.reshape(1, pool.size, -1) \
        - continuous.data.reshape(batch, 1, -1)
    distances = np.einsum("bnd,bnd->bn", diffs, diffs)
    indices = np.argmin(distances, axis=1)
    rows = reshape(index_select(flat, indices), (batch, pool.length, pool.dim))
    quantized = straight_through(rows, continuous)
    return BatchSelection(scores, continuous, quantized, indices, rows)
