"""A small transformer encoder with class token and prefix-injection points.

The backbone is trained once on held-out pretraining classes, then frozen:
during continual learning it only ever runs forward, and a checksum over
its parameters must be identical before and after a full run.

Architecture notes (documented choices, all desk-scale):
  * pre-norm blocks: ``h + MSA(LN(h))`` then ``h + FFN(LN(h))``, no final
    layer norm;
  * attention and feed-forward projections carry no bias terms;
  * feed-forward nonlinearity is tanh;
  * attention logits are scaled by ``1/sqrt(head_dim)``;
  * weights initialize uniform in ``(-1/sqrt(fan_in), +1/sqrt(fan_in))``.

Prefixes join an attention call after the block's layer norm: the prompt
is split along its sequence axis into key and value halves which are
prepended to the attention keys and values only, so the output keeps the
input's sequence length.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import (
    Tensor,
    add,
    add_rowvec,
    concat,
    cross_entropy_masked,
    expand_batch,
    layer_norm,
    matmul,
    no_grad,
    scale,
    select,
    slice_axis,
    softmax,
    tanh,
    transpose_last,
)
from .optim import AdamW, cosine_rate


@dataclass
class BackboneConfig:
    depth: int = 4
    embed_dim: int = 64
    heads: int = 4
    seq_len: int = 17        # content tokens + class token
    ff_dim: int = 128
    token_dim: int = 32
    prompt_blocks: tuple[int, ...] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.prompt_blocks is None:
            # first five blocks for deep stacks, every block for shallow ones
            if self.depth >= 5:
                self.prompt_blocks = tuple(range(5))
            else:
                self.prompt_blocks = tuple(range(self.depth))
        else:
            self.prompt_blocks = tuple(int(b) for b in self.prompt_blocks)
        if self.embed_dim % self.heads != 0:
            raise DimensionError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if self.depth < 1 or self.seq_len < 2:
            raise ContractError(
                f"backbone needs depth >= 1 and seq_len >= 2, "
                f"got depth={self.depth}, seq_len={self.seq_len}"
            )
        bad = [b for b in self.prompt_blocks if not 0 <= b < self.depth]
        if bad:
            raise ContractError(
                f"prompt_blocks {bad} outside valid range 0..{self.depth - 1}"
            )


def _uniform_param(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class AttentionBlockParams:
    """Projections and norms of one attention block, head-partitioned."""

    def __init__(self, rng: np.random.Generator, embed_dim: int, ff_dim: int):
        self.ln1_gain = Tensor(np.ones(embed_dim), requires_grad=True)
        self.ln1_offset = Tensor(np.zeros(embed_dim), requires_grad=True)
        self.w_query = _uniform_param(rng, (embed_dim, embed_dim), embed_dim)
        self.w_key = _uniform_param(rng, (embed_dim, embed_dim), embed_dim)
        self.w_value = _uniform_param(rng, (embed_dim, embed_dim), embed_dim)
        self.w_out = _uniform_param(rng, (embed_dim, embed_dim), embed_dim)
        self.ln2_gain = Tensor(np.ones(embed_dim), requires_grad=True)
        self.ln2_offset = Tensor(np.zeros(embed_dim), requires_grad=True)
        self.ff_in = _uniform_param(rng, (embed_dim, ff_dim), embed_dim)
        self.ff_out = _uniform_param(rng, (ff_dim, embed_dim), ff_dim)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.ln1.gain", self.ln1_gain
        yield f"{prefix}.ln1.offset", self.ln1_offset
        yield f"{prefix}.w_query", self.w_query
        yield f"{prefix}.w_key", self.w_key
        yield f"{prefix}.w_value", self.w_value
        yield f"{prefix}.w_out", self.w_out
        yield f"{prefix}.ln2.gain", self.ln2_gain
        yield f"{prefix}.ln2.offset", self.ln2_offset
        yield f"{prefix}.ff_in", self.ff_in
        yield f"{prefix}.ff_out", self.ff_out


def msa_forward(
    h_query: Tensor, h_key: Tensor, h_value: Tensor,
    params: AttentionBlockParams, heads: int,
) -> Tensor:
    """Multi-head scaled dot-product attention.

    Inputs are ``(..., length, dim)``; keys and values must share their
    sequence length, and the output keeps the query's.
    """
    dim = params.w_query.shape[0]
    for name, h in (("query", h_query), ("key", h_key), ("value", h_value)):
        if h.shape[-1] != dim:
            raise DimensionError(
                f"msa_forward: {name} embedding dim {h.shape[-1]} != {dim}"
            )
    if h_key.shape[-2] != h_value.shape[-2]:
        raise DimensionError(
            f"msa_forward: key length {h_key.shape[-2]} != value length "
            f"{h_value.shape[-2]}"
        )
    head_dim = dim // heads
    inv_sqrt = 1.0 / math.sqrt(head_dim)
    q = matmul(h_query, params.w_query)
    k = matmul(h_key, params.w_key)
    v = matmul(h_value, params.w_value)
    per_head = []
    for m in range(heads):
        lo, hi = m * head_dim, (m + 1) * head_dim
        q_m = slice_axis(q, -1, lo, hi)
        k_m = slice_axis(k, -1, lo, hi)
        v_m = slice_axis(v, -1, lo, hi)
        logits = scale(matmul(q_m, transpose_last(k_m)), inv_sqrt)
        weights = softmax(logits, axis=-1)
        per_head.append(matmul(weights, v_m))
    return matmul(concat(per_head, axis=-1), params.w_out)


def prefix_tuned_msa(
    prompt: Tensor, h: Tensor, params: AttentionBlockParams, heads: int
) -> Tensor:
    """Attention with the prompt's halves prepended to keys and values.

    The prompt splits along its sequence axis into equal key and value
    parts, so its length must be even; the output sequence length equals
    the input's. A zero-length prompt reduces to plain self-attention.
    """
    length = prompt.shape[-2]
    if length % 2 != 0:
        raise ContractError(f"prefix prompt length must be even, got {length}")
    if length == 0:
        return msa_forward(h, h, h, params, heads)
    if prompt.shape[-1] != h.shape[-1]:
        raise DimensionError(
            f"prefix_tuned_msa: prompt dim {prompt.shape[-1]} != input dim {h.shape[-1]}"
        )
    if prompt.ndim != h.ndim:
        raise DimensionError(
            f"prefix_tuned_msa: prompt ndim {prompt.ndim} != input ndim {h.ndim}"
        )
    half = length // 2
    key_part = slice_axis(prompt, -2, 0, half)
    value_part = slice_axis(prompt, -2, half, length)
    return msa_forward(
        h,
        concat([key_part, h], axis=-2),
        concat([value_part, h], axis=-2),
        params,
        heads,
    )


class Backbone:
    """Token embedding + class token + a stack of attention blocks."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        self.config = config
        self.frozen = False
        self.embed = _uniform_param(
            rng, (config.token_dim, config.embed_dim), config.token_dim
        )
        self.class_token = _uniform_param(rng, (1, config.embed_dim), config.embed_dim)
        self.blocks = [
            AttentionBlockParams(rng, config.embed_dim, config.ff_dim)
            for _ in range(config.depth)
        ]

    def named_parameters(self):
        yield "embed", self.embed
        yield "class_token", self.class_token
        for i, block in enumerate(self.blocks):
            yield from block.named_parameters(f"block{i}")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        self.frozen = True

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for _, p in self.named_parameters():
            digest.update(p.data.tobytes())
        return digest.hexdigest()

    def encode(self, tokens, prompts: dict[int, Tensor] | None = None) -> Tensor:
        """Class-token feature of a token sequence (or a batch of them).

        ``tokens`` is ``(seq_len - 1, token_dim)`` or batched with a
        leading axis. ``prompts`` maps block index to a prompt tensor;
        only blocks listed in ``config.prompt_blocks`` may appear.
        """
        cfg = self.config
        if prompts:
            invalid = [b for b in prompts if b not in cfg.prompt_blocks]
            if invalid:
                raise ContractError(
                    f"prompt supplied for non-prompt block(s) {sorted(invalid)}; "
                    f"allowed: {list(cfg.prompt_blocks)}"
                )
        if not isinstance(tokens, Tensor):
            tokens = Tensor(tokens)
        if tokens.ndim not in (2, 3):
            raise DimensionError(f"encode: tokens must be 2-D or 3-D, got {tokens.shape}")
        if tokens.shape[-2] != cfg.seq_len - 1 or tokens.shape[-1] != cfg.token_dim:
            raise DimensionError(
                f"encode: tokens {tokens.shape} incompatible with "
                f"{cfg.seq_len - 1} content tokens of width {cfg.token_dim}"
            )
        embedded = matmul(tokens, self.embed)
        if tokens.ndim == 3:
            cls = expand_batch(self.class_token, tokens.shape[0])
        else:
            cls = self.class_token
        h = concat([cls, embedded], axis=-2)
        ordered = sorted(prompts.items()) if prompts else ()
        prompt_map = dict(ordered)
        for i, block in enumerate(self.blocks):
            h = self._block_forward(h, block, prompt_map.get(i))
        return select(h, -2, 0)

    def _block_forward(
        self, h: Tensor, block: AttentionBlockParams, prompt: Tensor | None
    ) -> Tensor:
        normed = layer_norm(h, block.ln1_gain, block.ln1_offset)
        if prompt is None:
            attended = msa_forward(normed, normed, normed, block, self.config.heads)
        else:
            attended = prefix_tuned_msa(prompt, normed, block, self.config.heads)
        h = add(h, attended)
        normed = layer_norm(h, block.ln2_gain, block.ln2_offset)
        ff = matmul(tanh(matmul(normed, block.ff_in)), block.ff_out)
        return add(h, ff)


def pretrain_backbone(
    train_set,
    config: BackboneConfig,
    epochs: int,
    *,
    eval_set=None,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
) -> tuple[Backbone, float]:
    """Train a fresh backbone with a throwaway linear head, then freeze it.

    Returns the frozen backbone and its top-1 accuracy on ``eval_set``
    (or on the training data when no held-out split is given).
    ``epochs=0`` freezes the random initialization untouched.
    """
    if len(train_set.labels) == 0:
        raise ContractError("pretrain_backbone: empty training dataset")
    rng = np.random.default_rng(seed)
    backbone = Backbone(config, rng)
    classes = np.unique(train_set.labels).astype(np.int64)
    n_classes = classes.size
    head_w = _uniform_param(rng, (n_classes, config.embed_dim), config.embed_dim)
    head_b = Tensor(np.zeros(n_classes), requires_grad=True)

    n = len(train_set.labels)
    local_labels = np.searchsorted(classes, train_set.labels.astype(np.int64))
    batches_per_epoch = max(1, (n + batch_size - 1) // batch_size)
    total_steps = max(1, epochs * batches_per_epoch)
    optimizer = AdamW(backbone.parameters() + [head_w, head_b], lr=lr)
    active = list(range(n_classes))

    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            feats = backbone.encode(train_set.tokens[idx])
            logits = add_rowvec(matmul(feats, transpose_last(head_w)), head_b)
            loss = cross_entropy_masked(logits, local_labels[idx], active)
            loss.backward()
            optimizer.step(lr=cosine_rate(step, total_steps, lr))
            step += 1

    backbone.freeze()
    held_out = eval_set if eval_set is not None else train_set
    accuracy = _head_accuracy(backbone, head_w.data, head_b.data, classes, held_out)
    return backbone, accuracy


def _head_accuracy(backbone, weight, bias, classes, dataset) -> float:
    if len(dataset.labels) == 0:
        return float("nan")
    with no_grad():
        feats = backbone.encode(dataset.tokens).data
    logits = feats @ weight.T + bias
    predicted = classes[np.argmax(logits, axis=1)]
    return float(np.mean(predicted == dataset.labels.astype(np.int64)))
