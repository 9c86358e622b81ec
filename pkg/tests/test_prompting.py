import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import vqprompt as vp
import vqprompt.tensor as T
from vqprompt import ContractError, DimensionError
from vqprompt.prompting import select_prompt, select_prompt_batch

from conftest import make_pool


def brute_force_nearest(pool_values, continuous):
    """Independent argmin oracle: explicit loop over flattened distances."""
    best_index, best_distance = 0, float("inf")
    for j in range(pool_values.shape[0]):
        distance = float(
            np.sum((pool_values[j].ravel() - continuous.ravel()) ** 2)
        )
        if distance < best_distance:
            best_index, best_distance = j, distance
    return best_index


# ---------------------------------------------------------------------------
# similarity scores
# ---------------------------------------------------------------------------

def test_zero_query_gives_uniform_scores(rng):
    pool = make_pool(rng)
    scores = vp.similarity_scores(pool, T.Tensor(np.zeros(16)))
    assert np.allclose(scores.data, np.full(10, 0.1), atol=1e-15)


def test_equal_keys_give_uniform_scores(rng):
    pool = make_pool(rng)
    pool.keys.data = np.tile(rng.standard_normal(16), (10, 1))
    scores = vp.similarity_scores(pool, T.Tensor(rng.standard_normal(16)))
    assert np.allclose(scores.data, 0.1, atol=1e-12)


def test_low_temperature_approaches_argmax(rng):
    pool = make_pool(rng)
    query = T.Tensor(rng.standard_normal(16))
    logits = pool.keys.data @ query.data
    gap = np.sort(logits)[-1] - np.sort(logits)[-2]
    if gap < 1.0:  # enforce the documented gap >= 1 premise
        top = int(np.argmax(logits))
        pool.keys.data[top] *= (logits[top] + 1.5) / logits[top]
        logits = pool.keys.data @ query.data
    scores = vp.similarity_scores(pool, query, temperature=0.01)
    assert scores.data[int(np.argmax(logits))] > 1.0 - 1e-6


def test_nonpositive_temperature_rejected(rng):
    pool = make_pool(rng)
    query = T.Tensor(np.zeros(16))
    for bad in (0.0, -1.0):
        with pytest.raises(ContractError):
            vp.similarity_scores(pool, query, temperature=bad)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 10.0))
def test_scores_always_on_simplex(seed, temperature):
    rng = np.random.default_rng(seed)
    pool = make_pool(rng, size=7, length=4, dim=8)
    query = T.Tensor(3.0 * rng.standard_normal(8))
    scores = vp.similarity_scores(pool, query, temperature).data
    assert abs(scores.sum() - 1.0) <= 1e-12
    assert np.all(scores >= 0)


def test_scores_differentiable_in_keys_and_query(rng):
    pool = make_pool(rng, size=4, length=2, dim=5)
    query = T.Tensor(rng.standard_normal(5), requires_grad=True)
    err = vp.grad_check(
        lambda keys, q: T.sum_squares(
            vp.similarity_scores(vp.PromptPool(pool.prompts, keys), q)
        ),
        [pool.keys, query],
    )
    assert err < 1e-5


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def test_one_hot_scores_select_exactly(rng):
    pool = make_pool(rng)
    one_hot = np.zeros(10)
    one_hot[4] = 1.0
    combo = vp.aggregate_prompt(pool, T.Tensor(one_hot))
    assert np.array_equal(combo.data, pool.prompts.data[4])


def test_uniform_scores_give_elementwise_mean(rng):
    pool = make_pool(rng, size=2)
    combo = vp.aggregate_prompt(pool, T.Tensor([0.5, 0.5]))
    want = 0.5 * (pool.prompts.data[0] + pool.prompts.data[1])
    assert np.allclose(combo.data, want, atol=1e-15)


def test_convex_combination_norm_bound(rng):
    for _ in range(20):
        pool = make_pool(rng, size=6, length=4, dim=8)
        raw = rng.uniform(0, 1, 6)
        scores = raw / raw.sum()
        combo = vp.aggregate_prompt(pool, T.Tensor(scores))
        row_norms = [
            float(np.linalg.norm(pool.prompts.data[j])) for j in range(6)
        ]
        assert np.linalg.norm(combo.data) <= max(row_norms) + 1e-12


def test_aggregate_length_mismatch(rng):
    pool = make_pool(rng)
    with pytest.raises(DimensionError):
        vp.aggregate_prompt(pool, T.Tensor(np.ones(9) / 9))


# ---------------------------------------------------------------------------
# quantization
# ---------------------------------------------------------------------------

def test_exact_member_maps_to_itself(rng):
    pool = make_pool(rng)
    member = T.Tensor(pool.prompts.data[3].copy())
    quantized, index = vp.quantize_prompt(pool, member)
    assert index == 3
    assert np.array_equal(quantized.data, pool.prompts.data[3])


def test_equidistant_tie_resolves_to_lowest_index(rng):
    # query at the origin, elements 1 and 4 exact mirror images: their
    # squared distances are bit-identical
    pool = make_pool(rng)
    offset = rng.standard_normal((8, 16))
    pool.prompts.data = pool.prompts.data + 100.0  # push the rest far away
    pool.prompts.data[1] = offset
    pool.prompts.data[4] = -offset
    _, index = vp.quantize_prompt(pool, T.Tensor(np.zeros((8, 16))))
    assert index == 1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_quantize_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    pool = make_pool(rng, size=10, length=4, dim=6)
    continuous = T.Tensor(rng.standard_normal((4, 6)))
    quantized, index = vp.quantize_prompt(pool, continuous)
    assert index == brute_force_nearest(pool.prompts.data, continuous.data)
    assert np.array_equal(quantized.data, pool.prompts.data[index])


def test_quantized_gradient_routes_to_continuous(rng):
    pool = make_pool(rng)
    continuous = T.Tensor(rng.standard_normal((8, 16)), requires_grad=True)
    quantized, index = vp.quantize_prompt(pool, continuous)
    T.total(quantized).backward()
    assert np.array_equal(continuous.grad, np.ones((8, 16)))
    assert pool.prompts.grad is None


def test_one_hot_consistency(rng):
    # one-hot scores -> aggregation returns the element -> quantization
    # returns that same index
    for i in range(10):
        pool = make_pool(rng)
        one_hot = np.zeros(10)
        one_hot[i] = 1.0
        combo = vp.aggregate_prompt(pool, T.Tensor(one_hot))
        _, index = vp.quantize_prompt(pool, combo)
        assert index == i


# ---------------------------------------------------------------------------
# regularization losses
# ---------------------------------------------------------------------------

def test_vq_loss_zero_at_match(rng):
    pool = make_pool(rng)
    member = T.Tensor(pool.prompts.data[2].copy())
    assert vp.vq_loss(member, pool.element(2)).item() == 0.0


def test_vq_loss_gradient_routing(rng):
    pool = make_pool(rng)
    continuous = T.Tensor(rng.standard_normal((8, 16)), requires_grad=True)
    _, index = vp.quantize_prompt(pool, continuous)
    loss = vp.vq_loss(continuous, pool.element(index))
    loss.backward()
    assert continuous.grad is None  # blocked by stop-gradient
    want = 2.0 * (pool.prompts.data[index] - continuous.data)
    assert np.allclose(pool.prompts.grad[index], want, atol=1e-12)
    others = np.delete(pool.prompts.grad, index, axis=0)
    assert np.all(others == 0)


def test_vq_loss_finite_differences(rng):
    pool_values = rng.standard_normal((5, 4, 6))
    continuous = rng.standard_normal((4, 6))
    prompts = T.Tensor(pool_values, requires_grad=True)
    err = vp.grad_check(
        lambda p: vp.vq_loss(T.Tensor(continuous), T.select(p, 0, 2)), [prompts]
    )
    assert err < 1e-4


def test_commitment_loss_zero_at_match(rng):
    pool = make_pool(rng)
    member = T.Tensor(pool.prompts.data[2].copy())
    assert vp.commitment_loss(member, pool.element(2)).item() == 0.0


def test_commitment_loss_gradient_routing(rng):
    pool = make_pool(rng)
    continuous = T.Tensor(rng.standard_normal((8, 16)), requires_grad=True)
    _, index = vp.quantize_prompt(pool, continuous)
    loss = vp.commitment_loss(continuous, pool.element(index))
    loss.backward()
    assert pool.prompts.grad is None  # direct path blocked by stop-gradient
    want = 2.0 * (continuous.data - pool.prompts.data[index])
    assert np.allclose(continuous.grad, want, atol=1e-12)


def test_commitment_loss_finite_differences(rng):
    continuous = T.Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    row = rng.standard_normal((4, 6))
    err = vp.grad_check(
        lambda c: vp.commitment_loss(c, T.Tensor(row)), [continuous]
    )
    assert err < 1e-4


def test_loss_shape_mismatch(rng):
    with pytest.raises(DimensionError):
        vp.vq_loss(T.Tensor(np.zeros((4, 6))), T.Tensor(np.zeros((4, 5))))
    with pytest.raises(DimensionError):
        vp.commitment_loss(T.Tensor(np.zeros((4, 6))), T.Tensor(np.zeros((4, 5))))


def test_total_loss_values():
    w = vp.LossWeights()
    assert w.lambda_q == 0.4 and w.lambda_c == 0.1
    one = vp.total_loss(T.Tensor(1.0), T.Tensor(0.0), T.Tensor(0.0), w)
    assert one.item() == 1.0
    combo = vp.total_loss(T.Tensor(2.0), T.Tensor(1.0), T.Tensor(1.0), w)
    assert np.isclose(combo.item(), 2.5)
    plain = vp.total_loss(
        T.Tensor(3.0), T.Tensor(7.0), T.Tensor(9.0), vp.LossWeights(0.0, 0.0)
    )
    assert plain.item() == 3.0


def test_negative_loss_weights_rejected():
    with pytest.raises(ContractError):
        vp.LossWeights(-0.1, 0.1)


# ---------------------------------------------------------------------------
# soft prompting
# ---------------------------------------------------------------------------

def test_soft_prompt_composition(rng):
    pool = make_pool(rng)
    query = T.Tensor(rng.standard_normal(16))
    direct = vp.soft_prompt_forward(pool, query, temperature=1.0)
    composed = vp.aggregate_prompt(pool, vp.similarity_scores(pool, query, 1.0))
    assert np.array_equal(direct.data, composed.data)


def test_soft_prompt_generally_off_codebook(rng):
    pool = make_pool(rng)
    query = T.Tensor(rng.standard_normal(16))
    soft = vp.soft_prompt_forward(pool, query, temperature=1.0)
    nearest = brute_force_nearest(pool.prompts.data, soft.data)
    distance = np.linalg.norm(soft.data - pool.prompts.data[nearest])
    assert distance > 0.0


def test_soft_prompt_sharp_temperature_near_argmax_element(rng):
    pool = make_pool(rng)
    query = T.Tensor(rng.standard_normal(16))
    logits = pool.keys.data @ query.data
    top = int(np.argmax(logits))
    pool.keys.data[top] *= (logits[top] + 2.0) / logits[top]  # gap >= 1
    logits = pool.keys.data @ query.data
    assert np.sort(logits)[-1] - np.sort(logits)[-2] >= 1.0
    soft = vp.soft_prompt_forward(pool, query, temperature=0.01)
    assert np.allclose(soft.data, pool.prompts.data[top], atol=1e-6)


def test_soft_prompt_temperature_contract(rng):
    pool = make_pool(rng)
    with pytest.raises(ContractError):
        vp.soft_prompt_forward(pool, T.Tensor(np.zeros(16)), temperature=0.0)


# ---------------------------------------------------------------------------
# end-to-end trainability and the query path
# ---------------------------------------------------------------------------

def test_keys_and_pool_receive_task_gradient(rng):
    pool = make_pool(rng, size=6, length=4, dim=8)
    query = T.Tensor(rng.standard_normal(8))
    readout = T.Tensor(rng.standard_normal((4, 8)))
    selection = select_prompt(pool, query, temperature=1.0, quantize=True)
    task_like = T.sum_squares(T.mul(readout, selection.quantized))
    task_like.backward()
    assert pool.keys.grad is not None and np.any(pool.keys.grad != 0)
    assert pool.prompts.grad is not None and np.any(pool.prompts.grad != 0)


def test_compute_query_contracts(frozen_backbone, rng):
    backbone, _ = frozen_backbone
    tokens = rng.standard_normal((16, 32))
    q1 = vp.compute_query(tokens, backbone)
    q2 = vp.compute_query(tokens, backbone)
    assert np.array_equal(q1.data, q2.data)
    assert not q1.requires_grad and q1._parents == ()
    # empty prompt map through the shared backbone gives the same feature
    assert np.array_equal(q1.data, backbone.encode(tokens, prompts={}).data)


def test_compute_query_rejects_unfrozen_backbone(rng):
    config = vp.BackboneConfig(depth=2, embed_dim=8, heads=2, seq_len=5,
                               ff_dim=16, token_dim=6)
    backbone = vp.Backbone(config, rng)
    with pytest.raises(ContractError):
        vp.compute_query(rng.standard_normal((4, 6)), backbone)


def test_pool_length_must_be_even(rng):
    with pytest.raises(ContractError):
        vp.PromptPool(
            T.Tensor(rng.standard_normal((4, 3, 8))),
            T.Tensor(rng.standard_normal((4, 8))),
        )


# ---------------------------------------------------------------------------
# batched path parity with the per-sample pipeline
# ---------------------------------------------------------------------------

def test_batched_selection_matches_per_sample(rng):
    pool = make_pool(rng)
    queries = rng.standard_normal((9, 16))
    batch = select_prompt_batch(pool, queries, temperature=0.7, quantize=True)
    for b in range(9):
        single = select_prompt(
            pool, T.Tensor(queries[b]), temperature=0.7, quantize=True
        )
        assert np.allclose(batch.scores.data[b], single.scores.data, atol=1e-12)
        assert np.allclose(
            batch.continuous.data[b], single.continuous.data, atol=1e-12
        )
        assert int(batch.indices[b]) == single.index
        assert np.array_equal(batch.quantized.data[b], single.quantized.data)


def test_batched_losses_match_per_sample_means(rng):
    pool = make_pool(rng)
    queries = rng.standard_normal((6, 16))
    batch = select_prompt_batch(pool, queries, temperature=1.0, quantize=True)
    singles = [
        select_prompt(pool, T.Tensor(queries[b]), 1.0, quantize=True)
        for b in range(6)
    ]
    want_vq = np.mean([
        vp.vq_loss(s.continuous, s.codebook_row).item() for s in singles
    ])
    want_commit = np.mean([
        vp.commitment_loss(s.continuous, s.codebook_row).item() for s in singles
    ])
    assert np.isclose(batch.mean_vq_loss().item(), want_vq, atol=1e-12)
    assert np.isclose(
        batch.mean_commitment_loss().item(), want_commit, atol=1e-12
    )
