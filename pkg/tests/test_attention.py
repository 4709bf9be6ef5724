import numpy as np
import pytest

from protomem.attention import (AttentionConfig, AttentionTrace, MultiHeadParams, SegmentEmbeddings, attention_mask,
                                augment_kv, memory_attention_score, multi_head_attention, scaled_dot_attention)
from protomem.errors import ConfigError, ContractError, DimensionError
from protomem.numerics import Tensor, backward, sum_all
from protomem.prototypes import PrototypeMemory


def memories(rng, heads, m, head_dim):
    return [PrototypeMemory(rng.normal(size=(m, head_dim)), rng.normal(size=(m, head_dim))) for _ in range(heads)]


def test_config_requires_divisible_heads():
    with pytest.raises(ConfigError):
        AttentionConfig(10, 3)

    assert AttentionConfig(12, 3).head_dim == 4


def test_mask_is_none_when_nothing_is_blocked():
    assert attention_mask(1, 3, 3) is None


def test_causal_mask_blocks_future_keys():
    mask = attention_mask(1, 3, 3, causal=True)

    np.testing.assert_array_equal(mask, [[False, True, True], [False, False, True], [False, False, False]])


def test_batched_mask_keeps_samples_apart():
    mask = attention_mask(2, 2, 3)

    assert mask.shape == (4, 6)
    assert not mask[:2, :3].any() and mask[:2, 3:].all()
    assert mask[2:, :3].all() and not mask[2:, 3:].any()


def test_key_padding_blocks_padding_columns():
    mask = attention_mask(2, 2, 2, causal=True, key_padding=np.array([[False, False], [False, True]]))

    assert mask[3, 3]
    assert not mask[3, 2]


def test_scaled_dot_attention_rows_sum_to_one(rng):
    queries, keys, values = (Tensor(rng.normal(size=shape)) for shape in ((3, 4), (5, 4), (5, 2)))
    out, trace = scaled_dot_attention(queries, keys, values)

    assert out.shape == (3, 2)
    np.testing.assert_allclose(trace.weights.sum(axis=1), np.ones(3), atol=1e-12)


def test_fully_masked_row_is_a_contract_error(rng):
    queries, keys = Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(2, 4)))
    mask = np.array([[True, True], [False, True]])

    with pytest.raises(ContractError):
        scaled_dot_attention(queries, keys, keys, mask)


def test_augment_kv_prepends_memory_and_segments_touch_keys_only(rng):
    keys, values = Tensor(rng.normal(size=(3, 2))), Tensor(rng.normal(size=(3, 2)))
    mem_keys, mem_values = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    segments = SegmentEmbeddings(Tensor([1.0, 1.0]), Tensor([-1.0, 0.0]))
    aug_keys, aug_values = augment_kv(keys, values, mem_keys, mem_values, segments)

    np.testing.assert_allclose(aug_keys.data[:2], mem_keys + 1.0)
    np.testing.assert_allclose(aug_keys.data[2:], keys.data + [-1.0, 0.0])
    np.testing.assert_array_equal(aug_values.data, np.concatenate([mem_values, values.data]))


def test_augment_kv_rejects_mismatched_widths(rng):
    keys = Tensor(rng.normal(size=(3, 2)))

    with pytest.raises(DimensionError):
        augment_kv(keys, keys, rng.normal(size=(2, 3)), rng.normal(size=(2, 3)))


def test_memory_is_detached_unless_asked_otherwise(rng):
    keys = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    mem_keys = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    mem_values = Tensor(rng.normal(size=(2, 2)), requires_grad=True)

    detached, _ = augment_kv(keys, keys, mem_keys, mem_values)
    grads = backward(sum_all(detached))
    assert mem_keys.node not in grads

    attached, _ = augment_kv(keys, keys, mem_keys, mem_values, detach_memory=False)
    grads = backward(sum_all(attached))
    np.testing.assert_array_equal(grads[mem_keys.node], np.ones((2, 2)))


def test_memory_columns_are_prepended_and_never_masked(rng):
    cfg = AttentionConfig(8, 2, causal=True, memory_slots=3)
    x = Tensor(rng.normal(size=(4, 8)))
    result = multi_head_attention(x, x, MultiHeadParams.init(8, rng), cfg, memory=memories(rng, 2, 3, 4),
                                  mask=attention_mask(1, 4, 4, causal=True))

    assert result.output.shape == (4, 8)
    assert len(result.traces) == 2 and len(result.keys) == 2

    for trace in result.traces:
        assert trace.weights.shape == (4, 7)
        assert trace.memory_col_count == 3
        assert not trace.mask[:, :3].any()
        assert (trace.memory_weights > 0).all()
        assert trace.input_weights[0, 1:].max() < 1e-300


def test_raw_keys_exclude_segments(rng):
    cfg = AttentionConfig(8, 2, memory_slots=2)
    x = Tensor(rng.normal(size=(3, 8)))
    params = MultiHeadParams.init(8, rng)
    segments = [SegmentEmbeddings(Tensor(np.ones(4)), Tensor(np.ones(4)))] * 2
    plain = multi_head_attention(x, x, params, cfg)
    augmented = multi_head_attention(x, x, params, cfg, memory=memories(rng, 2, 2, 4), segments=segments)

    for head in range(2):
        np.testing.assert_array_equal(plain.keys[head], augmented.keys[head])


def test_cross_attention_never_carries_memory(rng):
    cfg = AttentionConfig(8, 2, memory_slots=2)
    x, y = Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=(5, 8)))

    with pytest.raises(ContractError):
        multi_head_attention(x, y, MultiHeadParams.init(8, rng), cfg, memory=memories(rng, 2, 2, 4))


def test_memory_must_match_the_configured_slots(rng):
    x = Tensor(rng.normal(size=(3, 8)))
    params = MultiHeadParams.init(8, rng)

    with pytest.raises(DimensionError):
        multi_head_attention(x, x, params, AttentionConfig(8, 2, memory_slots=2), memory=memories(rng, 2, 3, 4))

    with pytest.raises(DimensionError):
        multi_head_attention(x, x, params, AttentionConfig(8, 2, memory_slots=2), memory=memories(rng, 1, 2, 4))


def test_zero_memory_keeps_relative_input_attention(rng):
    cfg = AttentionConfig(8, 2, causal=True, memory_slots=4)
    x = Tensor(rng.normal(size=(5, 8)))
    params = MultiHeadParams.init(8, rng)
    mask = attention_mask(1, 5, 5, causal=True)
    zeros = [PrototypeMemory.zeros(4, 4)] * 2
    segments = [SegmentEmbeddings.zeros(4)] * 2
    plain = multi_head_attention(x, x, params, AttentionConfig(8, 2, causal=True), mask=mask)
    augmented = multi_head_attention(x, x, params, cfg, memory=zeros, segments=segments, mask=mask)

    for before, after in zip(plain.traces, augmented.traces):
        renormalized = after.input_weights / after.input_weights.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(renormalized, before.weights, rtol=0, atol=1e-12)


def test_memory_attention_score_by_hand():
    trace = AttentionTrace(np.array([[0.5, 0.25, 0.25]]), 1)
    per_layer, mean = memory_attention_score([trace, trace], 0)

    assert per_layer == pytest.approx([2 / 3, 2 / 3])
    assert mean == pytest.approx(2 / 3)


def test_memory_attention_score_ignores_masked_inputs():
    mask = np.array([[False, False, True]])
    trace = AttentionTrace(np.array([[0.5, 0.5, 0.0]]), 1, mask)

    assert memory_attention_score([trace], 0)[1] == pytest.approx(0.5)


def test_memory_attention_score_contracts():
    with pytest.raises(ContractError):
        memory_attention_score([AttentionTrace(np.array([[0.5, 0.5]]), 0)], 0)

    with pytest.raises(ContractError):
        memory_attention_score([AttentionTrace(np.array([[0.5, 0.6]]), 1)], 0)


def test_mean_over_heads_keeps_rows_normalized():
    traces = [AttentionTrace(np.random.default_rng(seed).dirichlet(np.ones(4), size=3), 2) for seed in range(3)]
    averaged = AttentionTrace.mean_over_heads(traces)

    np.testing.assert_allclose(averaged.weights.sum(axis=1), np.ones(3), atol=1e-12)
    assert averaged.memory_col_count == 2

    with pytest.raises(ContractError):
        AttentionTrace.mean_over_heads([])
