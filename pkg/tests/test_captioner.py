import numpy as np
import pytest

from protomem.captioner import BOS_ID, EOS_ID, Captioner, LearnableMemory, MemoryMode, ModelConfig, parameter_count
from protomem.errors import ConfigError, ContractError, DimensionError, VocabularyError
from protomem.numerics import Tensor, backward, cross_entropy, no_grad
from protomem.prototypes import PrototypeMemory


def small_config(**changes):
    values = dict(layers=2, d_model=16, heads=2, ffn_dim=24, vocab=11, max_len=6, d_feat=5, memory_slots=3)
    values.update(changes)
    return ModelConfig(**values)


def random_memories(cfg, rng):
    return {slot: PrototypeMemory(rng.normal(size=(cfg.memory_slots, cfg.head_dim)),
                                  rng.normal(size=(cfg.memory_slots, cfg.head_dim)))
            for slot in cfg.memory_slot_keys()}


@pytest.mark.parametrize('changes', [
    {},
    {'mode': 'baseline'},
    {'mode': 'learnable-mem'},
    {'memory_in_first_layer': False},
    {'segment_per_head': True},
    {'use_segment_embeddings': False},
    {'memory_slots': 0},
    {'layers': 1, 'heads': 4, 'mode': MemoryMode.LEARNABLE_MEM, 'segment_per_head': True},
])
def test_parameter_count_matches_the_model(changes):
    cfg = small_config(**changes)

    assert Captioner(cfg).num_parameters == parameter_count(cfg)


def test_invalid_configs():
    with pytest.raises(ConfigError):
        small_config(heads=3)

    with pytest.raises(ConfigError):
        small_config(mode='unknown')

    with pytest.raises(ConfigError):
        small_config(vocab=2)


def test_memory_layers():
    assert small_config().memory_layers() == [0, 1]
    assert small_config(memory_in_first_layer=False).memory_layers() == [1]
    assert small_config(mode='baseline').memory_layers() == []
    assert small_config(memory_slots=0).memory_slot_keys() == []


def test_decoder_is_causal(rng):
    cfg = small_config()
    model = Captioner(cfg, seed=1)
    model.install_memories(random_memories(cfg, rng))
    enc = model.encode(rng.normal(size=(3, cfg.d_feat)))
    tokens = [BOS_ID, 4, 5, 6, 7]
    changed = [BOS_ID, 4, 5, 9, 3]

    with no_grad():
        before = model.decode_teacher_forced(tokens, enc).logits.data
        after = model.decode_teacher_forced(changed, enc).logits.data

    np.testing.assert_array_equal(before[:3], after[:3])
    assert not np.array_equal(before[3:], after[3:])


def test_encoder_is_permutation_equivariant(rng):
    cfg = small_config()
    model = Captioner(cfg, seed=2)
    features = rng.normal(size=(4, cfg.d_feat))
    order = [2, 0, 3, 1]

    with no_grad():
        np.testing.assert_allclose(model.encode(features[order]).data, model.encode(features).data[order], atol=1e-12)


def test_batched_decoding_matches_single_samples(rng):
    cfg = small_config()
    model = Captioner(cfg, seed=3)
    model.install_memories(random_memories(cfg, rng))
    features = rng.normal(size=(2, 3, cfg.d_feat))
    tokens = np.array([[BOS_ID, 4, 5, 0], [BOS_ID, 6, 7, 8]])

    with no_grad():
        batched = model.forward(features, tokens, lengths=[3, 4]).logits.data.reshape(2, 4, -1)
        first = model.decode_teacher_forced(tokens[0, :3], model.encode(features[0])).logits.data
        second = model.decode_teacher_forced(tokens[1], model.encode(features[1])).logits.data

    np.testing.assert_allclose(batched[0, :3], first, atol=1e-10)
    np.testing.assert_allclose(batched[1], second, atol=1e-10)


def test_decoder_input_contracts(rng):
    cfg = small_config()
    model = Captioner(cfg)
    enc = model.encode(rng.normal(size=(2, cfg.d_feat)))

    with pytest.raises(VocabularyError):
        model.decode_teacher_forced([BOS_ID, cfg.vocab], enc)

    with pytest.raises(ContractError):
        model.decode_teacher_forced([BOS_ID] * (cfg.max_len + 1), enc)

    with pytest.raises(DimensionError):
        model.encode(rng.normal(size=(2, cfg.d_feat + 1)))


def test_install_memories_is_atomic(rng):
    cfg = small_config()
    model = Captioner(cfg)
    good = random_memories(cfg, rng)
    model.install_memories(good)
    bad = dict(good)
    bad[(1, 1)] = PrototypeMemory.zeros(cfg.memory_slots + 1, cfg.head_dim)

    with pytest.raises(DimensionError):
        model.install_memories(bad)

    assert model.memories == good

    with pytest.raises(DimensionError):
        model.install_memories({(cfg.layers, 0): PrototypeMemory.zeros(cfg.memory_slots, cfg.head_dim)})

    model.install_memories(None)
    assert model.memories == {}


def test_first_layer_memory_is_ignored_when_disabled(rng):
    cfg = small_config(memory_in_first_layer=False)
    model = Captioner(cfg)
    memories = {(layer, head): PrototypeMemory.zeros(cfg.memory_slots, cfg.head_dim)
                for layer in range(cfg.layers) for head in range(cfg.heads)}
    model.install_memories(memories)

    assert sorted(model.memories) == [(1, 0), (1, 1)]

    with no_grad():
        traces = model.forward(rng.normal(size=(1, 2, cfg.d_feat)), [[BOS_ID, 4]]).traces

    assert traces[0][0].memory_col_count == 0
    assert traces[1][0].memory_col_count == cfg.memory_slots


def test_layers_without_every_head_run_without_memory(rng):
    cfg = small_config()
    model = Captioner(cfg)
    model.install_memories({(0, 0): PrototypeMemory.zeros(cfg.memory_slots, cfg.head_dim)})

    with no_grad():
        traces = model.forward(rng.normal(size=(1, 2, cfg.d_feat)), [[BOS_ID, 4]]).traces

    assert all(trace.memory_col_count == 0 for heads in traces.values() for trace in heads)


def test_learnable_memory_receives_gradients(rng):
    cfg = small_config(mode='learnable-mem')
    model = Captioner(cfg)
    out = model.forward(rng.normal(size=(1, 2, cfg.d_feat)), [[BOS_ID, 4, 5]])
    grads = backward(cross_entropy(out.logits, [4, 5, EOS_ID]))

    assert out.traces[0][0].memory_col_count == cfg.memory_slots
    assert np.abs(grads[model.params['dec.0.mem.0.keys'].node]).sum() > 0
    assert np.abs(grads[model.params['dec.0.mem.0.values'].node]).sum() > 0


def test_segment_embeddings_learn_from_prototype_memory(rng):
    cfg = small_config()
    model = Captioner(cfg)
    model.install_memories(random_memories(cfg, rng))
    out = model.forward(rng.normal(size=(1, 2, cfg.d_feat)), [[BOS_ID, 4, 5]])
    grads = backward(cross_entropy(out.logits, [4, 5, EOS_ID]))

    assert np.abs(grads[model.params['dec.1.seg.mem'].node]).sum() > 0


def full_model_loss(model, features, tokens, targets, memories=None):
    features = np.asarray(features)
    enc = model.encode_batch(features)
    out = model.decode_batch(tokens, enc, features.shape[1], memories=memories)
    return cross_entropy(out.logits, targets)


@pytest.mark.parametrize('mode', ['pma', 'learnable-mem'])
def test_full_model_gradients_match_finite_differences(rng, mode):
    cfg = small_config(layers=1, d_model=16, ffn_dim=16, memory_slots=4, mode=mode)
    model = Captioner(cfg, seed=3)

    for name, param in model.params.items():
        if '.seg.' in name:
            param.data[...] = rng.normal(scale=0.5, size=param.shape)

    if mode == 'pma':
        model.install_memories(random_memories(cfg, rng))

    features = rng.normal(size=(2, 3, cfg.d_feat))
    tokens = np.array([[BOS_ID, 4, 5, 6], [BOS_ID, 7, 8, 9]])
    targets = np.array([4, 5, 6, EOS_ID, 7, 8, 9, EOS_ID])
    grads = backward(full_model_loss(model, features, tokens, targets))
    h = 1e-5

    for name, param in model.params.items():
        analytic = grads.get(param.node, np.zeros_like(param.data))
        numeric = np.zeros_like(param.data)

        with no_grad():
            for index in np.ndindex(param.shape):
                original = param.data[index]
                param.data[index] = original + h
                f_plus = full_model_loss(model, features, tokens, targets).item()
                param.data[index] = original - h
                f_minus = full_model_loss(model, features, tokens, targets).item()
                param.data[index] = original
                numeric[index] = (f_plus - f_minus) / (2 * h)

        np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-8, err_msg=name)


def test_prototype_memory_gets_no_gradient(rng):
    cfg = small_config(layers=1, d_model=16, ffn_dim=16, memory_slots=4)
    model = Captioner(cfg, seed=3)
    memories = {slot: LearnableMemory(Tensor(rng.normal(size=(cfg.memory_slots, cfg.head_dim)), requires_grad=True),
                                      Tensor(rng.normal(size=(cfg.memory_slots, cfg.head_dim)), requires_grad=True))
                for slot in cfg.memory_slot_keys()}
    loss = full_model_loss(model, rng.normal(size=(1, 3, cfg.d_feat)), [[BOS_ID, 4, 5]], [4, 5, EOS_ID],
                           memories=memories)
    grads = backward(loss)

    assert np.abs(grads[model.params['dec.0.seg.mem'].node]).sum() > 0

    for memory in memories.values():
        for tensor in (memory.keys, memory.values):
            adjoint = grads.get(tensor.node)
            assert adjoint is None or not adjoint.any()


def test_state_dict_round_trip(rng):
    cfg = small_config()
    source, target = Captioner(cfg, seed=1), Captioner(cfg, seed=2)
    target.load_state_dict(source.state_dict())
    features = rng.normal(size=(1, 2, cfg.d_feat))

    with no_grad():
        np.testing.assert_array_equal(source.forward(features, [[BOS_ID, 4]]).logits.data,
                                      target.forward(features, [[BOS_ID, 4]]).logits.data)

    with pytest.raises(DimensionError):
        target.load_state_dict({'feat.w': np.zeros((1, 1))})


def test_generation_respects_length_limits(rng):
    cfg = small_config()
    model = Captioner(cfg, seed=4)
    features = rng.normal(size=(3, cfg.d_feat))
    greedy = model.generate(features)

    assert 1 <= len(greedy) <= cfg.max_len - 1
    assert EOS_ID not in greedy[:-1]
    assert len(model.generate(features, max_len=2)) <= 2
    assert model.generate(features, max_len=0) == []
    assert model.generate_batch(features[None]) == [greedy]


def test_beam_search_output_is_well_formed(rng):
    cfg = small_config()
    model = Captioner(cfg, seed=5)
    features = rng.normal(size=(3, cfg.d_feat))

    assert model.generate(features, max_len=3, beam=1) == model.generate(features, max_len=3)

    beam = model.generate(features, max_len=3, beam=4)

    assert 1 <= len(beam) <= 3
    assert all(0 <= token < cfg.vocab for token in beam)
    assert EOS_ID not in beam[:-1]

    with pytest.raises(ContractError):
        model.generate(features, beam=0)
