import numpy as np
import pytest

from protomem.captioner import BOS_ID, EOS_ID, PAD_ID
from protomem.dataset import IGNORE_INDEX, IN_ID, Vocabulary, collate, make_toy_dataset
from protomem.errors import ConfigError, VocabularyError


def test_vocabulary_layout():
    vocab = Vocabulary(2, 3, 2)

    assert len(vocab) == 4 + 2 + 3 + 2
    assert vocab.caption((1, 2, 0)) == [BOS_ID, vocab.color_id(1), vocab.object_id(2), IN_ID, vocab.scene_id(0), EOS_ID]
    assert vocab.to_text(vocab.caption((0, 0, 1))) == 'red dog in beach'


def test_vocabulary_encode_decode():
    vocab = Vocabulary(2, 2, 2)

    assert vocab.decode(vocab.encode(['blue', 'cat', 'in', 'park'])) == ['blue', 'cat', 'in', 'park']

    with pytest.raises(VocabularyError):
        vocab.encode(['violet'])

    with pytest.raises(VocabularyError):
        vocab.decode([len(vocab)])


@pytest.mark.parametrize('pair', [(1, 2), ('blue', 'car'), 'blue:car', '1:2'])
def test_resolve_pair_formats(pair):
    assert Vocabulary(4, 6, 3).resolve_pair(pair) == (1, 2)


@pytest.mark.parametrize('pair', ['blue', 'violet:car', (4, 0)])
def test_resolve_pair_rejects_unknown_pairs(pair):
    with pytest.raises(ConfigError):
        Vocabulary(4, 6, 3).resolve_pair(pair)


def test_splits_respect_held_out_pairs():
    data = make_toy_dataset(seed=3, samples_per_split=(300, 50, 40), holdout_pairs=['red:dog', (2, 3)])

    assert data.holdout == [(0, 0), (2, 3)]
    assert all(sample.factors[:2] not in data.holdout for sample in data.train + data.val)
    assert len(data.test) == 40
    assert all(sample.factors[:2] in data.holdout for sample in data.test)


def test_test_split_is_empty_without_held_out_pairs():
    assert make_toy_dataset(seed=0, samples_per_split=(10, 5, 5)).test == []


def test_a_factor_value_must_survive_the_holdout():
    pairs = [(0, obj) for obj in range(3)]

    with pytest.raises(ConfigError):
        make_toy_dataset(n_colors=2, n_objects=3, holdout_pairs=pairs, samples_per_split=10)


def test_samples_follow_the_caption_template():
    data = make_toy_dataset(seed=1, samples_per_split=(20, 0, 0), d_feat=6)

    for sample in data.train:
        assert sample.features.shape == (3, 6)
        assert sample.caption == data.vocab.caption(sample.factors)


def test_generation_is_deterministic_per_seed():
    first = make_toy_dataset(seed=9, samples_per_split=(20, 5, 5))
    second = make_toy_dataset(seed=9, samples_per_split=(20, 5, 5))
    other = make_toy_dataset(seed=10, samples_per_split=(20, 5, 5))

    np.testing.assert_array_equal(first.train[0].features, second.train[0].features)
    assert not np.array_equal(first.train[0].features, other.train[0].features)


def test_feature_noise_is_controlled_by_sigma():
    clean = make_toy_dataset(seed=2, samples_per_split=(50, 0, 0), sigma_feat=0.0)
    by_factors = {}

    for sample in clean.train:
        by_factors.setdefault(sample.factors, []).append(sample.features)

    for features in by_factors.values():
        for other in features[1:]:
            np.testing.assert_array_equal(features[0], other)


def test_collate_shifts_and_pads():
    data = make_toy_dataset(seed=0, samples_per_split=(2, 0, 0))
    short = data.train[1]
    short.caption = short.caption[:-1]
    batch = collate(data.train)

    assert batch.inputs.shape == batch.targets.shape == (2, 5)
    assert batch.lengths.tolist() == [5, 4]
    assert batch.inputs[0].tolist() == data.train[0].caption[:-1]
    assert batch.targets[0].tolist() == data.train[0].caption[1:]
    assert batch.inputs[1, 4] == PAD_ID
    assert batch.targets[1, 4] == IGNORE_INDEX
    assert batch.features.shape == (2, 3, 32)
