"""
MIT License

Copyright (c) 2024-present protomem contributors

Permission is hereby granted, free of charge, to any person obtaining a copy
of this software and associated documentation files (the "Software"), to deal
in the Software without restriction, including without limitation the rights
to use, copy, modify, merge, publish, distribute, sublicense, and/or sell
copies of the Software, and to permit persons to whom the Software is
furnished to do so, subject to the following conditions:

The above copyright notice and this permission notice shall be included in all
copies or substantial portions of the Software.

THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND, EXPRESS OR
IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF MERCHANTABILITY,
FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL THE
AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER
LIABILITY, WHETHER IN AN ACTION OF CONTRACT, TORT OR OTHERWISE, ARISING FROM,
OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER DEALINGS IN THE
SOFTWARE.

A synthetic compositional captioning dataset.

Every sample is described by a (color, object, scene) triple. Its features hold one row per factor
(a fixed embedding of that factor plus Gaussian noise) and its caption follows the template
``<bos> color object in scene <eos>``. Held-out (color, object) pairs never occur in training and
make up the compositional test split.
"""
import logging
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .captioner import BOS_ID, EOS_ID, PAD_ID
from .errors import ConfigError, VocabularyError

_log = logging.getLogger(__name__)

IGNORE_INDEX = -100
IN_ID = 3

COLORS = ['red', 'blue', 'green', 'yellow', 'purple', 'orange', 'black', 'white']
OBJECTS = ['dog', 'cat', 'car', 'ball', 'bird', 'boat', 'chair', 'kite', 'horse', 'bike']
SCENES = ['park', 'beach', 'street', 'kitchen', 'field', 'lake']

Factors = Tuple[int, int, int]
PairLike = Union[Tuple[int, int], Tuple[str, str], str]


def _words(base: List[str], count: int, stem: str) -> List[str]:
    return [base[i] if i < len(base) else f'{stem}{i}' for i in range(count)]


class Vocabulary:
    """
    Maps words to token ids.

    ``<pad>`` is 0, ``<bos>`` 1, ``<eos>`` 2 and ``in`` 3, followed by the color, object and scene words.
    """
    __slots__ = ('colors', 'objects', 'scenes', 'words', '_index')

    def __init__(self, n_colors: int, n_objects: int, n_scenes: int):
        if min(n_colors, n_objects, n_scenes) < 1:
            raise ConfigError(f'Every factor needs at least one value, got {n_colors}, {n_objects}, {n_scenes}')

        self.colors: List[str] = _words(COLORS, n_colors, 'color')
        self.objects: List[str] = _words(OBJECTS, n_objects, 'object')
        self.scenes: List[str] = _words(SCENES, n_scenes, 'scene')
        self.words: List[str] = ['<pad>', '<bos>', '<eos>', 'in'] + self.colors + self.objects + self.scenes
        self._index = {word: index for index, word in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def color_id(self, color: int) -> int:
        return IN_ID + 1 + color

    def object_id(self, obj: int) -> int:
        return IN_ID + 1 + len(self.colors) + obj

    def scene_id(self, scene: int) -> int:
        return IN_ID + 1 + len(self.colors) + len(self.objects) + scene

    def caption(self, factors: Factors) -> List[int]:
        """ The template caption of a factor triple. """
        color, obj, scene = factors
        return [BOS_ID, self.color_id(color), self.object_id(obj), IN_ID, self.scene_id(scene), EOS_ID]

    def encode(self, words: Iterable[str]) -> List[int]:
        try:
            return [self._index[word] for word in words]
        except KeyError as error:
            raise VocabularyError(f'Unknown word {error.args[0]!r}') from error

    def decode(self, ids: Iterable[int]) -> List[str]:
        ids = list(ids)

        for token in ids:
            if not 0 <= token < len(self.words):
                raise VocabularyError(f'Token id {token} is outside of the vocabulary (size {len(self.words)})')

        return [self.words[token] for token in ids]

    def to_text(self, ids: Iterable[int]) -> str:
        """ Renders a caption, dropping special tokens. """
        return ' '.join(word for word in self.decode(ids) if not word.startswith('<'))

    def resolve_pair(self, pair: PairLike) -> Tuple[int, int]:
        """
        Resolves a held-out (color, object) pair given as indices, as words, or as ``"color:object"``.

        Raises
        ------
        :class:`ConfigError`
            If the pair names an unknown color or object.
        """
        if isinstance(pair, str):
            pair = tuple(part.strip() for part in pair.split(':'))

        if len(pair) != 2:
            raise ConfigError(f'A held-out pair needs a color and an object, got {pair!r}')

        color, obj = pair

        try:
            color = int(color) if not isinstance(color, str) or color.isdigit() else self.colors.index(color)
            obj = int(obj) if not isinstance(obj, str) or obj.isdigit() else self.objects.index(obj)
        except ValueError as error:
            raise ConfigError(f'Unknown held-out pair {pair!r}') from error

        if not (0 <= color < len(self.colors) and 0 <= obj < len(self.objects)):
            raise ConfigError(f'Held-out pair {pair!r} is out of range')

        return color, obj


class ToySample:
    """
    One synthetic sample.

    Attributes
    ----------
    features: :class:`numpy.ndarray`
        ``3 × d_feat``, one row per factor.
    caption: List[:class:`int`]
        The template caption, from ``<bos>`` to ``<eos>``.
    factors: Tuple[:class:`int`, :class:`int`, :class:`int`]
        The (color, object, scene) indices.
    """
    __slots__ = ('features', 'caption', 'factors')

    def __init__(self, features: np.ndarray, caption: List[int], factors: Factors):
        self.features: np.ndarray = features
        self.caption: List[int] = caption
        self.factors: Factors = factors

    def __repr__(self):
        return f'<ToySample factors={self.factors} caption={self.caption}>'


class ToyDataset(NamedTuple):
    vocab: Vocabulary
    train: List[ToySample]
    val: List[ToySample]
    test: List[ToySample]
    holdout: List[Tuple[int, int]]

    def split(self, name: str) -> List[ToySample]:
        if name not in ('train', 'val', 'test'):
            raise ConfigError(f'Unknown split {name!r}, expected one of train, val, test')
        return getattr(self, name)


class Batch(NamedTuple):
    features: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray
    lengths: np.ndarray


def make_toy_dataset(seed: int = 0, n_colors: int = 4, n_objects: int = 6, n_scenes: int = 3,
                     samples_per_split: Union[int, Sequence[int]] = (2000, 200, 200), sigma_feat: float = 0.1,
                     holdout_pairs: Sequence[PairLike] = (), d_feat: int = 32) -> ToyDataset:
    """
    Generates the train, validation and compositional test splits.

    Parameters
    ----------
    seed: :class:`int`
        Seeds the factor embeddings and the sampling. The same arguments always give the same dataset.
    n_colors: :class:`int`
    n_objects: :class:`int`
    n_scenes: :class:`int`
    samples_per_split: Union[:class:`int`, Sequence[:class:`int`]]
        The number of train, validation and test samples. A single number applies to every split.
    sigma_feat: :class:`float`
        The standard deviation of the feature noise. ``0`` makes features a pure function of the factors.
    holdout_pairs: Sequence
        (color, object) pairs excluded from train and validation. The test split only holds these pairs,
        and is empty if there are none.
    d_feat: :class:`int`
        The feature width.

    Raises
    ------
    :class:`ConfigError`
        If holding out the given pairs would remove a color or an object from training entirely.

    Returns
    -------
    :class:`ToyDataset`
    """
    vocab = Vocabulary(n_colors, n_objects, n_scenes)

    if isinstance(samples_per_split, int):
        samples_per_split = (samples_per_split,) * 3

    if len(samples_per_split) != 3 or min(samples_per_split) < 0:
        raise ConfigError(f'samples_per_split needs three nonnegative counts, got {samples_per_split}')

    if sigma_feat < 0:
        raise ConfigError(f'sigma_feat must be nonnegative, got {sigma_feat}')

    holdout = sorted({vocab.resolve_pair(pair) for pair in holdout_pairs})
    allowed = [(c, o) for c in range(n_colors) for o in range(n_objects) if (c, o) not in holdout]
    missing_colors = set(range(n_colors)) - {c for c, _ in allowed}
    missing_objects = set(range(n_objects)) - {o for _, o in allowed}

    if missing_colors or missing_objects:
        raise ConfigError(f'Held-out pairs remove colors {sorted(missing_colors)} and objects '
                          f'{sorted(missing_objects)} from training')

    rng = np.random.default_rng(seed)
    tables = [rng.normal(size=(count, d_feat)) for count in (n_colors, n_objects, n_scenes)]

    def sample(pairs: List[Tuple[int, int]], count: int) -> List[ToySample]:
        if not pairs:
            return []

        samples = []

        for _ in range(count):
            color, obj = pairs[int(rng.integers(len(pairs)))]
            factors = (color, obj, int(rng.integers(n_scenes)))
            features = np.stack([table[index] for table, index in zip(tables, factors)])

            if sigma_feat > 0:
                features = features + rng.normal(scale=sigma_feat, size=features.shape)

            samples.append(ToySample(features, vocab.caption(factors), factors))

        return samples

    train_count, val_count, test_count = samples_per_split
    train = sample(allowed, train_count)
    val = sample(allowed, val_count)
    test = sample(holdout, test_count)

    _log.debug('Generated toy dataset: %d train, %d val, %d test samples, %d held-out pairs',
               len(train), len(val), len(test), len(holdout))
    return ToyDataset(vocab, train, val, test, holdout)


def collate(samples: Sequence[ToySample], max_len: Optional[int] = None) -> Batch:
    """
    Stacks samples into a teacher-forcing batch.

    Inputs are captions without their last token and targets are captions without ``<bos>``.
    Shorter captions are padded with ``<pad>`` inputs and ignored targets.
    """
    lengths = np.array([len(sample.caption) - 1 for sample in samples], dtype=np.int64)
    width = int(lengths.max()) if max_len is None else max_len
    inputs = np.full((len(samples), width), PAD_ID, dtype=np.int64)
    targets = np.full((len(samples), width), IGNORE_INDEX, dtype=np.int64)

    for row, sample in enumerate(samples):
        length = lengths[row]
        inputs[row, :length] = sample.caption[:-1]
        targets[row, :length] = sample.caption[1:]

    features = np.stack([sample.features for sample in samples])
    return Batch(features, inputs, targets, lengths)
