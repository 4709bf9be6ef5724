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

The flat run configuration shared by every command.

Configuration files hold one ``key = value`` pair per line. ``#`` starts a comment, keys may be
spelled with dashes or underscores. Every key is also a command line flag of the same name, and
flags override file values, which override the defaults.
"""
import argparse
import logging
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

from .captioner import MemoryMode, ModelConfig
from .dataset import ToyDataset, make_toy_dataset
from .errors import ConfigError
from .prototypes import ClusterScope
from .schedule import DecayMode, ScheduleConfig

_log = logging.getLogger(__name__)

_TRUE = {'true', 'yes', 'on', '1'}
_FALSE = {'false', 'no', 'off', '0'}
_FLAG_PREFIX = 'cfg_'


@dataclass(frozen=True)
class RunConfig:
    """
    Every tunable of a run. See ``docs/overview.rst`` for the meaning of each key.
    """
    seed: int = 0
    steps: int = 2000
    batch: int = 32
    # model
    layers: int = 2
    d_model: int = 64
    heads: int = 4
    ffn_dim: int = 128
    d_feat: int = 32
    max_len: int = 8
    # memory
    mode: str = 'pma'
    m: int = 64
    t_bank: int = 100
    stride: int = 25
    topk: int = 16
    normalize_weights: bool = False
    segment_emb: bool = True
    first_layer_mem: bool = True
    segment_per_head: bool = False
    cluster_scope: str = 'per-head'
    kmeans_iters: int = 20
    kmeans_tol: float = 1e-4
    # schedule
    warmup: int = 100
    peak_lr: float = 1e-3
    constant_until: int = 1000
    decay_until: int = 1500
    floor_lr: float = 1e-5
    decay: str = 'geometric'
    # dataset
    n_colors: int = 4
    n_objects: int = 6
    n_scenes: int = 3
    train_samples: int = 2000
    val_samples: int = 200
    test_samples: int = 200
    sigma_feat: float = 0.1
    holdout: str = ''
    # evaluation and verification
    beam: int = 1
    trials: int = 10000
    eps_max: float = 2.0

    def __post_init__(self):
        for name, enum in (('mode', MemoryMode), ('cluster_scope', ClusterScope), ('decay', DecayMode)):
            try:
                object.__setattr__(self, name, enum.from_str(getattr(self, name)).value)
            except ValueError as error:
                raise ConfigError(f'{name}: {error}') from error

        for name in ('batch', 't_bank', 'stride', 'topk', 'kmeans_iters', 'beam', 'trials'):
            if getattr(self, name) < 1:
                raise ConfigError(f'{name} must be positive, got {getattr(self, name)}')

        if self.steps < 0:
            raise ConfigError(f'steps must be nonnegative, got {self.steps}')

        if self.stride > self.t_bank:
            raise ConfigError(f'stride ({self.stride}) must not exceed t_bank ({self.t_bank})')

        if self.kmeans_tol < 0 or self.eps_max <= 0:
            raise ConfigError('kmeans_tol must be nonnegative and eps_max positive')

        self.model_config()
        self.schedule()

    @property
    def vocab_size(self) -> int:
        return 4 + self.n_colors + self.n_objects + self.n_scenes

    @property
    def memory_mode(self) -> MemoryMode:
        return MemoryMode.from_str(self.mode)

    def model_config(self) -> ModelConfig:
        return ModelConfig(layers=self.layers, d_model=self.d_model, heads=self.heads, ffn_dim=self.ffn_dim,
                           vocab=self.vocab_size, max_len=self.max_len, d_feat=self.d_feat, memory_slots=self.m,
                           memory_in_first_layer=self.first_layer_mem, use_segment_embeddings=self.segment_emb,
                           segment_per_head=self.segment_per_head, mode=self.mode)

    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(warmup_steps=self.warmup, peak_lr=self.peak_lr, constant_until=self.constant_until,
                              decay_until=self.decay_until, floor_lr=self.floor_lr, decay=self.decay)

    def holdout_pairs(self) -> List[str]:
        return [pair.strip() for pair in self.holdout.split(',') if pair.strip()]

    def dataset(self) -> ToyDataset:
        """ Generates the toy dataset this configuration describes, seeded by :attr:`seed`. """
        return make_toy_dataset(seed=self.seed, n_colors=self.n_colors, n_objects=self.n_objects, n_scenes=self.n_scenes,
                                samples_per_split=(self.train_samples, self.val_samples, self.test_samples),
                                sigma_feat=self.sigma_feat, holdout_pairs=self.holdout_pairs(), d_feat=self.d_feat)

    def replace(self, **changes: Any) -> 'RunConfig':
        unknown = set(changes) - {field.name for field in fields(self)}

        if unknown:
            raise ConfigError(f'Unknown configuration keys: {", ".join(sorted(unknown))}')

        return replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> 'RunConfig':
        return cls().replace(**{normalize_key(key): value for key, value in values.items()})

    def to_text(self) -> str:
        """ Renders the configuration in the ``key = value`` file format, keys sorted. """
        lines = []

        for key, value in sorted(self.to_dict().items()):
            if isinstance(value, bool):
                value = 'true' if value else 'false'
            lines.append(f'{key} = {value}')

        return '\n'.join(lines) + '\n'


_FIELDS = {field.name: field.type for field in fields(RunConfig)}


def normalize_key(key: str) -> str:
    return key.strip().lstrip('-').replace('-', '_')


def parse_value(key: str, raw: Any, where: str = '') -> Any:
    """
    Converts a raw value to the type of configuration key ``key``.

    Raises
    ------
    :class:`ConfigError`
        If the key is unknown or the value does not parse.
    """
    key = normalize_key(key)

    if key not in _FIELDS:
        raise ConfigError(f'Unknown configuration key {key!r}{where}')

    kind = _FIELDS[key]

    if not isinstance(raw, str):
        return kind(raw)

    text = raw.strip().strip('"\'')

    if kind is bool:
        if text.lower() in _TRUE:
            return True
        if text.lower() in _FALSE:
            return False
        raise ConfigError(f'{key} expects a boolean, got {raw!r}{where}')

    try:
        return kind(text)
    except ValueError as error:
        raise ConfigError(f'{key} expects {kind.__name__}, got {raw!r}{where}') from error


def parse_config_text(text: str, source: str = '<config>') -> Dict[str, Any]:
    """
    Parses ``key = value`` lines.

    Raises
    ------
    :class:`ConfigError`
        On malformed lines, unknown keys or invalid values. The message names the line.
    """
    values = {}

    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split('#', 1)[0].strip()

        if not line:
            continue

        where = f' ({source}:{number})'

        if '=' not in line:
            raise ConfigError(f'Expected "key = value"{where}, got {line!r}')

        key, raw = line.split('=', 1)
        values[normalize_key(key)] = parse_value(key, raw, where)

    return values


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """
    Builds the effective configuration: defaults, then the file at ``path``, then ``overrides``.
    """
    values: Dict[str, Any] = {}

    if path is not None:
        path = Path(path)

        try:
            text = path.read_text(encoding='utf-8')
        except OSError as error:
            raise ConfigError(f'Cannot read config file {path}: {error}') from error

        values.update(parse_config_text(text, str(path)))

    for key, raw in (overrides or {}).items():
        values[normalize_key(key)] = parse_value(key, raw, ' (command line)')

    return RunConfig.from_dict(values)


def write_config(cfg: RunConfig, path: Union[str, Path]):
    Path(path).write_text(cfg.to_text(), encoding='utf-8')
    _log.debug('Wrote effective configuration to %s', path)


def add_arguments(parser: argparse.ArgumentParser):
    """ Registers one flag per configuration key. Booleans get a ``--no-`` twin. """
    group = parser.add_argument_group('configuration')

    for key, kind in _FIELDS.items():
        flag = '--' + key.replace('_', '-')

        if kind is bool:
            group.add_argument(flag, dest=_FLAG_PREFIX + key, action=argparse.BooleanOptionalAction, default=None)
        else:
            group.add_argument(flag, dest=_FLAG_PREFIX + key, default=None, metavar=kind.__name__.upper())


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    """ Collects the configuration flags that were given on the command line. """
    return {name[len(_FLAG_PREFIX):]: value for name, value in vars(args).items()
            if name.startswith(_FLAG_PREFIX) and value is not None}
