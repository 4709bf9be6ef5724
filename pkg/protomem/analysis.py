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

Verification, diagnostics and reporting.

This module checks the attention perturbation bound on random instances, replays memory bank
histories and value prototypes against independent oracles, profiles how much attention decoding
spends on memory, runs ablation grids and times attention with and without memory.
"""
import csv
import itertools
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .attention import (AttentionConfig, AttentionTrace, MultiHeadParams, attention_mask,
                        memory_attention_score, multi_head_attention)
from .captioner import Captioner, MemoryMode, ModelConfig
from .config import RunConfig
from .dataset import ToySample
from .errors import ContractError
from .membank import MemoryBank
from .numerics import Tensor, add, gelu, layer_norm, matmul, no_grad, take_rows
from .prototypes import PrototypeMemory, ValueBuilder, build_value_prototypes
from .trainkit import evaluate, train
from .utils import worker_count

_log = logging.getLogger(__name__)

PathLike = Union[str, Path]
IntRange = Union[int, Tuple[int, int]]

BOUND_SLACK = 1e-9
ORACLE_TOLERANCE = 1e-12


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = np.exp(x - x.max())
    return shifted / shifted.sum()


def _draw(rng: np.random.Generator, value: IntRange) -> int:
    if isinstance(value, int):
        return value
    low, high = value
    return int(rng.integers(low, high + 1))


class BoundTrialReport:
    """
    The outcome of :func:`verify_lipschitz_bound`.

    Attributes
    ----------
    trials: :class:`int`
    max_ratio: :class:`float`
        The largest observed ``‖Δsoftmax‖ / (ε‖q‖)``, divided by the bound of the mode.
        Values above ``1`` violate the bound.
    scaled: :class:`bool`
        Whether logits were scaled by ``1/sqrt(d)``.
    violating_trial: Optional[Dict[str, Any]]
        The worst trial (query, keys, perturbed index, ε and ratio) if it violated the bound.
    """
    __slots__ = ('trials', 'max_ratio', 'scaled', 'violating_trial')

    def __init__(self, trials: int, max_ratio: float, scaled: bool, violating_trial: Optional[Dict[str, Any]]):
        self.trials: int = trials
        self.max_ratio: float = max_ratio
        self.scaled: bool = scaled
        self.violating_trial: Optional[Dict[str, Any]] = violating_trial

    @property
    def passed(self) -> bool:
        return self.violating_trial is None

    def to_dict(self) -> Dict[str, Any]:
        return {'trials': self.trials, 'max_ratio': self.max_ratio, 'scaled': self.scaled,
                'violating_trial': self.violating_trial}

    def __repr__(self):
        return f'<BoundTrialReport trials={self.trials} max_ratio={self.max_ratio:.6f} scaled={self.scaled}>'


def bound_ratio(query: np.ndarray, keys: np.ndarray, index: int, direction: np.ndarray, eps: float,
                scaled: bool = False) -> float:
    """
    ``‖softmax(qKᵀ) - softmax(qK̃ᵀ)‖ / (ε‖q‖)`` where ``K̃`` moves key ``index`` by ``ε`` along ``direction``.

    In scaled mode logits are multiplied by ``1/sqrt(d)`` and the ratio is multiplied by ``sqrt(d)``,
    so the bound is ``1`` in both modes. A zero denominator gives a ratio of ``0``.
    """
    d = query.shape[0]
    factor = 1.0 / math.sqrt(d) if scaled else 1.0
    direction = direction / np.linalg.norm(direction)
    perturbed = keys.copy()
    perturbed[index] += eps * direction

    delta = np.linalg.norm(_softmax(factor * keys @ query) - _softmax(factor * perturbed @ query))
    denominator = eps * np.linalg.norm(query)

    if denominator == 0:
        return 0.0

    ratio = delta / denominator
    return ratio * math.sqrt(d) if scaled else ratio


def verify_lipschitz_bound(d: IntRange = (2, 16), n_keys: IntRange = (2, 32), trials: int = 10000,
                           eps_max: float = 2.0, seed: int = 0, scaled: bool = False) -> BoundTrialReport:
    """
    Checks on random instances that moving one key by ``ε`` changes the attention distribution of
    query ``q`` by at most ``ε‖q‖`` (or ``ε‖q‖/sqrt(d)`` with scaled logits).

    Parameters
    ----------
    d: Union[:class:`int`, Tuple[:class:`int`, :class:`int`]]
        The key width, or an inclusive range to draw it from per trial.
    n_keys: Union[:class:`int`, Tuple[:class:`int`, :class:`int`]]
        The number of keys, or an inclusive range.
    trials: :class:`int`
    eps_max: :class:`float`
        ``ε`` is drawn from ``(0, eps_max]``.
    seed: :class:`int`
    scaled: :class:`bool`
        Whether to scale logits by ``1/sqrt(d)``.

    Returns
    -------
    :class:`BoundTrialReport`
    """
    rng = np.random.default_rng(seed)
    worst, worst_record = 0.0, None

    for trial in range(trials):
        width, count = _draw(rng, d), _draw(rng, n_keys)
        query = rng.normal(size=width)
        keys = rng.normal(size=(count, width))
        index = int(rng.integers(count))
        eps = eps_max * (1.0 - rng.random())
        direction = rng.normal(size=width)
        ratio = bound_ratio(query, keys, index, direction, eps, scaled)

        if ratio > worst:
            worst = ratio

            if ratio > 1.0 + BOUND_SLACK:
                worst_record = {'trial': trial, 'query': query.tolist(), 'keys': keys.tolist(), 'index': index,
                                'eps': eps, 'direction': direction.tolist(), 'ratio': ratio}

    report = BoundTrialReport(trials, worst, scaled, worst_record)
    _log.info('Bound check (%s logits): %d trials, max ratio %.6f', 'scaled' if scaled else 'unscaled', trials, worst)
    return report


class ProfilePoint(NamedTuple):
    position: int
    mean: float
    std: float
    count: int


def profile_from_traces(samples: Sequence[Sequence[AttentionTrace]]) -> List[ProfilePoint]:
    """
    Averages memory attention scores per query position.

    Parameters
    ----------
    samples: Sequence[Sequence[:class:`AttentionTrace`]]
        For every sample, one trace per memory-carrying layer (head-averaged). Row ``t`` of every trace is
        the query of generation position ``t``.

    Returns
    -------
    List[:class:`ProfilePoint`]
        One point per position up to the longest sample.
    """
    per_position: Dict[int, List[float]] = {}

    for traces in samples:
        for position in range(traces[0].weights.shape[0]):
            per_position.setdefault(position, []).append(memory_attention_score(traces, position)[1])

    return [ProfilePoint(position, float(np.mean(scores)), float(np.std(scores)), len(scores))
            for position, scores in sorted(per_position.items())]


def memory_usage_profile(model: Captioner, samples: Sequence[ToySample], max_len: Optional[int] = None) -> List[ProfilePoint]:
    """
    The memory attention score of every generation position, averaged over samples and layers.

    Every sample is decoded greedily, then the generated prefix is run teacher-forced once to collect
    the attention traces of each generation step.

    Raises
    ------
    :class:`ContractError`
        If the model has no memory in use.
    """
    collected = []

    with no_grad():
        for sample in samples:
            generated = model.generate(sample.features, max_len=max_len)

            if not generated:
                continue

            prefix = [1] + generated[:-1]
            out = model.decode_teacher_forced(prefix, model.encode(sample.features))
            layers = [AttentionTrace.mean_over_heads(heads) for heads in out.traces.values()
                      if heads[0].memory_col_count > 0]

            if not layers:
                raise ContractError('Memory usage profile requires a model with memory installed')

            collected.append(layers)

    return profile_from_traces(collected)


def write_profile_csv(points: Sequence[ProfilePoint], path: PathLike):
    with Path(path).open('w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle)
        writer.writerow(['position', 'mean', 'std'])

        for point in points:
            writer.writerow([point.position, repr(point.mean), repr(point.std)])


class AblationReport:
    """
    Train-and-evaluate results over a grid of configuration changes.

    Attributes
    ----------
    axes: Dict[:class:`str`, List[Any]]
        The configuration keys that vary and their values.
    rows: List[Dict[str, Any]]
        One row per (cell, seed), sorted, each carrying the full configuration it ran with.
    """
    __slots__ = ('axes', 'rows')

    def __init__(self, axes: Dict[str, List[Any]], rows: List[Dict[str, Any]]):
        self.axes: Dict[str, List[Any]] = axes
        self.rows: List[Dict[str, Any]] = rows

    def to_json(self, path: PathLike):
        Path(path).write_text(json.dumps({'axes': self.axes, 'rows': self.rows}, sort_keys=True, indent=2) + '\n',
                              encoding='utf-8')

    def to_csv(self, path: PathLike):
        columns = ['cell', 'seed']

        for split in ('val', 'test'):
            columns += [f'{split}_token_acc', f'{split}_exact_match', f'{split}_mem_attn_score']

        with Path(path).open('w', newline='', encoding='utf-8') as handle:
            writer = csv.writer(handle)
            writer.writerow(columns + ['config'])

            for row in self.rows:
                values = [row['cell'], row['seed']]

                for split in ('val', 'test'):
                    metrics = row[split]
                    values += [metrics['token_acc'], metrics['exact_match'], metrics['mem_attn_score']]

                writer.writerow(values + [json.dumps(row['config'], sort_keys=True)])


def cell_label(delta: Mapping[str, Any]) -> str:
    return ','.join(f'{key}={value}' for key, value in sorted(delta.items())) or 'base'


def run_ablation_grid(base: RunConfig, axes: Mapping[str, Sequence[Any]], seeds: Sequence[int] = (0, 1, 2),
                      steps: Optional[int] = None) -> AblationReport:
    """
    Trains and evaluates every combination of ``axes`` values for every seed.

    Parameters
    ----------
    base: :class:`~protomem.config.RunConfig`
        The configuration every cell starts from.
    axes: Mapping[:class:`str`, Sequence[Any]]
        Configuration keys and the values to try, such as ``{'mode': ['pma', 'baseline']}``.
    seeds: Sequence[:class:`int`]
        Every cell runs once per seed. The seed also picks the dataset, so cells sharing a seed share data.
    steps: Optional[:class:`int`]
        Overrides ``base.steps``. Every row records the steps it actually ran.

    Returns
    -------
    :class:`AblationReport`
    """
    keys = sorted(axes)
    cells = [dict(zip(keys, values)) for values in itertools.product(*(list(axes[key]) for key in keys))]
    jobs = [(cell, seed) for cell in cells for seed in seeds]

    def run(job: Tuple[Dict[str, Any], int]) -> Dict[str, Any]:
        delta, seed = job
        changes = dict(delta, seed=seed)

        if steps is not None:
            changes['steps'] = steps

        cfg = base.replace(**changes)
        dataset = cfg.dataset()
        result = train(cfg, dataset, cfg.steps)
        model = result.state.model
        _log.info('Ablation cell %s seed %d done', cell_label(delta), seed)
        return {'cell': cell_label(delta), 'delta': delta, 'seed': seed, 'config': cfg.to_dict(),
                'val': evaluate(model, dataset.val, 'val', beam=cfg.beam).to_dict(),
                'test': evaluate(model, dataset.test, 'test', beam=cfg.beam).to_dict()}

    workers = min(worker_count(), len(jobs)) or 1

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            rows = list(executor.map(run, jobs))
    else:
        rows = [run(job) for job in jobs]

    rows.sort(key=lambda row: (row['cell'], row['seed']))
    return AblationReport({key: list(axes[key]) for key in keys}, rows)


def summarize_ablation(report: AblationReport) -> List[Dict[str, Any]]:
    """
    Mean and standard deviation over seeds of every cell and split.
    """
    grouped: Dict[Tuple[str, str], List[Dict[str, Any]]] = {}

    for row in report.rows:
        for split in ('val', 'test'):
            grouped.setdefault((row['cell'], split), []).append(row[split])

    summary = []

    for (cell, split), records in sorted(grouped.items()):
        entry = {'cell': cell, 'split': split, 'seeds': len(records)}

        for metric in ('exact_match', 'token_acc'):
            values = [record[metric] for record in records]
            entry[f'{metric}_mean'] = float(np.mean(values))
            entry[f'{metric}_std'] = float(np.std(values))

        summary.append(entry)

    return summary


def write_summary_csv(summary: Sequence[Dict[str, Any]], path: PathLike):
    columns = ['cell', 'split', 'seeds', 'exact_match_mean', 'exact_match_std', 'token_acc_mean', 'token_acc_std']

    with Path(path).open('w', newline='', encoding='utf-8') as handle:
        writer = csv.DictWriter(handle, fieldnames=columns)
        writer.writeheader()
        writer.writerows(summary)


class BenchRow(NamedTuple):
    t_k: int
    m: int
    median_us: float
    p95_us: float


def bench_attention(t_k_values: Sequence[int] = (16, 64, 256), m_values: Sequence[int] = (0, 16, 64),
                    d_model: int = 64, heads: int = 4, repeats: int = 5, seed: int = 0) -> List[BenchRow]:
    """
    Times causal self-attention forward passes with and without memory.

    ``m == 0`` runs the plain attention path. Timings are informational.

    Raises
    ------
    :class:`ContractError`
        If ``repeats < 5``.
    """
    if repeats < 5:
        raise ContractError(f'bench_attention needs at least 5 repeats, got {repeats}')

    rng = np.random.default_rng(seed)
    params = MultiHeadParams.init(d_model, rng)
    rows = []

    with no_grad():
        for t_k in t_k_values:
            x = Tensor(rng.normal(size=(t_k, d_model)))
            mask = attention_mask(1, t_k, t_k, causal=True)

            for m in m_values:
                cfg = AttentionConfig(d_model, heads, causal=True, memory_slots=m)
                memory = None

                if m > 0:
                    memory = [PrototypeMemory(rng.normal(size=(m, cfg.head_dim)), rng.normal(size=(m, cfg.head_dim)))
                              for _ in range(heads)]

                timings = []

                for _ in range(repeats):
                    started = time.perf_counter_ns()
                    multi_head_attention(x, x, params, cfg, memory=memory, mask=mask)
                    timings.append((time.perf_counter_ns() - started) / 1000.0)

                rows.append(BenchRow(t_k, m, float(np.median(timings)), float(np.percentile(timings, 95))))
                _log.debug('bench T_k=%d m=%d median %.1fus', t_k, m, rows[-1].median_us)

    return rows


def write_bench_csv(rows: Sequence[BenchRow], path: PathLike):
    with Path(path).open('w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle)
        writer.writerow(BenchRow._fields)
        writer.writerows(rows)


class OracleCheck(NamedTuple):
    name: str
    passed: bool
    detail: str
    record: Optional[Dict[str, Any]]


def brute_force_value_prototypes(memory_keys: np.ndarray, bank_keys: np.ndarray, bank_values: np.ndarray,
                                 k: int, normalize: bool) -> np.ndarray:
    """ Scalar re-evaluation of exp(-distance) value interpolation, used as an oracle. """
    result = np.zeros((memory_keys.shape[0], bank_values.shape[1]))

    for i, prototype in enumerate(memory_keys.tolist()):
        distances = []

        for j, key in enumerate(bank_keys.tolist()):
            distances.append((math.sqrt(sum((a - b) ** 2 for a, b in zip(prototype, key))), j))

        nearest = sorted(distances)[:k]
        weights = [math.exp(-distance) for distance, _ in nearest]
        total = sum(weights)

        for weight, (_, j) in zip(weights, nearest):
            result[i] += (weight / total if normalize else weight) * bank_values[j]

    return result


def perturbed_value_builder(memory_keys, bank_keys, bank_values, k: int, normalize: bool) -> np.ndarray:
    """ A deliberately wrong value builder whose weights are off by one part per million. """
    return build_value_prototypes(memory_keys, bank_keys, bank_values, k, normalize) * (1.0 + 1e-6)


def check_value_prototypes(instances: int = 200, seed: int = 0,
                           builder: ValueBuilder = build_value_prototypes) -> OracleCheck:
    """ Compares ``builder`` against :func:`brute_force_value_prototypes` on random instances, both weight modes. """
    rng = np.random.default_rng(seed)
    worst = 0.0

    for instance in range(instances):
        n, d, m = int(rng.integers(1, 513)), int(rng.integers(2, 17)), int(rng.integers(1, 9))
        k = int(rng.integers(1, min(n, 32) + 1))
        bank_keys, bank_values = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        memory_keys = rng.normal(size=(m, d))

        for normalize in (False, True):
            error = float(np.abs(builder(memory_keys, bank_keys, bank_values, k, normalize)
                                 - brute_force_value_prototypes(memory_keys, bank_keys, bank_values, k, normalize)).max())
            worst = max(worst, error)

            if error > ORACLE_TOLERANCE:
                return OracleCheck('value_prototypes', False, f'instance {instance} differs by {error:.3g}',
                                   {'instance': instance, 'n': n, 'd': d, 'm': m, 'k': k, 'normalize': normalize,
                                    'error': error})

    return OracleCheck('value_prototypes', True, f'{instances} instances, max error {worst:.3g}', None)


def expected_bank_steps(pushed: Sequence[int], capacity: int, stride: int, refreshing: bool) -> Tuple[List[int], List[int]]:
    """
    The closed-form bank contents and refresh steps after pushing ``pushed`` steps.

    With ``refreshing``, every due refresh is followed by a slide: refreshes fall on pushes
    ``capacity, capacity + stride, ...`` and after the last refresh at push ``r`` the bank holds pushes
    ``r - capacity + stride + 1`` onwards. Without it, the bank holds the last ``capacity`` pushes.
    """
    n = len(pushed)

    if not refreshing:
        return list(pushed[max(0, n - capacity):]), list(pushed[capacity - 1:])

    refresh_counts = list(range(capacity, n + 1, stride))

    if not refresh_counts:
        return list(pushed), []

    last = refresh_counts[-1]
    return list(pushed[last - capacity + stride:]), [pushed[count - 1] for count in refresh_counts]


def check_bank_replay(histories: int = 1000, seed: int = 0) -> OracleCheck:
    """ Replays random push/refresh/slide histories and compares banks with :func:`expected_bank_steps`. """
    rng = np.random.default_rng(seed)

    for history in range(histories):
        capacity = int(rng.integers(1, 21))
        stride = int(rng.integers(1, capacity + 1))
        refreshing = bool(rng.random() < 0.8)
        steps = np.cumsum(rng.integers(1, 4, size=int(rng.integers(1, 4 * capacity + 10)))).tolist()
        bank = MemoryBank(capacity, stride)
        refreshes = []

        for step in steps:
            rows = int(rng.integers(1, 4))
            tags = (step * 10 + np.arange(rows, dtype=np.float64))[:, None]

            if bank.push_batch(step, tags, tags):
                refreshes.append(step)

                if refreshing:
                    bank.mark_refreshed()
                    bank.slide()

        contents, expected_refreshes = expected_bank_steps(steps, capacity, stride, refreshing)
        actual = [entry.step for entry in bank]
        aligned = True

        if len(bank):
            keys, values = bank.snapshot()
            aligned = np.array_equal(keys, values) and bool(np.all(np.diff(keys[:, 0]) > 0))

        if actual != contents or refreshes != expected_refreshes or not aligned:
            return OracleCheck('bank_replay', False, f'history {history} diverged from the replay',
                               {'history': history, 'capacity': capacity, 'stride': stride, 'refreshing': refreshing,
                                'steps': steps, 'contents': actual, 'expected_contents': contents,
                                'refreshes': refreshes, 'expected_refreshes': expected_refreshes})

    return OracleCheck('bank_replay', True, f'{histories} histories', None)


def plain_decoder_logits(model: Captioner, features: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """ The decoder forward pass of ``model`` written without any memory plumbing, used as an oracle. """
    cfg = model.cfg
    params = model.params
    batch, length = tokens.shape
    n_feat = features.shape[1]
    enc_out = model.encode_batch(features)
    attention_cfg = AttentionConfig(cfg.d_model, cfg.heads)
    self_mask = attention_mask(batch, length, length, causal=True)
    cross_mask = attention_mask(batch, length, n_feat)

    def norm(x, name):
        return layer_norm(x, params[f'{name}.g'], params[f'{name}.b'])

    def block(prefix):
        return MultiHeadParams(**{name: params[f'{prefix}.{name}'] for name in MultiHeadParams.NAMES})

    x = add(take_rows(params['tok_emb'], tokens.reshape(-1)), take_rows(params['pos_emb'], np.tile(np.arange(length), batch)))

    for layer in range(cfg.layers):
        prefix = f'dec.{layer}'
        h = norm(x, f'{prefix}.ln1')
        x = add(x, multi_head_attention(h, h, block(f'{prefix}.self'), AttentionConfig(cfg.d_model, cfg.heads, causal=True),
                                        mask=self_mask).output)
        h = norm(x, f'{prefix}.ln2')
        x = add(x, multi_head_attention(h, enc_out, block(f'{prefix}.cross'), attention_cfg, mask=cross_mask).output)
        h = norm(x, f'{prefix}.ln3')
        hidden = gelu(add(matmul(h, params[f'{prefix}.ffn1.w']), params[f'{prefix}.ffn1.b']))
        x = add(x, add(matmul(hidden, params[f'{prefix}.ffn2.w']), params[f'{prefix}.ffn2.b']))

    h = norm(x, 'dec.ln_f')
    return add(matmul(h, params['out.w']), params['out.b']).data


def _random_model_config(rng: np.random.Generator) -> ModelConfig:
    heads = int(rng.choice([1, 2]))
    return ModelConfig(layers=int(rng.integers(1, 3)), d_model=8 * heads, heads=heads, ffn_dim=16, vocab=12, max_len=6,
                       d_feat=6, memory_slots=int(rng.integers(0, 5)), memory_in_first_layer=bool(rng.random() < 0.5),
                       use_segment_embeddings=True, segment_per_head=bool(rng.random() < 0.5), mode=MemoryMode.PMA)


def check_baseline_identity(configs: int = 20, seed: int = 0) -> OracleCheck:
    """
    For random configurations, checks that:

    - a model without installed memory is bitwise identical to :func:`plain_decoder_logits`;
    - with zero segment embeddings and all-zero prototypes, the first memory layer attends to its inputs
      exactly like the plain model once the memory columns are removed and rows renormalized.
    """
    rng = np.random.default_rng(seed)

    with no_grad():
        for index in range(configs):
            cfg = _random_model_config(rng)
            model = Captioner(cfg, seed=index)
            batch, length = int(rng.integers(1, 4)), int(rng.integers(1, cfg.max_len + 1))
            features = rng.normal(size=(batch, 3, cfg.d_feat))
            tokens = rng.integers(0, cfg.vocab, size=(batch, length))
            tokens[:, 0] = 1
            record = {'config': index, 'model': vars(cfg).copy(), 'batch': batch, 'length': length}
            record['model']['mode'] = str(cfg.mode)

            baseline = model.forward(features, tokens)

            if not np.array_equal(baseline.logits.data, plain_decoder_logits(model, features, tokens)):
                return OracleCheck('baseline_identity', False, f'config {index}: memoryless forward differs', record)

            if not cfg.memory_layers():
                continue

            model.install_memories({slot: PrototypeMemory.zeros(cfg.memory_slots, cfg.head_dim)
                                    for slot in cfg.memory_slot_keys()})
            first = cfg.memory_layers()[0]
            augmented = model.forward(features, tokens).traces[first]

            for head, (plain, extended) in enumerate(zip(baseline.traces[first], augmented)):
                inputs = extended.input_weights / extended.input_weights.sum(axis=1, keepdims=True)

                if extended.memory_col_count != cfg.memory_slots or not np.allclose(inputs, plain.weights, rtol=0, atol=1e-12):
                    record['head'] = head
                    return OracleCheck('baseline_identity', False,
                                       f'config {index}: zero prototypes change input attention in layer {first}', record)

    return OracleCheck('baseline_identity', True, f'{configs} configurations', None)


def run_oracle_suite(seed: int = 0, fault_injection: bool = False, value_instances: int = 200,
                     bank_histories: int = 1000, identity_configs: int = 20) -> List[OracleCheck]:
    """
    Runs every oracle check.

    Parameters
    ----------
    seed: :class:`int`
    fault_injection: :class:`bool`
        Swaps in :func:`perturbed_value_builder`, so the value prototype check must fail.
    value_instances: :class:`int`
    bank_histories: :class:`int`
    identity_configs: :class:`int`

    Returns
    -------
    List[:class:`OracleCheck`]
    """
    builder: Callable = perturbed_value_builder if fault_injection else build_value_prototypes
    checks = [check_value_prototypes(value_instances, seed, builder),
              check_bank_replay(bank_histories, seed),
              check_baseline_identity(identity_configs, seed)]

    for check in checks:
        (_log.info if check.passed else _log.error)('Oracle %s: %s (%s)', check.name,
                                                     'passed' if check.passed else 'FAILED', check.detail)

    return checks
