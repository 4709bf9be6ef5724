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

The training loop.

Every step runs a teacher-forced forward pass, pushes the detached self-attention keys and values of
every memory-carrying (layer, head) into its bank, refreshes prototypes when the banks say so, and
takes an Adam step on the cross-entropy loss.
"""
import logging
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Sequence

import numpy as np

from .attention import AttentionTrace, memory_attention_score
from .captioner import Captioner, MemoryMode
from .config import RunConfig
from .dataset import IGNORE_INDEX, ToyDataset, ToySample, collate
from .errors import ConfigError, NonFiniteError, SizeError, TrainingAborted
from .events import EventDispatcher, PrototypesRefreshed, StepCompleted, TrainingAbortedEvent
from .membank import MemoryBankGrid
from .numerics import backward, cross_entropy, no_grad
from .prototypes import compute_prototype_grid
from .schedule import lr_at
from .stats import SLOT_NAMES, EvalMetrics
from .utils import derive_seed

_log = logging.getLogger(__name__)

MODEL_SEED_PATH = 1
SAMPLER_SEED_PATH = 2
REFRESH_SEED_PATH = 3


class Adam:
    """
    Adam with bias correction. Parameters are updated in place.

    Parameters
    ----------
    params: Dict[:class:`str`, :class:`~protomem.numerics.Tensor`]
        The parameters to optimize, by name.
    beta1: :class:`float`
    beta2: :class:`float`
    eps: :class:`float`
    """
    __slots__ = ('params', 'beta1', 'beta2', 'eps', 't', 'm', 'v')

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1: float = beta1
        self.beta2: float = beta2
        self.eps: float = eps
        self.t: int = 0
        self.m: Dict[str, np.ndarray] = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v: Dict[str, np.ndarray] = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, grads: Dict[str, np.ndarray], lr: float):
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t

        for name, param in self.params.items():
            grad = grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            param.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


class TrainState:
    """
    Everything a run needs to take its next step.

    Attributes
    ----------
    config: :class:`~protomem.config.RunConfig`
    step: :class:`int`
        The number of completed steps.
    model: :class:`~protomem.captioner.Captioner`
    optimizer: :class:`Adam`
    banks: Optional[:class:`~protomem.membank.MemoryBankGrid`]
        ``None`` unless the model distills prototypes from banks.
    rng: :class:`numpy.random.Generator`
        Draws the training batches.
    refresh_count: :class:`int`
        The number of prototype refreshes so far.
    """
    __slots__ = ('config', 'step', 'model', 'optimizer', 'banks', 'rng', 'refresh_count')

    def __init__(self, config: RunConfig, step: int, model: Captioner, optimizer: Adam,
                 banks: Optional[MemoryBankGrid], rng: np.random.Generator, refresh_count: int = 0):
        self.config: RunConfig = config
        self.step: int = step
        self.model: Captioner = model
        self.optimizer: Adam = optimizer
        self.banks: Optional[MemoryBankGrid] = banks
        self.rng: np.random.Generator = rng
        self.refresh_count: int = refresh_count

    @classmethod
    def fresh(cls, config: RunConfig) -> 'TrainState':
        """ Builds the state of a run that has not taken any step yet. """
        model = Captioner(config.model_config(), seed=derive_seed(config.seed, MODEL_SEED_PATH))
        slots = model.cfg.memory_slot_keys()
        banks = None

        if model.cfg.mode == MemoryMode.PMA and slots:
            banks = MemoryBankGrid(slots, config.t_bank, config.stride)

        rng = np.random.default_rng(derive_seed(config.seed, SAMPLER_SEED_PATH))
        return cls(config, 0, model, Adam(model.params), banks, rng)

    def __repr__(self):
        return f'<TrainState step={self.step} refreshes={self.refresh_count} banks={len(self.banks or ())}>'


class TrainResult(NamedTuple):
    state: TrainState
    log: List[Dict[str, Any]]


def _layer_traces(traces: Dict[int, List[AttentionTrace]]) -> List[AttentionTrace]:
    return [AttentionTrace.mean_over_heads(heads) for heads in traces.values() if heads[0].memory_col_count > 0]


def mean_memory_score(traces: Dict[int, List[AttentionTrace]], rows: Iterable[int]) -> Optional[float]:
    """
    The memory attention score averaged over the given query rows, or ``None`` if no layer used memory.
    """
    layers = _layer_traces(traces)

    if not layers:
        return None

    scores = [memory_attention_score(layers, row)[1] for row in rows]
    return float(np.mean(scores)) if scores else None


def _parameter_norms(state: TrainState) -> Dict[str, float]:
    return {name: float(np.linalg.norm(tensor.data)) for name, tensor in state.model.params.items()}


class Trainer:
    """
    Drives a :class:`TrainState` over a dataset and dispatches training events.

    Parameters
    ----------
    state: :class:`TrainState`
        The state to advance. It is mutated in place.
    dataset: :class:`~protomem.dataset.ToyDataset`
        Batches are drawn from its train split.
    """
    __slots__ = ('state', 'dataset', 'dispatcher', '_last_loss')

    def __init__(self, state: TrainState, dataset: ToyDataset):
        if not dataset.train:
            raise ConfigError('Cannot train on an empty train split')

        self.state: TrainState = state
        self.dataset: ToyDataset = dataset
        self.dispatcher: EventDispatcher = EventDispatcher()
        self._last_loss: Optional[float] = None

    def add_event_hook(self, *hooks, event=None):
        self.dispatcher.add_event_hook(*hooks, event=event)

    def add_event_hooks(self, cls: object):
        self.dispatcher.add_event_hooks(cls)

    def _refresh(self, step: int) -> bool:
        state, cfg = self.state, self.state.config
        model = state.model
        try:
            memories = compute_prototype_grid(state.banks, cfg.m, cfg.topk, derive_seed(cfg.seed, REFRESH_SEED_PATH),
                                              state.refresh_count, step=step, normalize=cfg.normalize_weights,
                                              scope=cfg.cluster_scope, max_iters=cfg.kmeans_iters, tol=cfg.kmeans_tol,
                                              previous=model.memories)
        except SizeError as error:
            raise ConfigError(f'topk = {cfg.topk} cannot be served by the memory banks at step {step}: {error}') from error

        fresh = sorted(slot for slot, memory in memories.items() if memory.built_at_step == step)
        skipped = sorted(set(state.banks) - set(fresh))

        model.install_memories(memories)
        state.banks.mark_all_refreshed()
        state.banks.slide_all()
        self.dispatcher.dispatch(PrototypesRefreshed(step, state.refresh_count, fresh, skipped))
        _log.info('[Refresh:%d] Installed prototypes at step %d (%d slots, %d skipped)',
                  state.refresh_count, step, len(fresh), len(skipped))
        state.refresh_count += 1
        return True

    def _abort(self, step: int, lr: float, error: Exception):
        snapshot = {'step': step, 'last_finite_loss': self._last_loss, 'lr': lr,
                    'parameter_norms': _parameter_norms(self.state), 'error': str(error)}
        _log.error('[Train:%d] Non-finite values, aborting: %s', step, error)
        self.dispatcher.dispatch(TrainingAbortedEvent(step, snapshot))
        raise TrainingAborted(step, snapshot, str(error)) from error

    def train_step(self) -> StepCompleted:
        """
        Runs one step.

        Raises
        ------
        :class:`~protomem.errors.TrainingAborted`
            If the loss or any intermediate value is not finite.
        """
        state, cfg = self.state, self.state.config
        model, train = state.model, self.dataset.train
        step = state.step + 1
        lr = lr_at(step, cfg.schedule())

        indices = state.rng.choice(len(train), size=min(cfg.batch, len(train)), replace=False)
        batch = collate([train[int(index)] for index in indices])
        rows = np.flatnonzero(batch.targets.reshape(-1) != IGNORE_INDEX)

        try:
            out = model.forward(batch.features, batch.inputs, batch.lengths)
            refresh = False

            if state.banks is not None:
                pushes = {slot: (out.activations[slot[0]][0][slot[1]][rows], out.activations[slot[0]][1][slot[1]][rows])
                          for slot in state.banks}

                if state.banks.push_all(step, pushes):
                    refresh = self._refresh(step)

            loss = cross_entropy(out.logits, batch.targets.reshape(-1), ignore_index=IGNORE_INDEX)

            if not np.isfinite(loss.item()):
                raise NonFiniteError(f'loss is {loss.item()}')

            grads = backward(loss)
            state.optimizer.step({name: grads.get(param.node, np.zeros_like(param.data))
                                  for name, param in model.params.items()}, lr)

            for name, param in model.params.items():
                if not np.isfinite(param.data).all():
                    raise NonFiniteError(f'parameter {name} is not finite after the update')
        except NonFiniteError as error:
            self._abort(step, lr, error)

        targets = batch.targets.reshape(-1)[rows]
        token_acc = float(np.mean(np.argmax(out.logits.data[rows], axis=1) == targets))
        event = StepCompleted(step, loss.item(), lr, token_acc, mean_memory_score(out.traces, rows), refresh)

        state.step = step
        self._last_loss = event.loss
        _log.debug('[Train:%d] loss=%.6f lr=%.3g token_acc=%.4f', step, event.loss, lr, token_acc)
        self.dispatcher.dispatch(event)
        return event

    def train(self, steps: int) -> List[Dict[str, Any]]:
        """ Runs ``steps`` steps and returns their metrics records. """
        log = []

        for _ in range(steps):
            log.append(self.train_step().to_record())

        if log:
            _log.info('[Train:%d] Finished %d steps, last loss %.6f', self.state.step, len(log), log[-1]['loss'])

        return log


def train(config: RunConfig, dataset: Optional[ToyDataset] = None, steps: Optional[int] = None,
          hooks: Sequence[object] = (), state: Optional[TrainState] = None) -> TrainResult:
    """
    Trains a model.

    Parameters
    ----------
    config: :class:`~protomem.config.RunConfig`
        The run configuration.
    dataset: Optional[:class:`~protomem.dataset.ToyDataset`]
        Defaults to the dataset ``config`` describes.
    steps: Optional[:class:`int`]
        Defaults to ``config.steps``.
    hooks: Sequence[object]
        Objects with :func:`~protomem.events.listener` methods, or plain callables receiving every event.
    state: Optional[:class:`TrainState`]
        Resumes from this state instead of starting fresh.

    Returns
    -------
    :class:`TrainResult`
        The final state and one metrics record per step.
    """
    dataset = dataset if dataset is not None else config.dataset()
    trainer = Trainer(state if state is not None else TrainState.fresh(config), dataset)

    for hook in hooks:
        if callable(hook):
            trainer.add_event_hook(hook)
        else:
            trainer.add_event_hooks(hook)

    log = trainer.train(config.steps if steps is None else steps)
    return TrainResult(trainer.state, log)


def evaluate(model: Captioner, samples: Sequence[ToySample], split: str = 'val', batch_size: int = 64,
             beam: int = 1) -> EvalMetrics:
    """
    Evaluates a model on a split.

    Token accuracy is measured teacher-forced. Exact match and the per-slot accuracies compare decoded
    captions (greedy, or beam search if ``beam > 1``) with the references.

    Returns
    -------
    :class:`~protomem.stats.EvalMetrics`
    """
    if not samples:
        return EvalMetrics.empty(split)

    correct_tokens = total_tokens = exact = 0
    slot_hits = np.zeros(len(SLOT_NAMES))
    scores: List[float] = []
    slot_positions = (0, 1, 3)

    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            batch = collate(chunk)
            out = model.forward(batch.features, batch.inputs, batch.lengths)
            targets = batch.targets.reshape(-1)
            rows = np.flatnonzero(targets != IGNORE_INDEX)
            predicted = np.argmax(out.logits.data[rows], axis=1)
            correct_tokens += int((predicted == targets[rows]).sum())
            total_tokens += rows.size

            score = mean_memory_score(out.traces, rows)

            if score is not None:
                scores.append(score * rows.size)

            if beam == 1:
                decoded = model.generate_batch(batch.features)
            else:
                decoded = [model.generate(sample.features, beam=beam) for sample in chunk]

            for sample, tokens in zip(chunk, decoded):
                reference = sample.caption[1:]
                exact += int(tokens == reference)

                for slot, position in enumerate(slot_positions):
                    slot_hits[slot] += int(len(tokens) > position and tokens[position] == reference[position])

    metrics = EvalMetrics(split, len(samples), correct_tokens / total_tokens, exact / len(samples),
                          {name: float(hits / len(samples)) for name, hits in zip(SLOT_NAMES, slot_hits)},
                          float(sum(scores) / total_tokens) if scores else None)
    _log.info('Evaluated %s: token_acc=%.4f exact_match=%.4f', split, metrics.token_acc, metrics.exact_match)
    return metrics
