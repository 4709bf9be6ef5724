import numpy as np
import pytest

from protomem.config import RunConfig
from protomem.errors import ConfigError, TrainingAborted
from protomem.events import PrototypesRefreshed, StepCompleted, TrainingAbortedEvent, listener
from protomem.numerics import Tensor
from protomem.trainkit import Adam, Trainer, TrainState, evaluate, train


class Recorder:
    def __init__(self):
        self.steps = []
        self.refreshes = []
        self.aborts = []

    @listener(StepCompleted)
    def on_step(self, event):
        self.steps.append(event.step)

    @listener(PrototypesRefreshed)
    def on_refresh(self, event):
        self.refreshes.append(event)

    @listener(TrainingAbortedEvent)
    def on_abort(self, event):
        self.aborts.append(event)


def test_adam_moves_against_the_gradient():
    param = Tensor([1.0, -1.0], requires_grad=True)
    optimizer = Adam({'p': param})
    optimizer.step({'p': np.array([2.0, -3.0])}, lr=0.1)

    np.testing.assert_allclose(param.data, [0.9, -0.9])
    assert optimizer.t == 1


def test_prototypes_refresh_on_the_bank_schedule(tiny_config):
    recorder = Recorder()
    result = train(tiny_config, hooks=[recorder])
    state = result.state

    assert recorder.steps == [1, 2, 3, 4, 5, 6]
    assert [event.step for event in recorder.refreshes] == [3, 4, 5, 6]
    assert [event.refresh_index for event in recorder.refreshes] == [0, 1, 2, 3]
    assert state.refresh_count == 4
    assert sorted(state.model.memories) == [(0, 0), (0, 1)]
    assert all(memory.built_at_step == 6 for memory in state.model.memories.values())
    assert [record['refresh'] for record in result.log] == [False, False, True, True, True, True]


def test_memory_score_appears_once_prototypes_exist(tiny_config):
    log = train(tiny_config).log

    assert [record['mem_attn_score'] is None for record in log] == [True, True, True, False, False, False]
    assert all(0.0 <= record['mem_attn_score'] <= 1.0 for record in log[3:])


def test_learning_rate_follows_the_schedule(tiny_config):
    log = train(tiny_config).log

    assert [record['lr'] for record in log[:3]] == pytest.approx([5e-4, 1e-3, 1e-3])


def test_baseline_runs_without_banks(tiny_config):
    result = train(tiny_config.replace(mode='baseline'))

    assert result.state.banks is None
    assert all(record['mem_attn_score'] is None and not record['refresh'] for record in result.log)


def test_learnable_memory_is_scored_from_the_first_step(tiny_config):
    result = train(tiny_config.replace(mode='learnable-mem'), steps=2)

    assert result.state.banks is None
    assert all(record['mem_attn_score'] is not None for record in result.log)


def test_training_is_deterministic(tiny_config):
    first, second = train(tiny_config), train(tiny_config)

    assert first.log == second.log

    for name, tensor in first.state.model.params.items():
        np.testing.assert_array_equal(tensor.data, second.state.model.params[name].data)


def test_thread_count_does_not_change_training(tiny_config, monkeypatch):
    config = tiny_config.replace(layers=2)
    serial = train(config).log
    monkeypatch.setenv('PMA_THREADS', '4')

    assert train(config).log == serial


def test_non_finite_values_abort_training(tiny_config):
    state = TrainState.fresh(tiny_config)
    state.model.params['out.w'].data[:] = np.inf
    trainer = Trainer(state, tiny_config.dataset())
    recorder = Recorder()
    trainer.add_event_hooks(recorder)

    with pytest.raises(TrainingAborted) as info:
        trainer.train_step()

    assert info.value.step == 1
    assert info.value.snapshot['last_finite_loss'] is None
    assert 'parameter_norms' in info.value.snapshot
    assert len(recorder.aborts) == 1
    assert state.step == 0


def test_empty_train_split_is_a_config_error(tiny_config):
    with pytest.raises(ConfigError):
        train(tiny_config.replace(train_samples=0))


def test_topk_larger_than_the_banks_is_a_config_error(tiny_config):
    with pytest.raises(ConfigError, match='topk'):
        train(tiny_config.replace(topk=10000))


def test_evaluate_reports_bounded_metrics(tiny_config):
    result = train(tiny_config)
    dataset = tiny_config.dataset()
    metrics = evaluate(result.state.model, dataset.val, 'val')

    assert metrics.samples == len(dataset.val)
    assert 0.0 <= metrics.token_acc <= 1.0
    assert 0.0 <= metrics.exact_match <= 1.0
    assert set(metrics.slot_acc) == {'color', 'object', 'scene'}
    assert 0.0 <= metrics.mem_attn_score <= 1.0
    assert evaluate(result.state.model, dataset.test, 'test').samples == 0


@pytest.mark.slow
def test_memorizes_a_small_training_set():
    config = RunConfig(batch=32, layers=2, d_model=64, m=64, t_bank=100, stride=25, train_samples=64, val_samples=0,
                       test_samples=0, steps=2000)
    result = train(config)
    metrics = evaluate(result.state.model, config.dataset().train, 'train')

    assert metrics.token_acc >= 0.99
    assert metrics.exact_match == 1.0
    assert result.state.refresh_count > 0


@pytest.mark.slow
def test_long_runs_are_reproducible():
    config = RunConfig(layers=2, d_model=32, heads=4, ffn_dim=64, d_feat=16, m=8, t_bank=20, stride=5, topk=4,
                       batch=16, train_samples=128, val_samples=0, test_samples=0, steps=150)

    assert train(config).log == train(config).log
