import csv
import json
import math

import numpy as np
import pytest

from protomem.analysis import (bench_attention, bound_ratio, cell_label, check_bank_replay, check_baseline_identity,
                               check_value_prototypes, expected_bank_steps, memory_usage_profile, perturbed_value_builder,
                               profile_from_traces, run_ablation_grid, run_oracle_suite, summarize_ablation,
                               verify_lipschitz_bound, write_bench_csv, write_profile_csv, write_summary_csv)
from protomem.attention import AttentionTrace
from protomem.captioner import Captioner
from protomem.config import RunConfig
from protomem.errors import ContractError
from protomem.prototypes import PrototypeMemory
from protomem.trainkit import evaluate, train


@pytest.mark.parametrize('scaled', [False, True])
def test_lipschitz_bound_holds(scaled):
    report = verify_lipschitz_bound(trials=10000, seed=3, scaled=scaled)

    assert report.passed
    assert 0 < report.max_ratio <= 1 + 1e-9
    assert report.to_dict()['trials'] == 10000


def test_fixed_width_bound_check():
    report = verify_lipschitz_bound(d=4, n_keys=8, trials=500, eps_max=0.5)

    assert report.passed and report.violating_trial is None


def test_zero_query_has_zero_ratio():
    keys = np.eye(3)

    assert bound_ratio(np.zeros(3), keys, 0, np.ones(3), 0.1) == 0.0


def test_bound_ratio_single_key_is_zero():
    assert bound_ratio(np.ones(2), np.ones((1, 2)), 0, np.array([1.0, 0.0]), 1.0) == pytest.approx(0.0)


def test_value_prototypes_match_the_oracle():
    assert check_value_prototypes(200).passed


def test_perturbed_builder_is_caught():
    check = check_value_prototypes(20, builder=perturbed_value_builder)

    assert not check.passed
    assert check.record['error'] > 1e-12


@pytest.mark.parametrize('pushed, capacity, stride, refreshing, expected', [
    (list(range(1, 11)), 4, 2, True, ([9, 10], [4, 6, 8, 10])),
    (list(range(1, 6)), 3, 1, False, ([3, 4, 5], [3, 4, 5])),
    ([2, 5], 3, 1, True, ([2, 5], [])),
    ([1, 2, 3], 3, 3, True, ([], [3])),
])
def test_expected_bank_steps(pushed, capacity, stride, refreshing, expected):
    assert expected_bank_steps(pushed, capacity, stride, refreshing) == expected


def test_bank_replay_matches_closed_form():
    assert check_bank_replay(1000).passed


def test_baseline_identity():
    check = check_baseline_identity(20)

    assert check.passed, check.detail


def test_oracle_suite_fault_injection():
    checks = {check.name: check for check in run_oracle_suite(fault_injection=True, value_instances=10,
                                                                bank_histories=50, identity_configs=2)}

    assert not checks['value_prototypes'].passed
    assert checks['bank_replay'].passed and checks['baseline_identity'].passed


def test_profile_from_traces_by_hand(tmp_path):
    first = AttentionTrace(np.array([[0.5, 0.25, 0.25], [0.2, 0.4, 0.4]]), 1)
    second = AttentionTrace(np.array([[0.2, 0.4, 0.4]]), 1)
    points = profile_from_traces([[first], [second]])

    assert [point.position for point in points] == [0, 1]
    assert [point.count for point in points] == [2, 1]
    assert points[0].mean == pytest.approx(0.5)
    assert points[0].std == pytest.approx(1 / 6)
    assert points[1].mean == pytest.approx(1 / 3)

    write_profile_csv(points, tmp_path / 'profile.csv')
    with (tmp_path / 'profile.csv').open(encoding='utf-8') as handle:
        rows = list(csv.reader(handle))

    assert rows[0] == ['position', 'mean', 'std']
    assert len(rows) == 3


def test_memory_usage_profile(tiny_config):
    model = Captioner(tiny_config.model_config(), seed=0)
    samples = tiny_config.dataset().val[:3]

    with pytest.raises(ContractError):
        memory_usage_profile(model, samples)

    model.install_memories({slot: PrototypeMemory.zeros(tiny_config.m, model.cfg.head_dim)
                            for slot in model.cfg.memory_slot_keys()})
    points = memory_usage_profile(model, samples)

    assert points and points[0].count == 3
    assert all(0.0 <= point.mean <= 1.0 for point in points)


def test_bench_attention(tmp_path):
    with pytest.raises(ContractError):
        bench_attention(repeats=4)

    rows = bench_attention((4, 8), (0, 2), d_model=8, heads=2)

    assert [(row.t_k, row.m) for row in rows] == [(4, 0), (4, 2), (8, 0), (8, 2)]
    assert all(row.median_us > 0 and row.p95_us >= row.median_us for row in rows)

    write_bench_csv(rows, tmp_path / 'bench.csv')

    assert (tmp_path / 'bench.csv').read_text(encoding='utf-8').splitlines()[0] == 't_k,m,median_us,p95_us'


def test_cell_labels():
    assert cell_label({}) == 'base'
    assert cell_label({'mode': 'pma', 'm': 4}) == 'm=4,mode=pma'


def test_tiny_ablation_grid(tiny_config, tmp_path):
    report = run_ablation_grid(tiny_config, {'mode': ['pma', 'baseline']}, seeds=(0, 1), steps=2)

    assert [(row['cell'], row['seed']) for row in report.rows] == [
        ('mode=baseline', 0), ('mode=baseline', 1), ('mode=pma', 0), ('mode=pma', 1)]
    assert all(row['config']['steps'] == 2 for row in report.rows)
    assert all(row['test']['samples'] == 0 for row in report.rows)

    summary = summarize_ablation(report)

    assert {(entry['cell'], entry['split']) for entry in summary} == {
        ('mode=baseline', 'val'), ('mode=baseline', 'test'), ('mode=pma', 'val'), ('mode=pma', 'test')}
    assert all(entry['seeds'] == 2 and not math.isnan(entry['token_acc_mean']) for entry in summary
               if entry['split'] == 'val')

    report.to_json(tmp_path / 'ablation.json')
    report.to_csv(tmp_path / 'ablation.csv')
    write_summary_csv(summary, tmp_path / 'summary.csv')

    assert json.loads((tmp_path / 'ablation.json').read_text(encoding='utf-8'))['axes'] == {'mode': ['pma', 'baseline']}
    assert len((tmp_path / 'ablation.csv').read_text(encoding='utf-8').splitlines()) == 5


def direct_run(cfg):
    dataset = cfg.dataset()
    model = train(cfg, dataset).state.model
    return {'val': evaluate(model, dataset.val, 'val', beam=cfg.beam).to_dict(),
            'test': evaluate(model, dataset.test, 'test', beam=cfg.beam).to_dict()}


def test_single_cell_grid_matches_a_direct_run(tiny_config):
    row, = run_ablation_grid(tiny_config, {'mode': ['pma']}, seeds=(3,), steps=4).rows
    expected = direct_run(tiny_config.replace(mode='pma', seed=3, steps=4))

    assert row['config'] == tiny_config.replace(mode='pma', seed=3, steps=4).to_dict()
    assert row['val'] == expected['val']
    assert row['test']['samples'] == expected['test']['samples'] == 0


def test_baseline_cell_matches_a_memoryless_run(tiny_config):
    row, = run_ablation_grid(tiny_config, {'mode': ['baseline']}, seeds=(1,)).rows
    expected = direct_run(tiny_config.replace(mode='pma', m=0, seed=1))

    assert row['val'] == expected['val']


@pytest.mark.slow
def test_prototype_memory_holds_up_on_held_out_pairs(tmp_path):
    base = RunConfig(n_colors=4, n_objects=6, n_scenes=3, holdout='red:dog,blue:cat', train_samples=2000, steps=5000)
    report = run_ablation_grid(base, {'mode': ['pma', 'baseline', 'learnable-mem']}, seeds=range(5))
    summary = summarize_ablation(report)
    write_summary_csv(summary, tmp_path / 'summary.csv')
    means = {entry['cell']: entry['exact_match_mean'] for entry in summary if entry['split'] == 'test'}

    assert set(means) == {'mode=pma', 'mode=baseline', 'mode=learnable-mem'}
    assert means['mode=pma'] >= means['mode=baseline'] - 0.02
    assert len((tmp_path / 'summary.csv').read_text(encoding='utf-8').splitlines()) == 7
