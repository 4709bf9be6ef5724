import argparse
import json

import pytest

from protomem.__main__ import EXIT_CONFIG, EXIT_FAILED, EXIT_NUMERIC, EXIT_OK, _run, main
from protomem.errors import TrainingAborted

TINY = '''
# a run small enough for the test suite
layers = 1
d_model = 16
heads = 2
ffn_dim = 32
d_feat = 8
m = 4
t_bank = 3
stride = 1
topk = 2
batch = 8
train_samples = 64
val_samples = 16
test_samples = 0
warmup = 2
constant_until = 10
decay_until = 20
steps = 6
trials = 200
'''

SMALL_VERIFY = ['--value-instances', '10', '--bank-histories', '50', '--identity-configs', '2']


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / 'tiny.cfg'
    path.write_text(TINY, encoding='utf-8')
    return path


@pytest.fixture
def trained_run(config_file, tmp_path):
    out = tmp_path / 'run'
    assert main(['train', '--config', str(config_file), '--out', str(out)]) == EXIT_OK
    return out


def test_verify_passes(tmp_path, capsys):
    code = main(['verify', '--trials', '500', '--out', str(tmp_path)] + SMALL_VERIFY)
    printed = capsys.readouterr().out

    assert code == EXIT_OK
    assert printed.count('max_ratio ≤ 1: PASS') == 2
    assert json.loads((tmp_path / 'verify.json').read_text(encoding='utf-8'))['bounds'][0]['trials'] == 500


def test_verify_fault_injection_fails(tmp_path, capsys):
    code = main(['verify', '--trials', '100', '--fault-injection', '--out', str(tmp_path)] + SMALL_VERIFY)

    assert code == EXIT_FAILED
    assert 'oracle value_prototypes: FAIL' in capsys.readouterr().out
    assert json.loads((tmp_path / 'run_meta.json').read_text(encoding='utf-8'))['exit_code'] == EXIT_FAILED


def test_train_writes_its_outputs(capsys, trained_run):
    for name in ('config.cfg', 'metrics.jsonl', 'checkpoint.pmac', 'run_meta.json'):
        assert (trained_run / name).is_file()

    records = [json.loads(line) for line in (trained_run / 'metrics.jsonl').read_text(encoding='utf-8').splitlines()]

    assert [record['step'] for record in records] == [1, 2, 3, 4, 5, 6]
    assert 'trained 6 steps' in capsys.readouterr().out


def test_resume_counts_total_steps(trained_run, config_file, tmp_path):
    out = tmp_path / 'resumed'
    code = main(['train', '--config', str(config_file), '--steps', '8', '--resume', str(trained_run / 'checkpoint.pmac'),
                 '--out', str(out)])
    records = (out / 'metrics.jsonl').read_text(encoding='utf-8').splitlines()

    assert code == EXIT_OK
    assert [json.loads(line)['step'] for line in records] == [7, 8]


def test_resume_echoes_the_checkpoint_config(trained_run, config_file, tmp_path):
    out = tmp_path / 'resumed'
    code = main(['train', '--config', str(config_file), '--steps', '8', '--resume', str(trained_run / 'checkpoint.pmac'),
                 '--out', str(out)])
    echoed = (out / 'config.cfg').read_text(encoding='utf-8')
    original = (trained_run / 'config.cfg').read_text(encoding='utf-8')

    assert code == EXIT_OK
    assert echoed == original.replace('steps = 6', 'steps = 8')


def test_resume_rejects_conflicting_overrides(trained_run, config_file, tmp_path):
    out = tmp_path / 'resumed'
    code = main(['train', '--config', str(config_file), '--m', '8', '--resume', str(trained_run / 'checkpoint.pmac'),
                 '--out', str(out)])

    assert code == EXIT_CONFIG
    assert not (out / 'config.cfg').exists()


def test_identical_train_runs_are_bitwise_identical(config_file, tmp_path):
    for name in ('first', 'second'):
        assert main(['train', '--config', str(config_file), '--seed', '5', '--out', str(tmp_path / name)]) == EXIT_OK

    for name in ('checkpoint.pmac', 'metrics.jsonl', 'config.cfg'):
        assert (tmp_path / 'first' / name).read_bytes() == (tmp_path / 'second' / name).read_bytes()


def test_eval_and_inspect(trained_run, config_file, capsys):
    code = main(['eval', '--config', str(config_file), '--checkpoint', str(trained_run / 'checkpoint.pmac'),
                 '--out', str(trained_run), '--profile'])
    results = json.loads((trained_run / 'eval.json').read_text(encoding='utf-8'))

    assert code == EXIT_OK
    assert results['val']['samples'] == 16
    assert (trained_run / 'memory_profile.csv').is_file()

    capsys.readouterr()

    assert main(['inspect', str(trained_run / 'checkpoint.pmac')]) == EXIT_OK
    assert 'digest ok, step 6' in capsys.readouterr().out


def test_inspect_rejects_a_corrupt_checkpoint(trained_run, capsys):
    path = trained_run / 'checkpoint.pmac'
    data = bytearray(path.read_bytes())
    data[-1] ^= 0xFF
    path.write_bytes(bytes(data))

    assert main(['inspect', str(path)]) == EXIT_FAILED
    assert 'digest' in capsys.readouterr().out


def test_invalid_configuration_exits_with_config_code(config_file, tmp_path):
    assert main(['train', '--config', str(config_file), '--heads', '3', '--out', str(tmp_path)]) == EXIT_CONFIG
    assert main(['train', '--config', str(tmp_path / 'missing.cfg'), '--out', str(tmp_path)]) == EXIT_CONFIG


def test_training_abort_exits_with_numeric_code(capsys):
    def handler(args):
        raise TrainingAborted(4, {'step': 4, 'loss': float('nan')}, 'loss is not finite')

    assert _run(handler, argparse.Namespace()) == EXIT_NUMERIC
    assert json.loads(capsys.readouterr().out)['step'] == 4


def test_tiny_ablation(config_file, tmp_path):
    code = main(['ablate', '--config', str(config_file), '--steps', '2', '--axis', 'mode=pma,baseline', '--seeds', '0',
                 '--out', str(tmp_path)])

    assert code == EXIT_OK
    assert len((tmp_path / 'ablation_summary.csv').read_text(encoding='utf-8').splitlines()) == 5


def test_bench(tmp_path):
    code = main(['bench', '--d-model', '8', '--heads', '2', '--t-k', '4', '--bench-m', '0,2', '--out', str(tmp_path)])

    assert code == EXIT_OK
    assert len((tmp_path / 'bench.csv').read_text(encoding='utf-8').splitlines()) == 3
