import argparse

import pytest

from protomem.captioner import MemoryMode
from protomem.config import (RunConfig, add_arguments, load_config, overrides_from_args, parse_config_text,
                             write_config)
from protomem.errors import ConfigError


def test_defaults():
    cfg = RunConfig()

    assert cfg.vocab_size == 4 + 4 + 6 + 3
    assert cfg.memory_mode is MemoryMode.PMA
    assert cfg.model_config().memory_slots == 64
    assert cfg.schedule().floor_lr == 1e-5
    assert cfg.holdout_pairs() == []


def test_parse_config_text():
    text = '''
    # a comment
    steps = 300
    mode = learnable-mem   # trailing comment
    normalize-weights = yes
    holdout = red:dog, blue:cat
    peak_lr = 5e-4
    '''
    values = parse_config_text(text)

    assert values == {'steps': 300, 'mode': 'learnable-mem', 'normalize_weights': True,
                      'holdout': 'red:dog, blue:cat', 'peak_lr': 5e-4}


@pytest.mark.parametrize('text, where', [
    ('steps 300', ':1'),
    ('\nunknown = 1', ':2'),
    ('steps = many', ':1'),
    ('segment_emb = maybe', ':1'),
])
def test_bad_lines_name_their_location(text, where):
    with pytest.raises(ConfigError, match=f'demo.cfg{where}'):
        parse_config_text(text, 'demo.cfg')


def test_overrides_win_over_the_file(tmp_path):
    path = tmp_path / 'run.cfg'
    path.write_text('steps = 10\nseed = 3\n', encoding='utf-8')
    cfg = load_config(path, {'steps': '20', 'first-layer-mem': False})

    assert (cfg.steps, cfg.seed, cfg.first_layer_mem) == (20, 3, False)


def test_missing_file_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / 'missing.cfg')


def test_written_config_reads_back(tmp_path):
    cfg = RunConfig(seed=4, mode='baseline', holdout='red:dog', sigma_feat=0.25, segment_emb=False)
    write_config(cfg, tmp_path / 'config.cfg')

    assert load_config(tmp_path / 'config.cfg') == cfg
    assert 'segment_emb = false' in (tmp_path / 'config.cfg').read_text(encoding='utf-8')


@pytest.mark.parametrize('changes', [
    {'mode': 'memoryless'},
    {'cluster_scope': 'global'},
    {'stride': 200},
    {'batch': 0},
    {'d_model': 30, 'heads': 4},
    {'warmup': 2000},
])
def test_invalid_values(changes):
    with pytest.raises(ConfigError):
        RunConfig(**changes)


def test_replace_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        RunConfig().replace(learning_rate=1.0)


def test_dict_round_trip():
    cfg = RunConfig(m=16, decay='linear')

    assert RunConfig.from_dict(cfg.to_dict()) == cfg


def test_command_line_flags():
    parser = argparse.ArgumentParser()
    add_arguments(parser)
    args = parser.parse_args(['--steps', '5', '--no-segment-emb', '--cluster-scope', 'joint'])

    assert overrides_from_args(args) == {'steps': '5', 'segment_emb': False, 'cluster_scope': 'joint'}
    assert load_config(None, overrides_from_args(args)).cluster_scope == 'joint'
