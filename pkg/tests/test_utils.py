import pytest

from protomem.errors import ConfigError
from protomem.utils import derive_seed, format_time, summarize, worker_count


def test_derived_seeds_are_stable_and_distinct():
    assert derive_seed(0, 1, 2, 3) == derive_seed(0, 1, 2, 3)
    assert len({derive_seed(0, layer, head, 0) for layer in range(3) for head in range(4)}) == 12
    assert 0 <= derive_seed(5) < 2 ** 32


def test_worker_count_defaults_to_one(monkeypatch):
    monkeypatch.delenv('PMA_THREADS', raising=False)
    assert worker_count() == 1

    monkeypatch.setenv('PMA_THREADS', '4')
    assert worker_count() == 4


@pytest.mark.parametrize('raw', ['zero', '0', '-2'])
def test_worker_count_rejects_bad_values(monkeypatch, raw):
    monkeypatch.setenv('PMA_THREADS', raw)

    with pytest.raises(ConfigError):
        worker_count()


def test_format_time():
    assert format_time(3725) == '01:02:05'


def test_summarize():
    assert summarize([]) == (0.0, 0.0, 0.0)
    assert summarize([1.0, 2.0, 6.0]) == (1.0, 3.0, 6.0)
