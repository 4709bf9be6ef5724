import math

import pytest

from protomem.errors import ConfigError, ContractError
from protomem.schedule import DecayMode, ScheduleConfig, lr_at

SCHEDULE = ScheduleConfig(warmup_steps=100, peak_lr=1e-3, constant_until=1000, decay_until=1500, floor_lr=1e-5)


def test_warmup_rises_linearly_to_the_peak():
    assert lr_at(0, SCHEDULE) == 0.0
    assert lr_at(50, SCHEDULE) == pytest.approx(5e-4)
    assert lr_at(100, SCHEDULE) == 1e-3


def test_constant_phase():
    assert lr_at(1000, SCHEDULE) == 1e-3


def test_geometric_decay_reaches_the_floor_exactly():
    assert lr_at(1250, SCHEDULE) == pytest.approx(math.sqrt(1e-3 * 1e-5))
    assert lr_at(1500, SCHEDULE) == 1e-5
    assert lr_at(10 ** 6, SCHEDULE) == 1e-5


def test_linear_decay():
    linear = ScheduleConfig(decay='linear')

    assert linear.decay is DecayMode.LINEAR
    assert lr_at(1250, linear) == pytest.approx((1e-3 + 1e-5) / 2)


def test_rate_never_increases_after_warmup():
    rates = [lr_at(step, SCHEDULE) for step in range(100, 1600)]

    assert all(later <= earlier for earlier, later in zip(rates, rates[1:]))


def test_negative_steps_are_rejected():
    with pytest.raises(ContractError):
        lr_at(-1, SCHEDULE)


@pytest.mark.parametrize('changes', [
    {'warmup_steps': 2000},
    {'constant_until': 2000},
    {'floor_lr': 1e-2},
    {'floor_lr': 0.0},
    {'decay': 'cosine'},
])
def test_invalid_schedules(changes):
    with pytest.raises(ConfigError):
        ScheduleConfig(**changes)
