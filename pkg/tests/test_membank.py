import numpy as np
import pytest

from protomem.errors import ConfigError, ContractError, DimensionError, OrderingError
from protomem.membank import MemoryBank, MemoryBankGrid


def rows(step, count=2, width=3):
    return np.full((count, width), float(step))


def push(bank, step):
    return bank.push_batch(step, rows(step), rows(step))


def test_refresh_is_due_on_first_fill_then_every_stride():
    bank = MemoryBank(capacity=4, stride=2)
    due = []

    for step in range(1, 11):
        if push(bank, step):
            due.append(step)
            bank.mark_refreshed()
            bank.slide()

    assert due == [4, 6, 8, 10]
    assert [entry.step for entry in bank] == [9, 10]


def test_without_refreshes_the_bank_keeps_the_newest_batches():
    bank = MemoryBank(capacity=3, stride=1)

    for step in range(1, 6):
        push(bank, step)

    assert [entry.step for entry in bank] == [3, 4, 5]
    assert bank.last_step == 5
    assert bank.rows == 6


def test_steps_must_increase():
    bank = MemoryBank(capacity=3, stride=1)
    push(bank, 5)

    with pytest.raises(OrderingError):
        push(bank, 5)

    with pytest.raises(OrderingError):
        push(bank, 4)


def test_keys_and_values_must_pair_up():
    with pytest.raises(DimensionError):
        MemoryBank(3, 1).push_batch(1, np.zeros((2, 3)), np.zeros((3, 3)))


def test_stored_batches_are_frozen_copies():
    bank = MemoryBank(capacity=2, stride=1)
    keys = np.zeros((2, 3))
    bank.push_batch(1, keys, keys)
    keys[:] = 7.0
    entry = bank.entries[0]

    assert not entry.keys.any()

    with pytest.raises(ValueError):
        entry.keys[0, 0] = 1.0


def test_snapshot_is_row_aligned_and_ordered():
    bank = MemoryBank(capacity=3, stride=1)

    for step in (2, 5, 9):
        bank.push_batch(step, rows(step, count=step % 3 + 1), -rows(step, count=step % 3 + 1))

    keys, values = bank.snapshot()

    np.testing.assert_array_equal(keys, -values)
    assert list(keys[:, 0]) == sorted(keys[:, 0])


def test_snapshot_of_an_empty_bank_is_a_contract_error():
    with pytest.raises(ContractError):
        MemoryBank(2, 1).snapshot()


def test_slide_bounds():
    bank = MemoryBank(capacity=3, stride=2)
    push(bank, 1)
    bank.slide(0)
    assert len(bank) == 1

    with pytest.raises(ContractError):
        bank.slide()

    with pytest.raises(ContractError):
        bank.slide(-1)


@pytest.mark.parametrize('capacity, stride', [(0, 1), (3, 0), (3, 4)])
def test_invalid_bank_shapes(capacity, stride):
    with pytest.raises(ConfigError):
        MemoryBank(capacity, stride)


def test_clear_restarts_the_schedule():
    bank = MemoryBank(capacity=2, stride=1)
    push(bank, 1)
    assert push(bank, 2)
    bank.mark_refreshed()
    bank.clear()

    assert len(bank) == 0 and not bank.refreshed_once
    assert not push(bank, 3)
    assert push(bank, 4)


def test_grid_pushes_every_bank_in_lockstep():
    grid = MemoryBankGrid([(1, 0), (0, 1), (0, 0)], capacity=2, stride=1)

    assert list(grid) == [(0, 0), (0, 1), (1, 0)]
    assert not grid.push_all(1, {slot: (rows(1), rows(1)) for slot in grid})
    assert grid.push_all(2, {slot: (rows(2), rows(2)) for slot in grid})

    grid.mark_all_refreshed()
    grid.slide_all()

    assert all(len(bank) == 1 for _, bank in grid.items())


def test_grid_requires_a_batch_for_every_bank():
    grid = MemoryBankGrid([(0, 0), (0, 1)], capacity=2, stride=1)

    with pytest.raises(ContractError):
        grid.push_all(1, {(0, 0): (rows(1), rows(1))})
