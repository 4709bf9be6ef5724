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
"""
from dataclasses import dataclass

from .common import Enum
from .errors import ConfigError, ContractError


class DecayMode(Enum):
    """ How the learning rate falls from its peak to its floor. """
    GEOMETRIC = 'geometric'
    LINEAR = 'linear'


@dataclass(frozen=True)
class ScheduleConfig:
    """
    A warmup, constant, decay, floor learning rate schedule.

    Attributes
    ----------
    warmup_steps: :class:`int`
        The rate rises linearly from 0 to ``peak_lr`` over this many steps.
    peak_lr: :class:`float`
    constant_until: :class:`int`
        The last step at ``peak_lr``.
    decay_until: :class:`int`
        The step at which ``floor_lr`` is reached.
    floor_lr: :class:`float`
    decay: :class:`DecayMode`
        Geometric decay interpolates the logarithm of the rate, linear decay the rate itself.
    """
    warmup_steps: int = 100
    peak_lr: float = 1e-3
    constant_until: int = 1000
    decay_until: int = 1500
    floor_lr: float = 1e-5
    decay: DecayMode = DecayMode.GEOMETRIC

    def __post_init__(self):
        try:
            object.__setattr__(self, 'decay', DecayMode.from_str(self.decay))
        except ValueError as error:
            raise ConfigError(str(error)) from error

        if not 0 <= self.warmup_steps <= self.constant_until <= self.decay_until:
            raise ConfigError('Schedule steps must satisfy 0 <= warmup_steps <= constant_until <= decay_until, got '
                              f'{self.warmup_steps}, {self.constant_until}, {self.decay_until}')

        if not self.peak_lr > self.floor_lr > 0:
            raise ConfigError(f'Schedule rates must satisfy peak_lr > floor_lr > 0, got {self.peak_lr}, {self.floor_lr}')


def lr_at(step: int, sched: ScheduleConfig) -> float:
    """
    The learning rate at ``step``.

    Parameters
    ----------
    step: :class:`int`
        The training step, starting at 0.
    sched: :class:`ScheduleConfig`
        The schedule.

    Raises
    ------
    :class:`ContractError`
        If ``step`` is negative.

    Returns
    -------
    :class:`float`
    """
    if step < 0:
        raise ContractError(f'Learning rate is undefined for negative step {step}')

    if step < sched.warmup_steps:
        return sched.peak_lr * step / sched.warmup_steps

    if step <= sched.constant_until:
        return sched.peak_lr

    if step >= sched.decay_until:
        return sched.floor_lr

    progress = (step - sched.constant_until) / (sched.decay_until - sched.constant_until)

    if sched.decay == DecayMode.LINEAR:
        return sched.peak_lr + (sched.floor_lr - sched.peak_lr) * progress

    return sched.peak_lr * (sched.floor_lr / sched.peak_lr) ** progress
