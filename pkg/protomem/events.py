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
import logging
from collections import defaultdict
from inspect import getmembers, ismethod
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Type, TypeVar

_log = logging.getLogger(__name__)


class Event:
    """ The base for all training events. """


EventT = TypeVar('EventT', bound=Event)


class StepCompleted(Event):
    """
    This event is emitted after every optimizer step.

    Attributes
    ----------
    step: :class:`int`
        The step that completed, starting at 1.
    loss: :class:`float`
        The teacher-forced cross-entropy of the step's batch.
    lr: :class:`float`
        The learning rate the step was taken with.
    token_acc: :class:`float`
        The teacher-forced token accuracy of the step's batch.
    mem_attn_score: Optional[:class:`float`]
        The mean memory attention score of the batch, or ``None`` if the forward pass used no memory.
    refresh: :class:`bool`
        Whether prototypes were refreshed during this step.
    """
    __slots__ = ('step', 'loss', 'lr', 'token_acc', 'mem_attn_score', 'refresh')

    def __init__(self, step: int, loss: float, lr: float, token_acc: float, mem_attn_score: Optional[float], refresh: bool):
        self.step: int = step
        self.loss: float = loss
        self.lr: float = lr
        self.token_acc: float = token_acc
        self.mem_attn_score: Optional[float] = mem_attn_score
        self.refresh: bool = refresh

    def to_record(self) -> Dict[str, Any]:
        """ The metrics log line of this step. """
        return {'step': self.step, 'loss': self.loss, 'lr': self.lr, 'token_acc': self.token_acc,
                'mem_attn_score': self.mem_attn_score, 'refresh': self.refresh}


class PrototypesRefreshed(Event):
    """
    This event is emitted when prototype memories were rebuilt from the memory banks.

    Attributes
    ----------
    step: :class:`int`
        The step the refresh happened at.
    refresh_index: :class:`int`
        How many refreshes happened before this one.
    slots: List[Tuple[:class:`int`, :class:`int`]]
        The (layer, head) pairs whose prototypes are installed after the refresh.
    skipped: List[Tuple[:class:`int`, :class:`int`]]
        The (layer, head) pairs that could not be rebuilt.
    """
    __slots__ = ('step', 'refresh_index', 'slots', 'skipped')

    def __init__(self, step: int, refresh_index: int, slots: List[Tuple[int, int]], skipped: List[Tuple[int, int]]):
        self.step: int = step
        self.refresh_index: int = refresh_index
        self.slots: List[Tuple[int, int]] = slots
        self.skipped: List[Tuple[int, int]] = skipped


class TrainingAbortedEvent(Event):
    """
    This event is emitted right before training raises :class:`~protomem.errors.TrainingAborted`.

    Attributes
    ----------
    step: :class:`int`
        The step that produced non-finite values.
    snapshot: Dict[str, Any]
        The diagnostic snapshot carried by the exception.
    """
    __slots__ = ('step', 'snapshot')

    def __init__(self, step: int, snapshot: Dict[str, Any]):
        self.step: int = step
        self.snapshot: Dict[str, Any] = snapshot


def listener(*events: Type[Event]):
    """
    Marks this function as an event listener.
    This **must** be used on class methods, registered through :func:`EventDispatcher.add_event_hooks`.

    Example:

        .. code:: python

            @listener(StepCompleted)
            def on_step(self, event: StepCompleted):
                ...

    Parameters
    ----------
    events: :class:`Event`
        The events to listen for. Leave this empty to listen for all events.
    """
    def wrapper(func):
        setattr(func, '_protomem_events', events)
        return func
    return wrapper


class EventDispatcher:
    """
    Synchronously dispatches events to registered hooks, in registration order.

    A hook that raises is logged and skipped; it never interrupts the dispatching code.
    """
    __slots__ = ('_event_hooks',)

    def __init__(self):
        self._event_hooks: Dict[str, List[Callable[[Event], Any]]] = defaultdict(list)

    def add_event_hook(self, *hooks: Callable[[Event], Any], event: Optional[Type[EventT]] = None):
        """
        Adds one or more event hooks.

        Parameters
        ----------
        hooks: :class:`function`
            The hooks to register for the given event type.
        event: Optional[Type[:class:`Event`]]
            The event the hooks belong to. Defaults to ``None``, which means the hooks run on all events.
        """
        if event is not None and not issubclass(event, Event):
            raise TypeError('Event parameter is not of type Event or None')

        event_hooks = self._event_hooks[event.__name__ if event is not None else 'Generic']

        for hook in hooks:
            if not callable(hook):
                raise TypeError('Hook is not callable')

            if hook not in event_hooks:
                event_hooks.append(hook)

    def add_event_hooks(self, cls: object):
        """
        Scans ``cls`` for methods decorated with :func:`listener` and registers them.

        Parameters
        ----------
        cls: object
            An instance of a class containing event hook methods.
        """
        methods = getmembers(cls, predicate=lambda meth: ismethod(meth) and not meth.__name__.startswith('_')
                             and hasattr(meth, '_protomem_events'))

        for _, method in methods:
            events = method._protomem_events  # pylint: disable=protected-access

            for name in [event.__name__ for event in events] or ['Generic']:
                self._event_hooks[name].append(method)

    def remove_event_hooks(self, *, events: Optional[Sequence[Type[Event]]] = None, hooks: Sequence[Callable]):
        """
        Removes the given hooks, from the given events only or from every event.
        """
        names = [event.__name__ for event in events] if events else list(self._event_hooks)

        for name in names:
            self._event_hooks[name] = [hook for hook in self._event_hooks[name] if hook not in hooks]

    def dispatch(self, event: Event):
        hooks = self._event_hooks['Generic'] + self._event_hooks[type(event).__name__]

        for hook in hooks:
            try:
                hook(event)
            except Exception:  # pylint: disable=broad-except
                _log.exception('Event hook \'%s\' encountered an exception!', getattr(hook, '__name__', hook))

        if hooks:
            _log.debug('Dispatched \'%s\' to %d hooks', type(event).__name__, len(hooks))
