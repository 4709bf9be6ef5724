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
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

from .events import StepCompleted, listener

_log = logging.getLogger(__name__)

SLOT_NAMES = ('color', 'object', 'scene')


class EvalMetrics:
    """
    The evaluation record of one model on one split.

    Attributes
    ----------
    split: :class:`str`
        The split that was evaluated.
    samples: :class:`int`
        The number of samples in the split.
    token_acc: :class:`float`
        The teacher-forced token accuracy.
    exact_match: :class:`float`
        The share of samples whose decoded caption equals the reference, ``<eos>`` included.
    slot_acc: Dict[:class:`str`, :class:`float`]
        The decoded accuracy of the color, object and scene words.
    mem_attn_score: Optional[:class:`float`]
        The mean memory attention score over all teacher-forced positions, or ``None`` without memory.
    """
    __slots__ = ('split', 'samples', 'token_acc', 'exact_match', 'slot_acc', 'mem_attn_score')

    def __init__(self, split: str, samples: int, token_acc: float, exact_match: float, slot_acc: Dict[str, float],
                 mem_attn_score: Optional[float]):
        self.split: str = split
        self.samples: int = samples
        self.token_acc: float = token_acc
        self.exact_match: float = exact_match
        self.slot_acc: Dict[str, float] = slot_acc
        self.mem_attn_score: Optional[float] = mem_attn_score

    @classmethod
    def empty(cls, split: str) -> 'EvalMetrics':
        return cls(split, 0, 0.0, 0.0, {name: 0.0 for name in SLOT_NAMES}, None)

    def to_dict(self) -> Dict[str, Any]:
        return {'split': self.split, 'samples': self.samples, 'token_acc': self.token_acc,
                'exact_match': self.exact_match, 'slot_acc': dict(self.slot_acc), 'mem_attn_score': self.mem_attn_score}

    def __repr__(self):
        return (f'<EvalMetrics split={self.split} samples={self.samples} token_acc={self.token_acc:.4f} '
                f'exact_match={self.exact_match:.4f}>')


class MetricsWriter:
    """
    Writes one JSON object per completed step. Register with :func:`EventDispatcher.add_event_hooks`.

    Parameters
    ----------
    path: Union[:class:`str`, :class:`pathlib.Path`]
        The JSON lines file. It is truncated when the writer is created.
    """
    __slots__ = ('path', 'lines')

    def __init__(self, path: Union[str, Path]):
        self.path: Path = Path(path)
        self.path.write_text('', encoding='utf-8')
        self.lines: int = 0

    @listener(StepCompleted)
    def on_step(self, event: StepCompleted):
        with self.path.open('a', encoding='utf-8') as handle:
            handle.write(json.dumps(event.to_record(), sort_keys=True) + '\n')

        self.lines += 1
