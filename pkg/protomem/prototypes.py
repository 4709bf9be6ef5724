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

Distills a memory bank snapshot into prototype key/value pairs.

Prototype keys are K-Means centroids of the stored keys. Each prototype value is a sum of the values
of the ``k`` stored keys nearest to its prototype key, weighted by ``exp(-distance)``.
Every distance here is an exact L2 distance.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .common import Enum
from .errors import ContractError, DimensionError, DistinctKeysError, SizeError
from .membank import MemoryBank, MemoryBankGrid, SlotKey
from .utils import derive_seed, worker_count

_log = logging.getLogger(__name__)

INERTIA_SLACK = 1e-9


class ClusterScope(Enum):
    """ Whether prototypes are clustered per head, or jointly over the concatenated heads of a layer. """
    PER_HEAD = 'per-head'
    JOINT = 'joint'


class KMeansResult(NamedTuple):
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    iterations_run: int
    inertia_history: List[float]


class NeighborResult(NamedTuple):
    indices: np.ndarray
    distances: np.ndarray


class PrototypeMemory:
    """
    The memory slots one attention head attends to.

    Attributes
    ----------
    keys: :class:`numpy.ndarray`
        The ``m × head_dim`` prototype keys (``M_K``). Read-only.
    values: :class:`numpy.ndarray`
        The ``m × head_dim`` prototype values (``M_V``). Read-only.
    built_at_step: :class:`int`
        The training step the prototypes were built at.
    k_used: :class:`int`
        The number of neighbours each value was interpolated from.
    """
    __slots__ = ('keys', 'values', 'built_at_step', 'k_used')

    def __init__(self, keys: np.ndarray, values: np.ndarray, built_at_step: int = 0, k_used: int = 0):
        keys = np.array(keys, dtype=np.float64, copy=True)
        values = np.array(values, dtype=np.float64, copy=True)

        if keys.ndim != 2 or keys.shape != values.shape:
            raise DimensionError.mismatch('PrototypeMemory', keys.shape, values.shape)

        if not (np.isfinite(keys).all() and np.isfinite(values).all()):
            raise ContractError('Prototype memories must be finite')

        keys.setflags(write=False)
        values.setflags(write=False)
        self.keys: np.ndarray = keys
        self.values: np.ndarray = values
        self.built_at_step: int = built_at_step
        self.k_used: int = k_used

    @property
    def slots(self) -> int:
        return self.keys.shape[0]

    @property
    def head_dim(self) -> int:
        return self.keys.shape[1]

    @classmethod
    def zeros(cls, slots: int, head_dim: int) -> 'PrototypeMemory':
        return cls(np.zeros((slots, head_dim)), np.zeros((slots, head_dim)))

    def __eq__(self, other):
        if not isinstance(other, PrototypeMemory):
            return NotImplemented

        return (self.built_at_step == other.built_at_step and self.k_used == other.k_used
                and np.array_equal(self.keys, other.keys) and np.array_equal(self.values, other.values))

    __hash__ = None

    def __repr__(self):
        return f'<PrototypeMemory slots={self.slots} head_dim={self.head_dim} step={self.built_at_step} k={self.k_used}>'


ValueBuilder = Callable[[np.ndarray, np.ndarray, np.ndarray, int, bool], np.ndarray]


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum('ijk,ijk->ij', diff, diff)


def _kmeans_plusplus(points: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(0, n))]
    closest = ((points - points[chosen[0]]) ** 2).sum(axis=1)

    for _ in range(1, m):
        total = closest.sum()

        if total > 0:
            index = int(rng.choice(n, p=closest / total))
        else:
            remaining = np.setdiff1d(np.arange(n), chosen)
            index = int(rng.choice(remaining))

        chosen.append(index)
        closest = np.minimum(closest, ((points - points[index]) ** 2).sum(axis=1))

    return points[chosen].copy()


def _assign(points: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    sq = _squared_distances(points, centroids)
    labels = np.argmin(sq, axis=1)
    return labels, sq[np.arange(points.shape[0]), labels]


def _repair_empty(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray, sq: np.ndarray):
    """ Reseeds every empty cluster at the point farthest from its centroid, in place. """
    m = centroids.shape[0]
    counts = np.bincount(labels, minlength=m)

    for empty in np.flatnonzero(counts == 0):
        candidates = np.where(counts[labels] > 1, sq, -1.0)
        index = int(np.argmax(candidates))

        if candidates[index] < 0:
            raise SizeError(f'Cannot repair empty cluster {empty}: no cluster has a spare point')

        counts[labels[index]] -= 1
        counts[empty] = 1
        labels[index] = empty
        sq[index] = 0.0
        centroids[empty] = points[index]


def kmeans(points, m: int, max_iters: int = 20, tol: float = 1e-4, seed: int = 0) -> KMeansResult:
    """
    Lloyd's algorithm from k-means++ seeding.

    Parameters
    ----------
    points: :class:`numpy.ndarray`
        The ``N × d`` points to cluster.
    m: :class:`int`
        The number of clusters.
    max_iters: :class:`int`
        The maximum number of Lloyd iterations.
    tol: :class:`float`
        Iteration stops once no centroid moves further than this.
    seed: :class:`int`
        Seeds the k-means++ initialisation. Identical inputs and seed give identical results.

    Raises
    ------
    :class:`SizeError`
        If there are fewer points than clusters.
    :class:`ContractError`
        If ``m < 1``, or the inertia increased between two iterations.

    Returns
    -------
    :class:`KMeansResult`
        Centroids, the nearest-centroid assignment of every point (no cluster is empty),
        the final inertia, the number of iterations run and the inertia after every iteration.
    """
    points = np.asarray(points, dtype=np.float64)

    if points.ndim != 2:
        raise DimensionError(f'kmeans expects a 2-dimensional point matrix, got shape {points.shape}')

    if m < 1:
        raise ContractError(f'kmeans needs at least one cluster, got {m}')

    if points.shape[0] < m:
        raise SizeError(f'Cannot build {m} clusters from {points.shape[0]} points')

    rng = np.random.default_rng(seed)
    centroids = _kmeans_plusplus(points, m, rng)
    labels, sq = _assign(points, centroids)
    _repair_empty(points, centroids, labels, sq)
    history = [float(sq.sum())]
    iterations = 0

    for iterations in range(1, max_iters + 1):
        updated = np.zeros_like(centroids)
        np.add.at(updated, labels, points)
        updated /= np.bincount(labels, minlength=m)[:, None]
        movement = float(np.sqrt(((updated - centroids) ** 2).sum(axis=1)).max())
        centroids = updated

        labels, sq = _assign(points, centroids)
        _repair_empty(points, centroids, labels, sq)
        inertia = float(sq.sum())

        if inertia > history[-1] + INERTIA_SLACK * max(1.0, history[-1]):
            raise ContractError(f'kmeans inertia increased from {history[-1]} to {inertia} at iteration {iterations}')

        history.append(inertia)

        if movement < tol:
            break

    _log.debug('kmeans: %d points, %d clusters, %d iterations, inertia %.6g', points.shape[0], m, iterations, history[-1])
    return KMeansResult(centroids, labels, history[-1], iterations, history)


def knn_topk(index_points, query, k: int) -> NeighborResult:
    """
    Exact k nearest neighbours under L2. Ties go to the lower index.

    Parameters
    ----------
    index_points: :class:`numpy.ndarray`
        The ``N × d`` points to search.
    query: :class:`numpy.ndarray`
        A single ``d``-vector.
    k: :class:`int`
        The number of neighbours.

    Raises
    ------
    :class:`SizeError`
        If ``k`` is not within ``[1, N]``.

    Returns
    -------
    :class:`NeighborResult`
        The neighbour indices and their distances, ascending by distance.
    """
    index_points = np.asarray(index_points, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)

    if index_points.ndim != 2 or query.shape != (index_points.shape[1],):
        raise DimensionError.mismatch('knn_topk', index_points.shape, query.shape)

    if not 1 <= k <= index_points.shape[0]:
        raise SizeError(f'Cannot return {k} neighbours out of {index_points.shape[0]} points')

    distances = np.sqrt(((index_points - query) ** 2).sum(axis=1))
    order = np.argsort(distances, kind='stable')[:k]
    return NeighborResult(order, distances[order])


def build_value_prototypes(memory_keys, bank_keys, bank_values, k: int, normalize: bool = False) -> np.ndarray:
    """
    Interpolates one value per prototype key from its ``k`` nearest stored keys.

    ``M_V[i] = Σ_j w_j V[j]`` over the neighbours ``j`` of ``M_K[i]``, with ``w_j = exp(-‖M_K[i] - K[j]‖)``.

    Parameters
    ----------
    memory_keys: :class:`numpy.ndarray`
        The ``m × d`` prototype keys.
    bank_keys: :class:`numpy.ndarray`
        The ``N × d`` stored keys.
    bank_values: :class:`numpy.ndarray`
        The ``N × d`` stored values, row-aligned with ``bank_keys``.
    k: :class:`int`
        The number of neighbours per prototype.
    normalize: :class:`bool`
        Whether to divide the weights of each prototype by their sum.

    Returns
    -------
    :class:`numpy.ndarray`
        The ``m × d`` prototype values.
    """
    memory_keys = np.asarray(memory_keys, dtype=np.float64)
    bank_keys = np.asarray(bank_keys, dtype=np.float64)
    bank_values = np.asarray(bank_values, dtype=np.float64)

    if bank_keys.shape[0] != bank_values.shape[0] or bank_values.ndim != 2:
        raise DimensionError.mismatch('build_value_prototypes', bank_keys.shape, bank_values.shape)

    result = np.empty((memory_keys.shape[0], bank_values.shape[1]))

    for i, prototype in enumerate(memory_keys):
        neighbors = knn_topk(bank_keys, prototype, k)
        weights = np.exp(-neighbors.distances)

        if normalize:
            weights = weights / weights.sum()

        result[i] = weights @ bank_values[neighbors.indices]

    return result


def compute_prototypes(bank: Union[MemoryBank, Tuple[np.ndarray, np.ndarray]], m: int, k: int, seed: int,
                       normalize: bool = False, step: int = 0, max_iters: int = 20, tol: float = 1e-4,
                       value_builder: ValueBuilder = build_value_prototypes) -> PrototypeMemory:
    """
    Builds the prototype memory of one bank.

    Parameters
    ----------
    bank: Union[:class:`MemoryBank`, Tuple[:class:`numpy.ndarray`, :class:`numpy.ndarray`]]
        The bank, or an already taken ``(keys, values)`` snapshot.
    m: :class:`int`
        The number of prototypes.
    k: :class:`int`
        The number of neighbours each value is interpolated from.
    seed: :class:`int`
        Seeds the clustering.
    normalize: :class:`bool`
        Forwarded to the value builder.
    step: :class:`int`
        Recorded as ``built_at_step``.
    max_iters: :class:`int`
        Forwarded to :func:`kmeans`.
    tol: :class:`float`
        Forwarded to :func:`kmeans`.
    value_builder: Callable
        Computes prototype values. Defaults to :func:`build_value_prototypes`.

    Raises
    ------
    :class:`SizeError`
        If the snapshot holds fewer keys than ``k``.
    :class:`~protomem.errors.DistinctKeysError`
        If the snapshot holds fewer distinct keys than ``m``.

    Returns
    -------
    :class:`PrototypeMemory`
    """
    keys, values = bank.snapshot() if isinstance(bank, MemoryBank) else bank
    distinct = np.unique(keys, axis=0).shape[0]

    if distinct < m:
        raise DistinctKeysError(f'Snapshot holds {distinct} distinct keys, fewer than the {m} prototypes requested')

    result = kmeans(keys, m, max_iters=max_iters, tol=tol, seed=seed)
    memory_values = value_builder(result.centroids, keys, values, k, normalize)
    return PrototypeMemory(result.centroids, memory_values, built_at_step=step, k_used=k)


def compute_joint_prototypes(banks: Sequence[MemoryBank], m: int, k: int, seed: int, **kwargs) -> List[PrototypeMemory]:
    """
    Clusters the concatenated keys of all heads of one layer, then slices the prototypes back per head.

    The banks must have received the same batches, so their snapshots are row-aligned.
    Keyword arguments are forwarded to :func:`compute_prototypes`.
    """
    snapshots = [bank.snapshot() for bank in banks]
    widths = [keys.shape[1] for keys, _ in snapshots]

    if len({keys.shape[0] for keys, _ in snapshots}) != 1:
        raise DimensionError('Joint clustering needs row-aligned banks')

    keys = np.concatenate([keys for keys, _ in snapshots], axis=1)
    values = np.concatenate([values for _, values in snapshots], axis=1)
    joint = compute_prototypes((keys, values), m, k, seed, **kwargs)
    bounds = np.cumsum([0] + widths)

    return [PrototypeMemory(joint.keys[:, lo:hi], joint.values[:, lo:hi], joint.built_at_step, joint.k_used)
            for lo, hi in zip(bounds[:-1], bounds[1:])]


def compute_prototype_grid(grid: MemoryBankGrid, m: int, k: int, seed: int, refresh_index: int, step: int = 0,
                           normalize: bool = False, scope: ClusterScope = ClusterScope.PER_HEAD,
                           max_iters: int = 20, tol: float = 1e-4,
                           previous: Optional[Mapping[SlotKey, PrototypeMemory]] = None) -> Dict[SlotKey, PrototypeMemory]:
    """
    Refreshes the prototypes of every bank in the grid.

    Every job gets its own seed derived from ``(seed, layer, head, refresh_index)``, jobs fan out to at most
    ``PMA_THREADS`` workers and the results are assembled in sorted (layer, head) order. A bank holding fewer
    distinct keys than ``m`` is skipped with a warning, and its ``previous`` prototypes are kept.

    Raises
    ------
    :class:`SizeError`
        If ``k`` exceeds the rows of a bank. Only a shortage of distinct keys is skipped.

    Returns
    -------
    Dict[Tuple[:class:`int`, :class:`int`], :class:`PrototypeMemory`]
        The prototypes per (layer, head). Skipped slots without previous prototypes are absent.
    """
    previous = previous or {}
    options = {'normalize': normalize, 'step': step, 'max_iters': max_iters, 'tol': tol}
    jobs: Dict[Tuple[SlotKey, ...], Callable[[], List[PrototypeMemory]]] = {}

    if ClusterScope.from_str(scope) == ClusterScope.JOINT:
        layers = sorted({layer for layer, _ in grid})

        for layer in layers:
            slots = tuple(slot for slot in grid if slot[0] == layer)
            banks = [grid[slot] for slot in slots]
            job_seed = derive_seed(seed, layer, refresh_index)
            jobs[slots] = lambda banks=banks, job_seed=job_seed: compute_joint_prototypes(banks, m, k, job_seed, **options)
    else:
        for slot in grid:
            bank = grid[slot]
            job_seed = derive_seed(seed, slot[0], slot[1], refresh_index)
            jobs[(slot,)] = lambda bank=bank, job_seed=job_seed: [compute_prototypes(bank, m, k, job_seed, **options)]

    def run(slots: Tuple[SlotKey, ...]) -> Tuple[Tuple[SlotKey, ...], Optional[List[PrototypeMemory]]]:
        try:
            return slots, jobs[slots]()
        except DistinctKeysError as error:
            _log.warning('[Refresh:%d] Skipping banks %s at step %d: %s', refresh_index, list(slots), step, error)
            return slots, None

    workers = min(worker_count(), len(jobs)) or 1

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            finished = list(executor.map(run, sorted(jobs)))
    else:
        finished = [run(slots) for slots in sorted(jobs)]

    result: Dict[SlotKey, PrototypeMemory] = {}

    for slots, memories in sorted(finished, key=lambda item: item[0]):
        for index, slot in enumerate(slots):
            if memories is not None:
                result[slot] = memories[index]
            elif slot in previous:
                result[slot] = previous[slot]

    _log.info('[Refresh:%d] Built prototypes for %d/%d banks at step %d', refresh_index, len(result), len(grid), step)
    return dict(sorted(result.items()))
