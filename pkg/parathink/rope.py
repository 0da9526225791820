"""
Rotary position embeddings and their path-aware extension.

Coordinates ``(2i, 2i + 1)`` of a ``d`` dimensional vector are rotated by
``m * theta_i`` with ``theta_i = base ** (-2i / d)``. Rotations are computed
at 64-bit precision and cast back to the precision of the input.

Path tokens carry a learnable embedding ``e_k`` which is added to their keys
before rotation and to their values. Shared-context and summary tokens, and
all queries, carry none. Position ids follow the shared-start plan: every
path starts right after the shared context and the summary continues one
past the longest path.

"""
from __future__ import annotations

import dataclasses
import functools
import logging
import typing

import numpy as np

from parathink import constants, exceptions, layout as layout_

LOGGER = logging.getLogger(__name__)

Vector = np.ndarray


@dataclasses.dataclass(frozen=True)
class RotaryParams:
    """Rotary embedding parameters

    :var int head_dim: Even vector length ``d``
    :var float base: The frequency base ``beta``

    """
    head_dim: int = constants.DEFAULT_HEAD_DIM
    base: float = constants.DEFAULT_ROPE_BASE

    def __post_init__(self):
        if self.head_dim < 2 or self.head_dim % 2:
            raise exceptions.ShapeError(
                'head_dim must be even and positive, got {}'.format(
                    self.head_dim))
        if self.base <= 0:
            raise exceptions.ShapeError('rope base must be positive')

    @property
    def theta(self) -> np.ndarray:
        """Per-pair frequencies, ``theta[0] == 1``"""
        return _theta(self.head_dim, float(self.base))


@functools.lru_cache(maxsize=None)
def _theta(head_dim: int, base: float) -> np.ndarray:
    exponent = -2.0 * np.arange(head_dim // 2, dtype=np.float64) / head_dim
    theta = np.power(base, exponent)
    theta.setflags(write=False)
    return theta


@functools.lru_cache(maxsize=65536)
def _cos_sin(head_dim: int, base: float,
             m: int) -> typing.Tuple[np.ndarray, np.ndarray]:
    """Cached rotation table row, shared by every caller for position ``m``"""
    angles = np.float64(m) * _theta(head_dim, base)
    cos, sin = np.cos(angles), np.sin(angles)
    cos.setflags(write=False)
    sin.setflags(write=False)
    return cos, sin


def _apply(v: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    v64 = v.astype(np.float64)
    even, odd = v64[..., 0::2], v64[..., 1::2]
    out = np.empty_like(v64)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out.astype(v.dtype, copy=False)


def rotate(v: Vector, m: int, params: RotaryParams) -> Vector:
    """Rotate ``v`` to position ``m``; preserves the euclidean norm

    Leading dimensions of ``v`` are rotated alike; ``m`` may be negative
    when a relative offset is rotated.

    :raises: :py:exc:`~parathink.exceptions.ShapeError`

    """
    v = np.asarray(v)
    if v.shape[-1] != params.head_dim:
        raise exceptions.ShapeError(
            'Expected vectors of length {}, got {}'.format(
                params.head_dim, v.shape[-1]))
    return _apply(v, *_cos_sin(params.head_dim, float(params.base), int(m)))


def rotate_rows(v: np.ndarray, positions: typing.Sequence[int],
                params: RotaryParams) -> np.ndarray:
    """Rotate ``v[t]`` to ``positions[t]`` for every row ``t``

    ``v`` has shape ``(n, ..., head_dim)``.

    """
    if v.shape[-1] != params.head_dim:
        raise exceptions.ShapeError(
            'Expected vectors of length {}, got {}'.format(
                params.head_dim, v.shape[-1]))
    if len(positions) != v.shape[0]:
        raise exceptions.ShapeError('One position per row is required')
    if not len(positions):
        return v.copy()
    rows = [_cos_sin(params.head_dim, float(params.base), int(m))
            for m in positions]
    shape = (len(rows),) + (1,) * (v.ndim - 2) + (params.head_dim // 2,)
    cos = np.stack([row[0] for row in rows]).reshape(shape)
    sin = np.stack([row[1] for row in rows]).reshape(shape)
    return _apply(v, cos, sin)


def score(q: Vector, k: Vector, m_q: int, m_k: int,
          params: RotaryParams) -> float:
    """Attention logit of a rotated query against a rotated key"""
    return float(np.dot(rotate(q, m_q, params), rotate(k, m_k, params)))


def relative_score(q: Vector, k: Vector, delta: int,
                   params: RotaryParams) -> float:
    """``q . R(delta) k``, the relative-position form of :py:func:`score`
    with ``delta`` the key position minus the query position"""
    return float(np.dot(q, rotate(k, delta, params)))


@dataclasses.dataclass
class PathEmbeddingTable:
    """One learnable vector per reasoning path, shared by all heads and
    layers

    :var numpy.ndarray e: ``(n_paths, head_dim)`` embedding rows, row
        ``k - 1`` for path ``k``
    :var bool trainable: Whether training utilities may update the table

    """
    e: np.ndarray
    trainable: bool = True

    def __post_init__(self):
        self.e = np.asarray(self.e, dtype=np.float64)
        if self.e.ndim != 2:
            raise exceptions.ShapeError('Path embeddings must be a matrix')

    @classmethod
    def zeros(cls, n_paths: int, head_dim: int) -> PathEmbeddingTable:
        return cls(np.zeros((n_paths, head_dim), dtype=np.float64))

    @property
    def n_paths(self) -> int:
        return self.e.shape[0]

    @property
    def head_dim(self) -> int:
        return self.e.shape[1]

    def vector(self, path: int) -> np.ndarray:
        """Return ``e_path``

        :raises: :py:exc:`~parathink.exceptions.LayoutError`

        """
        if not 1 <= path <= self.n_paths:
            raise exceptions.LayoutError(
                'No embedding for path {} (table holds {})'.format(
                    path, self.n_paths))
        return self.e[path - 1]

    def gather(self, path_of: typing.Sequence[typing.Optional[int]],
               dtype=np.float64) -> np.ndarray:
        """Per-token embedding rows, zero where no path is set

        :rtype: numpy.ndarray

        """
        rows = np.zeros((len(path_of), self.head_dim), dtype=np.float64)
        for t, path in enumerate(path_of):
            if path is not None:
                rows[t] = self.vector(path)
        return rows.astype(dtype, copy=False)


def lprope_key(k: Vector, m: int, path: typing.Optional[int],
               table: PathEmbeddingTable, params: RotaryParams) -> Vector:
    """Path-aware key: ``R_m (k + e_path)``, or ``R_m k`` without a path"""
    k = np.asarray(k)
    if path is not None:
        k = k + table.vector(path).astype(k.dtype, copy=False)
    return rotate(k, m, params)


def lprope_value(v: Vector, path: typing.Optional[int],
                 table: PathEmbeddingTable) -> Vector:
    """Path-aware value: ``v + e_path``, or ``v`` without a path"""
    v = np.asarray(v)
    if path is None:
        return v
    return v + table.vector(path).astype(v.dtype, copy=False)


def _broadcast_rows(emb: np.ndarray, v: np.ndarray) -> np.ndarray:
    shape = (emb.shape[0],) + (1,) * (v.ndim - 2) + (emb.shape[-1],)
    return emb.astype(v.dtype, copy=False).reshape(shape)


def lprope_keys(k: np.ndarray, positions: typing.Sequence[int],
                emb: typing.Optional[np.ndarray],
                params: RotaryParams) -> np.ndarray:
    """Row-batched :py:func:`lprope_key`

    ``k`` has shape ``(n, ..., head_dim)`` and ``emb`` holds one embedding
    row per token, zero for tokens outside a path, or is ``None`` when no
    token belongs to a path.

    """
    if emb is not None:
        k = k + _broadcast_rows(emb, k)
    return rotate_rows(k, positions, params)


def lprope_values(v: np.ndarray,
                  emb: typing.Optional[np.ndarray]) -> np.ndarray:
    """Row-batched :py:func:`lprope_value`"""
    if emb is None:
        return v
    return v + _broadcast_rows(emb, v)


def score_decomposition(q: Vector, k: Vector, e: Vector, m_q: int, m_k: int,
                        params: RotaryParams) -> typing.Tuple[float, float]:
    """Split the path-aware attention logit into its two terms

    Returns ``(q' . k, q' . e)`` with ``q' = R(m_q - m_k) q``; their sum is
    ``R_{m_q} q . R_{m_k} (k + e)``.

    :raises: :py:exc:`~parathink.exceptions.ShapeError`

    """
    q, k, e = np.asarray(q), np.asarray(k), np.asarray(e)
    if not q.shape == k.shape == e.shape:
        raise exceptions.ShapeError('q, k and e must have equal shapes')
    rotated = rotate(q, m_q - m_k, params)
    return float(np.dot(rotated, k)), float(np.dot(rotated, e))


@dataclasses.dataclass(frozen=True)
class PositionPlan:
    """Position id and path index of every flattened token

    :var tuple pos: Position id per token
    :var tuple path_of: Path index per token, ``None`` for shared-context
        and summary tokens

    """
    pos: typing.Tuple[int, ...]
    path_of: typing.Tuple[typing.Optional[int], ...]

    def __post_init__(self):
        object.__setattr__(self, 'pos', tuple(int(p) for p in self.pos))
        object.__setattr__(self, 'path_of', tuple(self.path_of))
        if len(self.pos) != len(self.path_of):
            raise exceptions.ShapeError('pos and path_of lengths differ')
        if any(p < 0 for p in self.pos):
            raise exceptions.LayoutError('Position ids must be >= 0')

    def __len__(self) -> int:
        return len(self.pos)

    def segment(self, start: int, stop: int) -> PositionPlan:
        """Return the plan of tokens ``start`` up to ``stop``"""
        return PositionPlan(self.pos[start:stop], self.path_of[start:stop])


def _plan(layout: layout_.SegmentLayout,
          starts: typing.Sequence[int]) -> PositionPlan:
    pos = list(range(layout.shared_len))
    path_of: typing.List[typing.Optional[int]] = [None] * layout.shared_len
    ends = []
    for k, (start, length) in enumerate(zip(starts, layout.path_lens), 1):
        pos.extend(range(start, start + length))
        path_of.extend([k] * length)
        ends.append(start + length - 1)
    summary_start = max(ends) + 1
    pos.extend(range(summary_start, summary_start + layout.summary_len))
    path_of.extend([None] * layout.summary_len)
    return PositionPlan(tuple(pos), tuple(path_of))


def assign_positions(layout: layout_.SegmentLayout) -> PositionPlan:
    """Shared-start plan: every path starts at ``shared_len``; the summary
    starts one past the largest path end id

    :rtype: PositionPlan

    """
    return _plan(layout, [layout.shared_len] * layout.n_paths)


def assign_positions_disjoint(layout: layout_.SegmentLayout) -> PositionPlan:
    """Disjoint plan: paths take consecutive non-overlapping id ranges in
    path order, the summary follows the last one

    :rtype: PositionPlan

    """
    starts, start = [], layout.shared_len
    for length in layout.path_lens:
        starts.append(start)
        start += length
    return _plan(layout, starts)


def assign_positions_for(layout: layout_.SegmentLayout,
                         scheme: str) -> PositionPlan:
    """Dispatch on the position scheme name

    :raises: :py:exc:`ValueError`

    """
    if scheme == constants.POSITIONS_SHARED:
        return assign_positions(layout)
    elif scheme == constants.POSITIONS_DISJOINT:
        return assign_positions_disjoint(layout)
    raise ValueError('Unknown position scheme: {}'.format(scheme))
