"""
Paged key/value storage for path-parallel decoding.

A :py:class:`~parathink.kvcache.BlockStore` owns a pool of fixed-size
blocks. Each block holds the post-LPRoPE keys and values of up to
``block_size`` tokens for every layer. A
:py:class:`~parathink.kvcache.SequenceCache` is an ordered list of spans into
those blocks, so several sequences may reference the same block.

The lifecycle of one session is:

1. :py:meth:`~parathink.kvcache.BlockStore.prefill_shared` computes the
   shared context once.
2. :py:meth:`~parathink.kvcache.BlockStore.fork` hands every path a sequence
   that references the shared full blocks and owns a private copy of a
   partially filled tail block.
3. :py:meth:`~parathink.kvcache.BlockStore.append` extends one path.
4. :py:meth:`~parathink.kvcache.BlockStore.merge_for_summary` builds a
   read-only view of the shared spans followed by each path's own spans, and
   :py:meth:`~parathink.kvcache.BlockStore.continue_from` makes it writable
   for the summary stage.
5. :py:meth:`~parathink.kvcache.BlockStore.release` drops references; a
   block returns to the pool when its last reference goes.

"""
from __future__ import annotations

import dataclasses
import itertools
import logging
import threading
import typing

import numpy as np

from parathink import constants, exceptions, mask as mask_, rope

if typing.TYPE_CHECKING:  # pragma: nocover
    from parathink import model as model_

LOGGER = logging.getLogger(__name__)

READ = 'read'
WRITE = 'write'


@dataclasses.dataclass
class Block:
    """One page of cached keys and values

    :var int block_id: Index in the pool
    :var numpy.ndarray keys: ``(n_layers, block_size, heads, head_dim)``
    :var numpy.ndarray values: Same shape as ``keys``
    :var int fill: Slots written so far
    :var int ref_count: Sequences referencing the block
    :var str tag: Segment that produced the block

    """
    block_id: int
    keys: np.ndarray
    values: np.ndarray
    fill: int = 0
    ref_count: int = 0
    tag: str = ''

    @property
    def size(self) -> int:
        return self.keys.shape[1]

    @property
    def full(self) -> bool:
        return self.fill == self.size


class Span(typing.NamedTuple):
    """Slots ``start`` up to ``end`` of a block"""
    block_id: int
    start: int
    end: int


class AccessRecord(typing.NamedTuple):
    seq_id: int
    block_id: int
    op: str


@dataclasses.dataclass
class CacheStats:
    """Monotone counters of one store"""
    blocks_allocated: int = 0
    blocks_shared: int = 0
    prefill_tokens_computed: int = 0
    summary_prefill_tokens: int = 0
    decode_steps: int = 0
    blocks_released: int = 0


@dataclasses.dataclass(eq=False)
class SequenceCache:
    """Handle on the cached keys and values of one sequence

    :var BlockStore store: The owning store
    :var int seq_id: Unique id within the store
    :var list spans: Ordered spans making up the sequence
    :var path: Path index for path sequences
    :var parent: ``seq_id`` this sequence was forked or continued from
    :var bool read_only: Views cannot be appended to
    :var last_pos: The largest position id cached so far
    :var str tag: Tag of blocks this sequence allocates

    """
    store: BlockStore
    seq_id: int
    spans: typing.List[Span] = dataclasses.field(default_factory=list)
    path: typing.Optional[int] = None
    parent: typing.Optional[int] = None
    read_only: bool = False
    last_pos: typing.Optional[int] = None
    tag: str = constants.TAG_SHARED
    released: bool = False

    def __repr__(self) -> str:
        return '<SequenceCache id={} length={} blocks={}{}>'.format(
            self.seq_id, self.length, self.block_ids,
            ' read-only' if self.read_only else '')

    @property
    def length(self) -> int:
        return sum(span.end - span.start for span in self.spans)

    @property
    def block_ids(self) -> typing.List[int]:
        """Distinct referenced blocks in span order"""
        seen: typing.Dict[int, None] = {}
        for span in self.spans:
            seen.setdefault(span.block_id, None)
        return list(seen)

    def spans_after(self, offset: int) -> typing.List[Span]:
        """Spans covering the tokens from ``offset`` onwards"""
        result, skipped = [], 0
        for span in self.spans:
            length = span.end - span.start
            if skipped + length <= offset:
                skipped += length
                continue
            start = span.start + max(0, offset - skipped)
            result.append(Span(span.block_id, start, span.end))
            skipped += length
        return result


class BlockStore:
    """A pool of cache blocks for one model shape

    :param int n_layers: Layers per block
    :param int n_heads: Heads per slot
    :param int head_dim: Width per head
    :param dtype: Element type of keys and values
    :param int block_size: Slots per block
    :param int num_blocks: Pool capacity
    :param bool record_access: Keep an :py:class:`AccessRecord` log

    """
    def __init__(self, n_layers: int, n_heads: int, head_dim: int,
                 dtype=np.float64, block_size: int = constants.BLOCK_SIZE,
                 num_blocks: int = constants.NUM_BLOCKS,
                 record_access: bool = False):
        if block_size < 1 or num_blocks < 1:
            raise exceptions.CacheError(
                'block_size and num_blocks must be positive')
        self.shape = (n_layers, block_size, n_heads, head_dim)
        self.dtype = np.dtype(dtype)
        self.block_size = block_size
        self.num_blocks = num_blocks
        self.blocks: typing.Dict[int, Block] = {}
        self.access_log: typing.Optional[typing.List[AccessRecord]] = (
            [] if record_access else None)
        self._counters = CacheStats()
        self._free: typing.List[int] = []
        self._next_block = 0
        self._seq_ids = itertools.count()
        self._lock = threading.Lock()

    @classmethod
    def for_model(cls, model: model_.ToyDecoder, **kwargs) -> BlockStore:
        """Create a store shaped for ``model``"""
        config = model.config
        return cls(config.n_layers, config.n_heads, config.head_dim,
                   config.dtype, **kwargs)

    def __repr__(self) -> str:
        return '<BlockStore block_size={} in_use={}/{}>'.format(
            self.block_size, self.blocks_in_use, self.num_blocks)

    @property
    def blocks_in_use(self) -> int:
        return len(self.blocks)

    def stats(self) -> CacheStats:
        """Return a snapshot of the counters"""
        with self._lock:
            return dataclasses.replace(self._counters)

    def new_sequence(self, path: typing.Optional[int] = None,
                     tag: str = constants.TAG_SHARED) -> SequenceCache:
        """Create an empty writable sequence"""
        return SequenceCache(self, next(self._seq_ids), path=path, tag=tag)

    def prefill_shared(self, model: model_.ToyDecoder,
                       tokens: typing.Sequence[int],
                       plan: rope.PositionPlan) -> SequenceCache:
        """Compute and cache the shared context in one pass

        :raises: :py:exc:`~parathink.exceptions.PoolExhaustedError`

        """
        seq = self.new_sequence()
        if tokens:
            result = model.prefill(
                tokens, mask_.build_causal_mask(len(tokens)), plan)
            try:
                self.write_prefilled(seq, result.keys, result.values,
                                     plan.pos)
            except exceptions.CacheError:
                self.release(seq)
                raise
        with self._lock:
            self._counters.prefill_tokens_computed += len(tokens)
        LOGGER.debug('Prefilled %i shared tokens into %r', len(tokens), seq)
        return seq

    def write_prefilled(self, seq: SequenceCache,
                        keys: typing.Sequence[np.ndarray],
                        values: typing.Sequence[np.ndarray],
                        positions: typing.Sequence[int]) -> None:
        """Store per-layer ``(n, heads, head_dim)`` keys and values computed
        in one pass"""
        stacked_keys, stacked_values = np.stack(keys), np.stack(values)
        for t in range(len(positions)):
            self._append(seq, stacked_keys[:, t], stacked_values[:, t], None)
        top = max(positions, default=None)
        if top is not None and (seq.last_pos is None or top > seq.last_pos):
            seq.last_pos = top

    def fork(self, shared: SequenceCache, n: int,
             paths: typing.Optional[typing.Sequence[int]] = None
             ) -> typing.List[SequenceCache]:
        """Create ``n`` sequences continuing ``shared``

        Full blocks are shared by reference; a partially filled tail block
        is copied once per fork.

        :raises: :py:exc:`~parathink.exceptions.CacheError`

        """
        if not 1 <= n <= constants.MAX_PATHS:
            raise exceptions.CacheError(
                'Cannot fork {} sequences (maximum {})'.format(
                    n, constants.MAX_PATHS))
        paths = list(paths) if paths is not None else list(range(1, n + 1))
        if len(paths) != n:
            raise exceptions.CacheError('One path index per fork is needed')
        self._check_live(shared)
        spans = list(shared.spans)
        tail = None
        if spans and not self._is_full_span(spans[-1]):
            tail = spans.pop()
        children = []
        try:
            for path in paths:
                with self._lock:
                    for span in spans:
                        self.blocks[span.block_id].ref_count += 1
                child = SequenceCache(
                    self, next(self._seq_ids), list(spans), path=path,
                    parent=shared.seq_id, last_pos=shared.last_pos,
                    tag=constants.TAG_PATH.format(path))
                children.append(child)
                if tail is not None:
                    child.spans.append(self._copy_span(tail, child))
        except exceptions.CacheError:
            for child in children:
                self.release(child)
            raise
        with self._lock:
            self._counters.blocks_shared += len({s.block_id for s in spans})
        LOGGER.debug('Forked %r into %i sequences', shared, n)
        return children

    def append(self, seq: SequenceCache, keys: np.ndarray,
               values: np.ndarray, pos: typing.Optional[int] = None) -> None:
        """Append one token's ``(n_layers, heads, head_dim)`` keys and
        values

        :raises: :py:exc:`~parathink.exceptions.CacheError`
        :raises: :py:exc:`~parathink.exceptions.PoolExhaustedError`

        """
        self._append(seq, keys, values, pos)
        with self._lock:
            self._counters.decode_steps += 1

    def gather(self, seq: SequenceCache,
               layer: int) -> typing.Tuple[np.ndarray, np.ndarray]:
        """Return the ``(t, heads, head_dim)`` keys and values of one layer
        in sequence order"""
        self._check_live(seq)
        keys, values = [], []
        for span in seq.spans:
            block = self.blocks[span.block_id]
            keys.append(block.keys[layer, span.start:span.end])
            values.append(block.values[layer, span.start:span.end])
            self._record(seq, span.block_id, READ)
        if not keys:
            empty = np.empty((0,) + self.shape[2:], dtype=self.dtype)
            return empty, empty.copy()
        return np.concatenate(keys), np.concatenate(values)

    def merge_for_summary(self, shared: SequenceCache,
                          paths: typing.Sequence[SequenceCache]
                          ) -> SequenceCache:
        """Read-only view of the shared spans followed by each path's own
        spans in path order

        :raises: :py:exc:`~parathink.exceptions.CacheError`

        """
        self._check_live(shared)
        spans = list(shared.spans)
        last = [shared.last_pos]
        for seq in paths:
            self._check_live(seq)
            if seq.parent != shared.seq_id:
                raise exceptions.CacheError(
                    'Sequence {} is not descended from {}'.format(
                        seq.seq_id, shared.seq_id))
            spans.extend(seq.spans_after(shared.length))
            last.append(seq.last_pos)
        positions = [pos for pos in last if pos is not None]
        view = SequenceCache(
            self, next(self._seq_ids), spans, parent=shared.seq_id,
            read_only=True, last_pos=max(positions) if positions else None,
            tag=constants.TAG_SUMMARY)
        self._reference(view)
        LOGGER.debug('Merged %i paths into %r', len(paths), view)
        return view

    def reprefill(self, model: model_.ToyDecoder,
                  tokens: typing.Sequence[int], mask: mask_.PaMask,
                  plan: rope.PositionPlan) -> SequenceCache:
        """Recompute the cache of a merged sequence from raw tokens

        The no-reuse counterpart of :py:meth:`merge_for_summary`; the
        recomputed tokens count as summary prefill.

        """
        seq = self.new_sequence(tag=constants.TAG_SUMMARY)
        result = model.prefill(tokens, mask, plan)
        try:
            self.write_prefilled(seq, result.keys, result.values, plan.pos)
        except exceptions.CacheError:
            self.release(seq)
            raise
        with self._lock:
            self._counters.summary_prefill_tokens += len(tokens)
        LOGGER.debug('Re-prefilled %i tokens into %r', len(tokens), seq)
        return seq

    def continue_from(self, view: SequenceCache) -> SequenceCache:
        """Writable sequence extending ``view``, used by the summary"""
        self._check_live(view)
        seq = SequenceCache(
            self, next(self._seq_ids), list(view.spans), parent=view.seq_id,
            last_pos=view.last_pos, tag=constants.TAG_SUMMARY)
        self._reference(seq)
        return seq

    def release(self, seq: SequenceCache) -> None:
        """Drop the references of ``seq``; unreferenced blocks go back to
        the pool

        :raises: :py:exc:`~parathink.exceptions.CacheError`

        """
        self._check_live(seq)
        with self._lock:
            for block_id in seq.block_ids:
                block = self.blocks[block_id]
                block.ref_count -= 1
                if block.ref_count == 0:
                    del self.blocks[block_id]
                    self._free.append(block_id)
                    self._counters.blocks_released += 1
                    LOGGER.debug('Freed block %i (%s)', block_id, block.tag)
        seq.spans = []
        seq.released = True

    def _append(self, seq, keys, values, pos):
        self._check_live(seq)
        if seq.read_only:
            raise exceptions.CacheError(
                'Sequence {} is a read-only view'.format(seq.seq_id))
        if pos is not None:
            if seq.last_pos is not None and pos <= seq.last_pos:
                raise exceptions.CacheError(
                    'Position {} does not advance past {}'.format(
                        pos, seq.last_pos))
            seq.last_pos = pos
        tail = seq.spans[-1] if seq.spans else None
        if tail is not None and self._writable_tail(tail):
            block = self.blocks[tail.block_id]
            seq.spans[-1] = Span(tail.block_id, tail.start, tail.end + 1)
        else:
            block = self._allocate(seq.tag)
            block.ref_count = 1
            seq.spans.append(Span(block.block_id, 0, 1))
        assert block.ref_count == 1, 'write to shared block'
        block.keys[:, block.fill] = keys
        block.values[:, block.fill] = values
        block.fill += 1
        self._record(seq, block.block_id, WRITE)

    def _writable_tail(self, span):
        block = self.blocks[span.block_id]
        return (block.ref_count == 1 and block.fill == span.end
                and not block.full)

    def _is_full_span(self, span):
        return self.blocks[span.block_id].full

    def _copy_span(self, span, owner):
        source = self.blocks[span.block_id]
        block = self._allocate(owner.tag)
        count = span.end - span.start
        block.keys[:, :count] = source.keys[:, span.start:span.end]
        block.values[:, :count] = source.values[:, span.start:span.end]
        block.fill = count
        block.ref_count = 1
        self._record(owner, block.block_id, WRITE)
        return Span(block.block_id, 0, count)

    def _allocate(self, tag):
        with self._lock:
            if self._free:
                block_id = self._free.pop()
            elif self._next_block < self.num_blocks:
                block_id = self._next_block
                self._next_block += 1
            else:
                raise exceptions.PoolExhaustedError(
                    'All {} blocks are in use'.format(self.num_blocks))
            block = Block(block_id, np.zeros(self.shape, dtype=self.dtype),
                          np.zeros(self.shape, dtype=self.dtype), tag=tag)
            self.blocks[block_id] = block
            self._counters.blocks_allocated += 1
        LOGGER.debug('Allocated block %i (%s)', block_id, tag)
        return block

    def _reference(self, seq):
        with self._lock:
            for block_id in seq.block_ids:
                self.blocks[block_id].ref_count += 1

    def _record(self, seq, block_id, op):
        if self.access_log is not None:
            with self._lock:
                self.access_log.append(AccessRecord(seq.seq_id, block_id, op))

    @staticmethod
    def _check_live(seq):
        if seq.released:
            raise exceptions.CacheError(
                'Sequence {} has been released'.format(seq.seq_id))
