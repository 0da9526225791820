"""
Building blocks for visually partitioned reasoning data.

Two partitioning strategies split the work over four paths: block-based
partitioning gives every path one quadrant of a pseudo visual-token grid,
scan-order partitioning has every path traverse the whole grid in its own
direction. Counting tasks use scan order, everything else uses blocks.

:py:func:`~parathink.datakit.build_sample` renders a question, four path
texts and an answer into the tagged token format with its loss mask, and
:py:func:`~parathink.datakit.emit_records` writes samples as JSON lines.

"""
from __future__ import annotations

import dataclasses
import enum
import logging
import math
import typing

import numpy as np

from parathink import constants, engine, exceptions, layout as layout_

if typing.TYPE_CHECKING:  # pragma: nocover
    from parathink import converters

LOGGER = logging.getLogger(__name__)

DEFAULT_N_PATHS = 4
SUMMARY_TEMPLATE = ('By analyzing multiple reasoning processes above, '
                    'I concluded that: The final answer is \\boxed{{{}}}.')


class TaskKind(enum.Enum):
    COUNTING = 'counting'
    GROUNDING = 'grounding'
    PERCEPTION = 'perception'
    OTHER = 'other'


class Strategy(enum.Enum):
    BLOCK_BASED = 'block'
    SCAN_ORDER = 'scan'


class Quadrant(enum.Enum):
    TOP_LEFT = 'Top-Left'
    TOP_RIGHT = 'Top-Right'
    BOTTOM_LEFT = 'Bottom-Left'
    BOTTOM_RIGHT = 'Bottom-Right'


class ScanOrder(enum.Enum):
    LEFT_TO_RIGHT = 'Left-to-Right'
    TOP_TO_BOTTOM = 'Top-to-Bottom'
    RIGHT_TO_LEFT = 'Right-to-Left'
    BOTTOM_TO_TOP = 'Bottom-to-Top'


Cell = typing.Tuple[int, int]


@dataclasses.dataclass(frozen=True)
class TokenGrid:
    """An ``h`` by ``w`` grid of pseudo visual tokens, indexed row-major"""
    h: int
    w: int

    def __post_init__(self):
        if self.h < 1 or self.w < 1:
            raise exceptions.LayoutError(
                'Grid must be at least 1x1, got {}x{}'.format(self.h, self.w))

    @property
    def size(self) -> int:
        return self.h * self.w

    def index(self, cell: Cell) -> int:
        return cell[0] * self.w + cell[1]


@dataclasses.dataclass(frozen=True)
class Region:
    """A labelled, non-empty set of grid cells"""
    label: Quadrant
    cells: typing.FrozenSet[Cell]

    def __post_init__(self):
        if not self.cells:
            raise exceptions.LayoutError(
                'Region {} is empty'.format(self.label.value))

    def __len__(self) -> int:
        return len(self.cells)


def block_partition(grid: TokenGrid) -> typing.Tuple[Region, ...]:
    """Split ``grid`` into quadrants at ``ceil(h/2)`` and ``ceil(w/2)``

    Returned in the order top-left, top-right, bottom-left, bottom-right.

    :raises: :py:exc:`~parathink.exceptions.LayoutError` for grids smaller
        than 2x2

    """
    if grid.h < 2 or grid.w < 2:
        raise exceptions.LayoutError(
            'Block partitioning needs a grid of at least 2x2')
    row_split, col_split = math.ceil(grid.h / 2), math.ceil(grid.w / 2)
    bounds = {
        Quadrant.TOP_LEFT: (0, row_split, 0, col_split),
        Quadrant.TOP_RIGHT: (0, row_split, col_split, grid.w),
        Quadrant.BOTTOM_LEFT: (row_split, grid.h, 0, col_split),
        Quadrant.BOTTOM_RIGHT: (row_split, grid.h, col_split, grid.w)}
    return tuple(
        Region(label, frozenset((r, c) for r in range(r0, r1)
                                for c in range(c0, c1)))
        for label, (r0, r1, c0, c1) in bounds.items())


def scan_permutation(grid: TokenGrid, order: ScanOrder) -> typing.List[int]:
    """Row-major cell indices in the order ``order`` visits them"""
    index = np.arange(grid.size).reshape(grid.h, grid.w)
    if order == ScanOrder.LEFT_TO_RIGHT:
        visit = index
    elif order == ScanOrder.TOP_TO_BOTTOM:
        visit = index.T
    elif order == ScanOrder.RIGHT_TO_LEFT:
        visit = index[:, ::-1]
    else:
        visit = index[::-1, :].T
    return [int(i) for i in visit.ravel()]


def select_strategy(kind: TaskKind) -> Strategy:
    """Scan order for counting tasks, blocks for everything else"""
    if kind == TaskKind.COUNTING:
        return Strategy.SCAN_ORDER
    return Strategy.BLOCK_BASED


def path_instructions(strategy: Strategy) -> typing.List[str]:
    """Textual prefix steering each of the four paths"""
    if strategy == Strategy.SCAN_ORDER:
        return ['Scanning {}:'.format(order.value) for order in ScanOrder]
    return ['{}:'.format(quadrant.value) for quadrant in Quadrant]


def scan_tokens(tokens: typing.Sequence[int], grid: TokenGrid,
                order: ScanOrder) -> typing.List[int]:
    """Reorder row-major grid tokens into scan order"""
    _check_grid_tokens(tokens, grid)
    return [tokens[i] for i in scan_permutation(grid, order)]


def region_tokens(tokens: typing.Sequence[int], grid: TokenGrid,
                  region: Region) -> typing.List[int]:
    """Row-major grid tokens that fall inside ``region``"""
    _check_grid_tokens(tokens, grid)
    return [tokens[grid.index(cell)] for cell in sorted(region.cells)]


def _check_grid_tokens(tokens, grid):
    if len(tokens) != grid.size:
        raise exceptions.LayoutError(
            '{} tokens do not fill a {}x{} grid'.format(
                len(tokens), grid.h, grid.w))


def render_grid(grid: TokenGrid) -> str:
    """Row-major cell indices, one grid row per line"""
    width = len(str(grid.size - 1))
    return '\n'.join(
        ' '.join(str(r * grid.w + c).rjust(width) for c in range(grid.w))
        for r in range(grid.h))


def render_regions(grid: TokenGrid) -> str:
    """Each cell marked with the initial letters of its quadrant"""
    owner = {}
    for region in block_partition(grid):
        mark = ''.join(part[0] for part in region.label.value.split('-'))
        for cell in region.cells:
            owner[cell] = mark
    return '\n'.join(' '.join(owner[(r, c)] for c in range(grid.w))
                     for r in range(grid.h))


class ByteTokenizer:
    """One token per UTF-8 byte; special ids come from the vocabulary"""
    def __init__(self, vocab: typing.Optional[layout_.SpecialVocab] = None):
        self.vocab = vocab or layout_.SpecialVocab.default()

    def encode(self, text: str) -> typing.List[int]:
        return list(text.encode('utf-8'))

    def decode(self, tokens: typing.Sequence[int]) -> str:
        """Render tokens as text, special tokens by name"""
        parts, pending = [], bytearray()
        for token in tokens:
            if 0 <= token < constants.BYTE_VOCAB:
                pending.append(token)
                continue
            if pending:
                parts.append(pending.decode('utf-8', errors='replace'))
                pending = bytearray()
            if self.vocab.is_special(token):
                parts.append(self.vocab.name(token))
            else:
                parts.append('<{}>'.format(token))
        if pending:
            parts.append(pending.decode('utf-8', errors='replace'))
        return ''.join(parts)


@dataclasses.dataclass
class SftSample:
    """A rendered training sample

    :var str question: The user turn
    :var list paths: One reasoning text per path
    :var str summary: The summary text carrying the boxed answer
    :var str answer: The boxed answer
    :var list token_ids: The full tagged token stream
    :var list loss_mask: ``1`` where the token is a loss target

    """
    question: str
    paths: typing.List[str]
    summary: str
    answer: str
    token_ids: typing.List[int]
    loss_mask: typing.List[int]

    def layout(self, vocab: typing.Optional[layout_.SpecialVocab] = None
               ) -> layout_.SegmentLayout:
        return layout_.layout_from_tagged_tokens(
            self.token_ids, vocab or layout_.SpecialVocab.default())


def _forbidden_fragments(vocab: layout_.SpecialVocab) -> typing.List[str]:
    names = [vocab.name(token) for token in sorted(vocab.special_ids)]
    return names + [vocab.boxed_open.decode(), vocab.boxed_close.decode()]


def build_sample(question: str, path_texts: typing.Sequence[str],
                 answer: str,
                 vocab: typing.Optional[layout_.SpecialVocab] = None,
                 tokenizer: typing.Optional[ByteTokenizer] = None,
                 summary: typing.Optional[str] = None,
                 n_paths: int = DEFAULT_N_PATHS) -> SftSample:
    """Render one sample in the tagged format

    The stream is the user turn, a pad token, one think block per path
    and the summary block. The loss mask is ``0`` on the user turn, the pad
    and every ``<think k>``, and ``1`` elsewhere.

    :raises: :py:exc:`~parathink.exceptions.SampleError`

    """
    vocab = vocab or layout_.SpecialVocab.default()
    tokenizer = tokenizer or ByteTokenizer(vocab)
    if len(path_texts) != n_paths:
        raise exceptions.SampleError(
            'Expected {} path texts, got {}'.format(n_paths, len(path_texts)))
    for k, text in enumerate(path_texts, 1):
        if not text:
            raise exceptions.SampleError('Path {} text is empty'.format(k))
    if not answer:
        raise exceptions.SampleError('The answer is empty')
    for fragment in _forbidden_fragments(vocab):
        if fragment in answer:
            raise exceptions.SampleError(
                'The answer contains {!r}'.format(fragment))
    summary = summary if summary is not None else SUMMARY_TEMPLATE.format(
        answer)

    tokens = [vocab.user, *tokenizer.encode(question), vocab.assistant,
              vocab.pad]
    loss_mask = [0] * len(tokens)
    for k, text in enumerate(path_texts, 1):
        body = tokenizer.encode(text) + [vocab.think_close(k)]
        tokens += [vocab.think_open(k), *body]
        loss_mask += [0] + [1] * len(body)
    body = [vocab.summary_open, *tokenizer.encode(summary),
            vocab.summary_close]
    tokens += body
    loss_mask += [1] * len(body)

    sample = SftSample(question, list(path_texts), summary, answer, tokens,
                       loss_mask)
    layout = sample.layout(vocab)
    if layout.n_paths != n_paths:
        raise exceptions.SampleError(
            'Rendered sample parses into {} paths'.format(layout.n_paths))
    if engine.extract_boxed_answer(tokens[layout.summary_start:],
                                   vocab) != answer:
        raise exceptions.SampleError('The summary does not box the answer')
    return sample


def emit_records(samples: typing.Iterable[SftSample], sink: typing.TextIO,
                 converter: typing.Optional[
                     converters.SampleConverter] = None) -> int:
    """Write one JSON line per sample, returning the number written"""
    from parathink import converters

    converter = converter or converters.SampleConverter()
    count = 0
    for sample in samples:
        sink.write(converter.dump(sample))
        sink.write('\n')
        count += 1
    LOGGER.debug('Emitted %i records', count)
    return count


def read_records(source: typing.Iterable[str],
                 converter: typing.Optional[
                     converters.SampleConverter] = None
                 ) -> typing.List[SftSample]:
    """Parse JSON lines written by :py:func:`emit_records`"""
    from parathink import converters

    converter = converter or converters.SampleConverter()
    return [converter.convert(line) for line in source if line.strip()]
