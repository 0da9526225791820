"""
The three-segment token structure every other module works against: a
shared context ``P``, ``n`` reasoning paths ``r(1) .. r(n)`` and a summary
``S``. Flattened, the segments are laid out as ``P``, then each path in
ascending path order, then ``S``.

Tag tokens belong to the segment they open or close, so ``<think k>`` is the
first token of path ``k`` and ``</summary>`` is the last token of ``S``.

"""
from __future__ import annotations

import dataclasses
import enum
import logging
import typing

import numpy as np

from parathink import constants, exceptions

LOGGER = logging.getLogger(__name__)


class Segment(enum.Enum):
    SHARED = 'shared'
    PATH = 'path'
    SUMMARY = 'summary'


@dataclasses.dataclass(frozen=True)
class TokenRole:
    """The segment a token belongs to

    :var Segment segment: Which of the three segments
    :var int path: The 1-based path index, only set for
        :py:attr:`Segment.PATH`

    """
    segment: Segment
    path: typing.Optional[int] = None

    def __post_init__(self):
        if self.segment == Segment.PATH:
            if self.path is None or self.path < 1:
                raise exceptions.LayoutError(
                    'Path roles need a 1-based path index')
        elif self.path is not None:
            raise exceptions.LayoutError(
                '{} roles carry no path index'.format(self.segment.value))

    def __str__(self) -> str:
        if self.segment == Segment.PATH:
            return constants.TAG_PATH.format(self.path)
        return self.segment.value


SHARED_CONTEXT = TokenRole(Segment.SHARED)
SUMMARY = TokenRole(Segment.SUMMARY)


def path_role(k: int) -> TokenRole:
    """Return the role of a token in path ``k``"""
    return TokenRole(Segment.PATH, k)


@dataclasses.dataclass(frozen=True)
class SegmentLayout:
    """Segment lengths of a flattened token sequence

    :var int shared_len: Tokens in the shared context
    :var tuple path_lens: Tokens per path, in path order
    :var int summary_len: Tokens in the summary

    """
    shared_len: int
    path_lens: typing.Tuple[int, ...]
    summary_len: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'path_lens', tuple(self.path_lens))
        if not 1 <= len(self.path_lens) <= constants.MAX_PATHS:
            raise exceptions.LayoutError(
                'A layout needs between 1 and {} paths, got {}'.format(
                    constants.MAX_PATHS, len(self.path_lens)))
        if any(length < 1 for length in self.path_lens):
            raise exceptions.LayoutError(
                'Every path holds at least its open tag: {!r}'.format(
                    self.path_lens))
        if self.shared_len < 0 or self.summary_len < 0:
            raise exceptions.LayoutError('Segment lengths must be >= 0')

    def __repr__(self) -> str:
        return '<SegmentLayout ({}, {}, {})>'.format(
            self.shared_len, list(self.path_lens), self.summary_len)

    @property
    def n_paths(self) -> int:
        return len(self.path_lens)

    @property
    def total(self) -> int:
        return self.shared_len + sum(self.path_lens) + self.summary_len

    @property
    def summary_start(self) -> int:
        return self.shared_len + sum(self.path_lens)

    def path_start(self, k: int) -> int:
        """Return the flat index of the first token of path ``k``"""
        if not 1 <= k <= self.n_paths:
            raise exceptions.LayoutError(
                'Path {} not in layout with {} paths'.format(k, self.n_paths))
        return self.shared_len + sum(self.path_lens[:k - 1])

    def segment_length(self, role: TokenRole) -> int:
        """Return the number of tokens in the segment named by ``role``"""
        if role.segment == Segment.SHARED:
            return self.shared_len
        elif role.segment == Segment.SUMMARY:
            return self.summary_len
        if role.path > self.n_paths:
            raise exceptions.LayoutError(
                'Path {} not in layout with {} paths'.format(
                    role.path, self.n_paths))
        return self.path_lens[role.path - 1]


def role_of(layout: SegmentLayout, index: int) -> TokenRole:
    """Return the role of the token at flat position ``index``

    :raises: :py:exc:`~parathink.exceptions.LayoutError`

    """
    if not 0 <= index < layout.total:
        raise exceptions.LayoutError(
            'Index {} outside layout of {} tokens'.format(index, layout.total))
    if index < layout.shared_len:
        return SHARED_CONTEXT
    offset = index - layout.shared_len
    for k, length in enumerate(layout.path_lens, start=1):
        if offset < length:
            return path_role(k)
        offset -= length
    return SUMMARY


def flat_index(layout: SegmentLayout, role: TokenRole, offset: int) -> int:
    """Return the flat position of the ``offset``-th token of a segment

    The inverse of :py:func:`role_of` combined with the within-segment
    offset.

    :raises: :py:exc:`~parathink.exceptions.LayoutError`

    """
    length = layout.segment_length(role)
    if not 0 <= offset < length:
        raise exceptions.LayoutError(
            'Offset {} outside {} segment of {} tokens'.format(
                offset, role, length))
    if role.segment == Segment.SHARED:
        return offset
    elif role.segment == Segment.SUMMARY:
        return layout.summary_start + offset
    return layout.path_start(role.path) + offset


def path_ids(layout: SegmentLayout) -> np.ndarray:
    """Per-token segment ids: ``0`` shared, ``k`` for path ``k``, ``-1``
    summary

    :rtype: numpy.ndarray

    """
    ids = [0] * layout.shared_len
    for k, length in enumerate(layout.path_lens, start=1):
        ids.extend([k] * length)
    ids.extend([-1] * layout.summary_len)
    return np.asarray(ids, dtype=np.int64)


@dataclasses.dataclass(frozen=True)
class SpecialVocab:
    """Special-token ids of the tagged format

    :var int pad: The padding token following the user turn
    :var int user: ``<|User|>``
    :var int assistant: ``<|Assistant|>``
    :var int summary_open: ``<summary>``
    :var int summary_close: ``</summary>``
    :var int think_base: Id of ``<think1>``; ``<think k>`` and ``</think k>``
        are allocated in pairs from here
    :var bytes boxed_open: Byte string opening the boxed answer
    :var bytes boxed_close: Byte string closing the boxed answer

    """
    pad: int = constants.PAD
    user: int = constants.USER
    assistant: int = constants.ASSISTANT
    summary_open: int = constants.SUMMARY_OPEN
    summary_close: int = constants.SUMMARY_CLOSE
    think_base: int = constants.THINK_BASE
    boxed_open: bytes = constants.BOXED_OPEN
    boxed_close: bytes = constants.BOXED_CLOSE

    def __post_init__(self):
        ids = sorted(self.special_ids)
        if len(ids) != 5 + 2 * constants.MAX_PATHS:
            raise exceptions.VocabError('Special token ids are not distinct')

    @classmethod
    def default(cls) -> SpecialVocab:
        return cls()

    def think_open(self, k: int) -> int:
        self._check_path(k)
        return self.think_base + 2 * (k - 1)

    def think_close(self, k: int) -> int:
        self._check_path(k)
        return self.think_base + 2 * (k - 1) + 1

    @property
    def max_id(self) -> int:
        return max(self.special_ids)

    @property
    def special_ids(self) -> typing.FrozenSet[int]:
        think = range(self.think_base,
                      self.think_base + 2 * constants.MAX_PATHS)
        return frozenset([self.pad, self.user, self.assistant,
                          self.summary_open, self.summary_close, *think])

    def is_special(self, token: int) -> bool:
        return token in self.special_ids

    def open_path(self, token: int) -> typing.Optional[int]:
        """Return ``k`` when ``token`` is ``<think k>``"""
        offset = token - self.think_base
        if 0 <= offset < 2 * constants.MAX_PATHS and offset % 2 == 0:
            return offset // 2 + 1
        return None

    def close_path(self, token: int) -> typing.Optional[int]:
        """Return ``k`` when ``token`` is ``</think k>``"""
        offset = token - self.think_base
        if 0 <= offset < 2 * constants.MAX_PATHS and offset % 2 == 1:
            return offset // 2 + 1
        return None

    def name(self, token: int) -> str:
        """Return the textual form of a special token"""
        names = {self.pad: '<vllm_pad>',
                 self.user: '<|User|>',
                 self.assistant: '<|Assistant|>',
                 self.summary_open: '<summary>',
                 self.summary_close: '</summary>'}
        if token in names:
            return names[token]
        k = self.open_path(token)
        if k is not None:
            return '<think{}>'.format(k)
        k = self.close_path(token)
        if k is not None:
            return '</think{}>'.format(k)
        raise exceptions.VocabError('{} is not a special token'.format(token))

    def validate(self, vocab_size: int) -> None:
        """Ensure every special id fits a model vocabulary

        :raises: :py:exc:`~parathink.exceptions.VocabError`

        """
        if self.max_id >= vocab_size:
            raise exceptions.VocabError(
                'Special token {} exceeds vocab size {}'.format(
                    self.max_id, vocab_size))

    def _check_path(self, k: int) -> None:
        if not 1 <= k <= constants.MAX_PATHS:
            raise exceptions.VocabError('No think tag for path {}'.format(k))


class _State(enum.Enum):
    SHARED = 1
    PATH = 2
    BETWEEN = 3
    SUMMARY = 4
    DONE = 5


def layout_from_tagged_tokens(tokens: typing.Sequence[int],
                              vocab: SpecialVocab) -> SegmentLayout:
    """Parse a tagged token stream into its segment layout

    Everything before the first ``<think1>`` is shared context. Think blocks
    must follow one another in ascending path order without gaps or stray
    tokens in between, optionally followed by one summary block.

    :param tokens: The token-id stream
    :param vocab: The special-token vocabulary
    :raises: :py:exc:`~parathink.exceptions.TagError`
    :rtype: SegmentLayout

    """
    state, shared_len, path_lens, summary_len = _State.SHARED, 0, [], 0
    current = 0
    for offset, token in enumerate(tokens):
        opened, closed = vocab.open_path(token), vocab.close_path(token)
        if state == _State.DONE:
            raise exceptions.TagError(offset, 'token after </summary>')
        elif state == _State.PATH:
            if closed == current:
                path_lens[-1] += 1
                state = _State.BETWEEN
            elif opened is not None or closed is not None:
                raise exceptions.TagError(
                    offset, 'interleaved or unbalanced tag inside '
                            'path {}'.format(current))
            elif token in (vocab.summary_open, vocab.summary_close):
                raise exceptions.TagError(
                    offset, 'path {} not closed'.format(current))
            else:
                path_lens[-1] += 1
        elif state == _State.SUMMARY:
            if token == vocab.summary_close:
                summary_len += 1
                state = _State.DONE
            elif opened is not None:
                raise exceptions.TagError(
                    offset, 'think block after <summary>')
            elif closed is not None or token == vocab.summary_open:
                raise exceptions.TagError(offset, 'unbalanced summary tag')
            else:
                summary_len += 1
        elif opened is not None:
            if opened <= len(path_lens):
                raise exceptions.TagError(
                    offset, 'duplicate path index {}'.format(opened))
            elif opened != len(path_lens) + 1:
                raise exceptions.TagError(
                    offset, 'expected <think{}>, found <think{}>'.format(
                        len(path_lens) + 1, opened))
            current, state = opened, _State.PATH
            path_lens.append(1)
        elif closed is not None or token == vocab.summary_close:
            raise exceptions.TagError(offset, 'closing tag without opening')
        elif token == vocab.summary_open:
            if state == _State.SHARED:
                raise exceptions.TagError(
                    offset, '<summary> before any think block')
            summary_len, state = 1, _State.SUMMARY
        elif state == _State.BETWEEN:
            raise exceptions.TagError(offset, 'stray token between blocks')
        else:
            shared_len += 1
    if state == _State.PATH:
        raise exceptions.TagError(
            len(tokens), 'unbalanced: path {} not closed'.format(current))
    elif state == _State.SUMMARY:
        raise exceptions.TagError(
            len(tokens), 'unbalanced: summary not closed')
    elif state == _State.SHARED:
        raise exceptions.TagError(len(tokens), 'no think block found')
    layout = SegmentLayout(shared_len, tuple(path_lens), summary_len)
    LOGGER.debug('Parsed %r from %i tokens', layout, len(tokens))
    return layout


class Segments(typing.NamedTuple):
    shared: typing.List[int]
    paths: typing.List[typing.List[int]]
    summary: typing.List[int]


def split_segments(tokens: typing.Sequence[int],
                   layout: SegmentLayout) -> Segments:
    """Cut a flat token sequence into its segments

    :raises: :py:exc:`~parathink.exceptions.LayoutError`

    """
    if len(tokens) != layout.total:
        raise exceptions.LayoutError(
            '{} tokens do not fit {!r}'.format(len(tokens), layout))
    tokens = list(tokens)
    paths = []
    for k, length in enumerate(layout.path_lens, start=1):
        start = layout.path_start(k)
        paths.append(tokens[start:start + length])
    return Segments(tokens[:layout.shared_len], paths,
                    tokens[layout.summary_start:])


def render_tagged(segments: Segments) -> typing.List[int]:
    """Concatenate segments back into the flattened order"""
    tokens = list(segments.shared)
    for path in segments.paths:
        tokens.extend(path)
    tokens.extend(segments.summary)
    return tokens
