"""
Path-aware attention masks. A token sees a key when the key lies in the
shared context, when the token itself is a summary token, or when both share
a reasoning path; on top of that the usual causal restriction applies.

Masks are materialised densely, one boolean row per attending token.

"""
from __future__ import annotations

import dataclasses
import logging

import numpy as np

from parathink import constants, exceptions, layout as layout_

LOGGER = logging.getLogger(__name__)

PGM_MAGIC = b'P5'
PGM_VISIBLE = 0xFF
PGM_HIDDEN = 0x00


@dataclasses.dataclass(frozen=True, eq=False)
class PaMask:
    """A visibility matrix, row ``i`` attending to column ``j``

    :var numpy.ndarray bits: ``n x n`` boolean matrix

    """
    bits: np.ndarray

    def __post_init__(self):
        if self.bits.ndim != 2 or self.bits.shape[0] != self.bits.shape[1]:
            raise exceptions.ShapeError(
                'Mask must be square, got {}'.format(self.bits.shape))
        self.bits.setflags(write=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PaMask):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)

    def __repr__(self) -> str:
        return '<PaMask n={} popcount={}>'.format(self.n, self.popcount())

    @property
    def n(self) -> int:
        return self.bits.shape[0]

    def popcount(self) -> int:
        return int(np.count_nonzero(self.bits))

    def row(self, i: int) -> np.ndarray:
        return self.bits[i]

    def visible_columns(self, i: int) -> np.ndarray:
        """Return the indices row ``i`` may attend to, in ascending order"""
        return np.flatnonzero(self.bits[i])


def is_visible(layout: layout_.SegmentLayout, i: int, j: int) -> bool:
    """Return whether token ``i`` may see token ``j``, ignoring causality

    :raises: :py:exc:`~parathink.exceptions.LayoutError`

    """
    row, column = layout_.role_of(layout, i), layout_.role_of(layout, j)
    if column == layout_.SHARED_CONTEXT or row == layout_.SUMMARY:
        return True
    return row.segment == layout_.Segment.PATH and row == column


def build_pa_mask(layout: layout_.SegmentLayout) -> PaMask:
    """Build the path-aware mask for ``layout``

    :rtype: PaMask

    """
    ids = layout_.path_ids(layout)
    same_path = (ids[:, None] == ids[None, :]) & (ids[:, None] > 0)
    visible = (ids[None, :] == 0) | (ids[:, None] == -1) | same_path
    bits = np.tril(visible)
    LOGGER.debug('Built Pa-mask for %r', layout)
    return PaMask(bits)


def build_causal_mask(n: int) -> PaMask:
    """Build the lower-triangular mask of plain causal attention"""
    return PaMask(np.tril(np.ones((n, n), dtype=bool)))


def build_mask_for(layout: layout_.SegmentLayout, mode: str) -> PaMask:
    """Return the mask a decode mode implies for ``layout``

    Sequential decoding is one causal chain; every other mode isolates paths.

    """
    if mode == constants.MODE_SEQUENTIAL:
        return build_causal_mask(layout.total)
    return build_pa_mask(layout)


def mask_to_pgm(mask: PaMask) -> bytes:
    """Render the mask as a binary PGM image, visible cells white

    :rtype: bytes

    """
    header = b'%s\n%d %d\n255\n' % (PGM_MAGIC, mask.n, mask.n)
    pixels = np.where(mask.bits, PGM_VISIBLE, PGM_HIDDEN).astype(np.uint8)
    return header + pixels.tobytes()
