"""Bit-packed storage for {0,1} weight planes.

Bits are packed row-major into 64-bit words, LSB first; each row is padded
independently to a word boundary so row kernels never need cross-row masks.
Padding bits past `cols` are always zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

WORD_BITS = 64

_BIT_POSITIONS = np.arange(WORD_BITS, dtype=np.uint64)


@dataclass(frozen=True)
class BitPlane:
    words: np.ndarray  # (rows, words_per_row) uint64
    rows: int
    cols: int
    ones_count: int = field(default=-1)

    def __post_init__(self):
        if self.words.dtype != np.uint64 or self.words.ndim != 2:
            raise ValueError("words must be a 2-D uint64 array")
        wpr = (self.cols + WORD_BITS - 1) // WORD_BITS
        if self.words.shape != (self.rows, wpr):
            raise ValueError(
                f"words shape {self.words.shape} inconsistent with "
                f"rows={self.rows}, cols={self.cols}"
            )
        if self.ones_count < 0:
            object.__setattr__(self, "ones_count", _popcount(self.words))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def words_per_row(self) -> int:
        return self.words.shape[1]


def _popcount(words: np.ndarray) -> int:
    return int(np.bitwise_count(words).sum())


def pack(bits: np.ndarray) -> BitPlane:
    """Pack a boolean (or 0/1) matrix into a BitPlane."""
    bits = np.asarray(bits)
    if bits.ndim != 2:
        raise ValueError(f"bits must be 2-D, got shape {bits.shape}")
    rows, cols = bits.shape
    if rows < 1 or cols < 1:
        raise ValueError(f"bits must be at least 1x1, got {bits.shape}")
    bits = bits.astype(bool)
    wpr = (cols + WORD_BITS - 1) // WORD_BITS
    padded = np.zeros((rows, wpr * WORD_BITS), dtype=np.uint64)
    padded[:, :cols] = bits
    lanes = padded.reshape(rows, wpr, WORD_BITS) << _BIT_POSITIONS
    words = np.bitwise_or.reduce(lanes, axis=2)
    return BitPlane(words=words, rows=rows, cols=cols, ones_count=int(bits.sum()))


def unpack(plane: BitPlane) -> np.ndarray:
    """Inverse of pack; returns a boolean matrix."""
    lanes = (plane.words[:, :, None] >> _BIT_POSITIONS) & np.uint64(1)
    bits = lanes.reshape(plane.rows, -1)[:, : plane.cols]
    return bits.astype(bool)


def plane_sparsity(plane: BitPlane) -> float:
    """Fraction of zero bits among the valid (non-padding) bits."""
    total = plane.rows * plane.cols
    return (total - plane.ones_count) / total
