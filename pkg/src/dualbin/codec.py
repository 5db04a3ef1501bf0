"""Entropy accounting and canonical-Huffman coding of bit planes.

Quantifies how far below 2 bits/weight the two planes can be stored: each
weight contributes one bit to each plane, and a plane with one-density p
costs the binary entropy of p per bit when entropy-coded.

Encoded blob layout (little-endian):
    magic   4 bytes  b"DBP1"
    symbol_bits  uint8 (4 or 8)
    rows    uint32
    cols    uint32
    n_payload_bytes uint64
    code lengths  2**symbol_bits bytes (uint8 per symbol, 0 = absent)
    payload bytes (canonical Huffman bitstream, MSB-first within bytes)

The plane's valid bits are serialized row-major, padded with zeros to a
symbol boundary, and coded as fixed-width symbols. Canonical code
assignment: shorter lengths first, ties broken by symbol value.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass

import numpy as np

from .bitplane import BitPlane, pack, plane_sparsity, unpack
from .quantcore import DualBinaryWeight

MAGIC = b"DBP1"


@dataclass(frozen=True)
class PlaneStats:
    density: float
    shannon_bits_per_weight: float
    encoded_bits_per_weight: float


def binary_entropy(p: float) -> float:
    """Entropy of a Bernoulli(p) bit, in bits; 0*log0 = 0."""
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return float(-p * np.log2(p) - (1.0 - p) * np.log2(1.0 - p))


def plane_entropy(plane: BitPlane) -> PlaneStats:
    """Shannon bound for the plane; encoded cost filled in by huffman_encode."""
    density = 1.0 - plane_sparsity(plane)
    return PlaneStats(
        density=density,
        shannon_bits_per_weight=binary_entropy(density),
        encoded_bits_per_weight=float("nan"),
    )


def effective_bits(d: DualBinaryWeight) -> float:
    """Entropy-coded storage cost per original weight across both planes."""
    return (
        plane_entropy(d.plane1).shannon_bits_per_weight
        + plane_entropy(d.plane2).shannon_bits_per_weight
    )


def _plane_symbols(plane: BitPlane, symbol_bits: int) -> np.ndarray:
    bits = unpack(plane).reshape(-1)
    pad = (-bits.size) % symbol_bits
    if pad:
        bits = np.concatenate([bits, np.zeros(pad, dtype=bool)])
    weights = 1 << np.arange(symbol_bits - 1, -1, -1)
    return bits.reshape(-1, symbol_bits).astype(np.int64) @ weights


def _huffman_lengths(counts: np.ndarray) -> np.ndarray:
    """Code length per symbol (0 for absent symbols)."""
    lengths = np.zeros(counts.size, dtype=np.uint8)
    present = np.flatnonzero(counts)
    if present.size == 1:
        lengths[present[0]] = 1
        return lengths
    heap = [(int(counts[s]), int(s), (int(s),)) for s in present]
    heapq.heapify(heap)
    tiebreak = counts.size
    while len(heap) > 1:
        c1, _, s1 = heapq.heappop(heap)
        c2, _, s2 = heapq.heappop(heap)
        merged = s1 + s2
        for s in merged:
            lengths[s] += 1
        heapq.heappush(heap, (c1 + c2, tiebreak, merged))
        tiebreak += 1
    return lengths


def _canonical_codes(lengths: np.ndarray) -> dict[int, tuple[int, int]]:
    """symbol -> (code, length), canonical order (length, symbol)."""
    order = sorted(
        (int(l), int(s)) for s, l in enumerate(lengths) if l > 0
    )
    codes = {}
    code = 0
    prev_len = order[0][0] if order else 0
    for length, sym in order:
        code <<= length - prev_len
        codes[sym] = (code, length)
        code += 1
        prev_len = length
    return codes


def huffman_encode(plane: BitPlane, symbol_bits: int = 8) -> tuple[bytes, PlaneStats]:
    """Canonical Huffman coding of the plane; lossless (see huffman_decode)."""
    if symbol_bits not in (4, 8):
        raise ValueError(f"symbol_bits must be 4 or 8, got {symbol_bits}")
    symbols = _plane_symbols(plane, symbol_bits)
    n_sym = 1 << symbol_bits
    counts = np.bincount(symbols, minlength=n_sym)
    lengths = _huffman_lengths(counts)
    codes = _canonical_codes(lengths)

    code_arr = np.zeros(n_sym, dtype=np.uint32)
    len_arr = np.zeros(n_sym, dtype=np.uint8)
    for s, (c, l) in codes.items():
        code_arr[s] = c
        len_arr[s] = l

    # emit MSB-first bitstream
    sym_lens = len_arr[symbols].astype(np.int64)
    total_bits = int(sym_lens.sum())
    out_bits = np.zeros(total_bits + (-total_bits) % 8, dtype=np.uint8)
    pos = np.concatenate([[0], np.cumsum(sym_lens)[:-1]])
    sym_codes = code_arr[symbols].astype(np.int64)
    max_len = int(sym_lens.max())
    for bit in range(max_len):
        sel = sym_lens > bit
        shift = sym_lens[sel] - 1 - bit
        out_bits[pos[sel] + bit] = (sym_codes[sel] >> shift) & 1
    payload = np.packbits(out_bits).tobytes()

    header = MAGIC + struct.pack(
        "<BIIQ", symbol_bits, plane.rows, plane.cols, len(payload)
    )
    blob = header + lengths.tobytes() + payload

    density = 1.0 - plane_sparsity(plane)
    n_weights = plane.rows * plane.cols
    stats = PlaneStats(
        density=density,
        shannon_bits_per_weight=binary_entropy(density),
        encoded_bits_per_weight=8.0 * len(blob) / n_weights,
    )
    return blob, stats


def huffman_decode(blob: bytes) -> BitPlane:
    if blob[:4] != MAGIC:
        raise ValueError("bad magic; not an encoded bit plane")
    symbol_bits, rows, cols, n_payload = struct.unpack("<BIIQ", blob[4:21])
    n_sym = 1 << symbol_bits
    lengths = np.frombuffer(blob[21 : 21 + n_sym], dtype=np.uint8)
    payload = blob[21 + n_sym : 21 + n_sym + n_payload]
    codes = _canonical_codes(lengths)
    # decode by (length, code) lookup
    by_len: dict[int, dict[int, int]] = {}
    for sym, (code, length) in codes.items():
        by_len.setdefault(length, {})[code] = sym

    total_bits = rows * cols
    n_symbols = (total_bits + symbol_bits - 1) // symbol_bits
    stream = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))
    symbols = np.empty(n_symbols, dtype=np.int64)
    i = 0
    code = 0
    length = 0
    out = 0
    max_len = max(by_len) if by_len else 0
    while out < n_symbols:
        code = (code << 1) | int(stream[i])
        i += 1
        length += 1
        table = by_len.get(length)
        if table is not None and code in table:
            symbols[out] = table[code]
            out += 1
            code = 0
            length = 0
        elif length > max_len:
            raise ValueError("corrupt payload: code length overrun")

    weights = 1 << np.arange(symbol_bits - 1, -1, -1)
    bits = ((symbols[:, None] & weights) > 0).reshape(-1)[:total_bits]
    return pack(bits.reshape(rows, cols))


def symbol_entropy_bits_per_weight(plane: BitPlane, symbol_bits: int = 8) -> float:
    """Empirical entropy of the fixed-width symbol histogram, per weight."""
    symbols = _plane_symbols(plane, symbol_bits)
    counts = np.bincount(symbols, minlength=1 << symbol_bits)
    p = counts[counts > 0] / counts.sum()
    h_per_symbol = float(-(p * np.log2(p)).sum())
    return h_per_symbol * symbols.size / (plane.rows * plane.cols)
