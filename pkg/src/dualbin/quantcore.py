"""Group-wise quantizers: uniform round-to-nearest, sign binarization, and
the dual-binarization split that represents each weight as
alpha1 * b1 + alpha2 * b2 with two {0,1} bit planes.

All scales are per (output row, column group). Grouping follows
`grouping.group_slices`: contiguous runs of `group_size` input features,
with an optional short remainder group.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grouping
from .bitplane import BitPlane, pack, unpack

RANGE_SYMMETRIC = "symmetric"
RANGE_ASYMMETRIC = "asymmetric-shifted"


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    group_size: int
    range_mode: str = RANGE_SYMMETRIC

    def __post_init__(self):
        if self.bits not in (1, 2, 3, 4):
            raise ValueError(f"bits must be in {{1,2,3,4}}, got {self.bits}")
        if self.group_size < 1:
            raise ValueError(f"group_size must be >= 1, got {self.group_size}")
        if self.range_mode not in (RANGE_SYMMETRIC, RANGE_ASYMMETRIC):
            raise ValueError(f"unknown range_mode {self.range_mode!r}")
        if self.range_mode == RANGE_ASYMMETRIC and self.bits != 2:
            raise ValueError("asymmetric-shifted range is defined for bits=2 only")

    def code_range(self) -> tuple[int, int]:
        if self.range_mode == RANGE_ASYMMETRIC:
            return (-1, 2)
        half = 2 ** (self.bits - 1)
        return (-half, half - 1)


@dataclass(frozen=True)
class GroupedIntQuant:
    codes: np.ndarray   # (rows, cols) int8
    scales: np.ndarray  # (rows, n_groups) float64, 0 for all-zero groups
    spec: QuantSpec

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape


@dataclass(frozen=True)
class ScalePairs:
    """Per-group (alpha1, alpha2) scale pairs, shape (rows, n_groups).

    Valid groups satisfy alpha2 < 0 < alpha1 + alpha2 < alpha1; degenerate
    (all-zero source) groups carry (0, 0) and are skipped everywhere.
    """

    alpha1: np.ndarray
    alpha2: np.ndarray

    def __post_init__(self):
        if self.alpha1.shape != self.alpha2.shape:
            raise ValueError("alpha1/alpha2 shape mismatch")

    def degenerate_mask(self) -> np.ndarray:
        return (self.alpha1 == 0) & (self.alpha2 == 0)

    def validate_ordering(self):
        ok = self.degenerate_mask() | (
            (self.alpha1 > 0) & (self.alpha2 < 0) & (self.alpha1 + self.alpha2 > 0)
        )
        if not ok.all():
            r, g = np.argwhere(~ok)[0]
            raise ValueError(
                f"scale ordering alpha2 < 0 < alpha1+alpha2 < alpha1 violated "
                f"at group (row={r}, group={g}): "
                f"alpha1={self.alpha1[r, g]}, alpha2={self.alpha2[r, g]}"
            )


@dataclass(frozen=True)
class DualBinaryWeight:
    plane1: BitPlane
    plane2: BitPlane
    pairs: ScalePairs
    group_size: int

    def __post_init__(self):
        if self.plane1.shape != self.plane2.shape:
            raise ValueError("bit planes must have identical shape")
        ng = grouping.n_groups(self.plane1.cols, self.group_size)
        if self.pairs.alpha1.shape != (self.plane1.rows, ng):
            raise ValueError("scale pairs shape inconsistent with planes")

    @property
    def shape(self) -> tuple[int, int]:
        return self.plane1.shape


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero."""
    return np.where(x >= 0, np.floor(x + 0.5), np.ceil(x - 0.5))


def unit_step(x: np.ndarray) -> np.ndarray:
    """Unit step with the boundary assigned to 1: H(x) = 1 iff x >= 0."""
    return x >= 0


def _grouped(w: np.ndarray, group_size: int):
    slices = grouping.group_slices(w.shape[1], group_size)
    for gi, sl in enumerate(slices):
        yield gi, w[:, sl]


def rtn_quantize(w: np.ndarray, spec: QuantSpec) -> GroupedIntQuant:
    """Uniform round-to-nearest quantization with per-group max-abs scales.

    s = max(|w_group|) / 2^(bits-1); codes = clamp(round(w/s), code range).
    All-zero groups get s = 0 and zero codes.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
        raise ValueError(f"weight matrix must be 2-D and non-empty, got {w.shape}")
    rows, cols = w.shape
    ng = grouping.n_groups(cols, spec.group_size)
    codes = np.zeros((rows, cols), dtype=np.int8)
    scales = np.zeros((rows, ng), dtype=np.float64)
    lo, hi = spec.code_range()
    half = 2 ** (spec.bits - 1)
    for gi, wg in _grouped(w, spec.group_size):
        if not np.all(np.isfinite(wg)):
            r = int(np.flatnonzero(~np.isfinite(wg).all(axis=1))[0])
            raise ValueError(
                f"non-finite weight in group (row={r}, group={gi})"
            )
        s = np.abs(wg).max(axis=1) / half
        scales[:, gi] = s
        nz = s > 0
        if nz.any():
            q = round_half_away(wg[nz] / s[nz, None])
            sl = grouping.group_slices(cols, spec.group_size)[gi]
            codes[np.flatnonzero(nz), sl] = np.clip(q, lo, hi).astype(np.int8)
    return GroupedIntQuant(codes=codes, scales=scales, spec=spec)


def dequantize(q: GroupedIntQuant) -> np.ndarray:
    """w_hat = s * codes, per group."""
    cols = q.codes.shape[1]
    s_full = grouping.expand_per_group(q.scales, cols, q.spec.group_size)
    return s_full * q.codes.astype(np.float64)


def sign_binarize(w: np.ndarray, group_size: int) -> tuple[BitPlane, np.ndarray]:
    """Sign binarization: bit = 1 where w >= 0 (level +1), else 0 (level -1),
    with a per-group mean-absolute-value scale.

    Reconstruction is scale * (2*bit - 1).
    """
    w = grouping.validate_weight_matrix(w)
    rows, cols = w.shape
    ng = grouping.n_groups(cols, group_size)
    scales = np.zeros((rows, ng), dtype=np.float64)
    for gi, wg in _grouped(w, group_size):
        scales[:, gi] = np.abs(wg).mean(axis=1)
    return pack(w >= 0), scales


def sign_reconstruct(plane: BitPlane, scales: np.ndarray, group_size: int) -> np.ndarray:
    bits = unpack(plane).astype(np.float64)
    s_full = grouping.expand_per_group(scales, plane.cols, group_size)
    return s_full * (2.0 * bits - 1.0)


def fdb_init(q: GroupedIntQuant) -> ScalePairs:
    """Initial scale pairs (alpha1, alpha2) = (2s, -s) from a 2-bit quant.

    All-zero (s = 0) groups are flagged degenerate via (0, 0).
    """
    if q.spec.bits != 2:
        raise ValueError(f"dual-binarization init requires bits=2, got {q.spec.bits}")
    return ScalePairs(alpha1=2.0 * q.scales, alpha2=-q.scales.copy())


def fdb_split(w: np.ndarray, pairs: ScalePairs, group_size: int) -> DualBinaryWeight:
    """Split real weights into two {0,1} planes by dual thresholding.

    b1 = H(w - (a1+a2)/2); b2 = H(-(w - a1*b1 - a2/2)). With valid ordering
    this maps every weight to its nearest level among {a2, 0, a1+a2, a1}.
    """
    w = grouping.validate_weight_matrix(w)
    pairs.validate_ordering()
    rows, cols = w.shape
    a1 = grouping.expand_per_group(pairs.alpha1, cols, group_size)
    a2 = grouping.expand_per_group(pairs.alpha2, cols, group_size)
    b1 = unit_step(w - (a1 + a2) / 2.0)
    b2 = unit_step(-(w - a1 * b1 - a2 / 2.0))
    degenerate = grouping.expand_per_group(
        pairs.degenerate_mask(), cols, group_size
    )
    b1 &= ~degenerate
    b2 &= ~degenerate
    return DualBinaryWeight(
        plane1=pack(b1), plane2=pack(b2), pairs=pairs, group_size=group_size
    )


def fdb_reconstruct(d: DualBinaryWeight) -> np.ndarray:
    """w_hat = alpha1 * b1 + alpha2 * b2, per group."""
    cols = d.shape[1]
    a1 = grouping.expand_per_group(d.pairs.alpha1, cols, d.group_size)
    a2 = grouping.expand_per_group(d.pairs.alpha2, cols, d.group_size)
    b1 = unpack(d.plane1).astype(np.float64)
    b2 = unpack(d.plane2).astype(np.float64)
    return a1 * b1 + a2 * b2


def fdb_quantize(w: np.ndarray, group_size: int) -> DualBinaryWeight:
    """Convenience: 2-bit asymmetric-shifted RTN init followed by the split."""
    spec = QuantSpec(bits=2, group_size=group_size, range_mode=RANGE_ASYMMETRIC)
    q = rtn_quantize(w, spec)
    return fdb_split(w, fdb_init(q), group_size)
