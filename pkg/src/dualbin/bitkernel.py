"""Sparsity-exploiting forward kernels over packed bit planes, plus the
transformer inference cost model.

The kernels accumulate real-valued activations under the bit masks (weights
are binary, activations are not), skipping whole zero words.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import grouping
from .bitplane import WORD_BITS, _BIT_POSITIONS, BitPlane, plane_sparsity
from .quantcore import DualBinaryWeight

METHODS = ("fp16", "3bit", "2bit", "binarization", "fdb")

# Per-weight-op cost relative to an fp16 multiply-accumulate. k-bit integer
# MACs are billed at k/16; a binary plane needs accumulates only, billed as
# half a 2-bit MAC (= 1/16). fdb pays for two planes, each skipping its
# zero weights.
_WEIGHT_OP_DISCOUNT = {
    "fp16": 1.0,
    "3bit": 3.0 / 16.0,
    "2bit": 2.0 / 16.0,
    "binarization": 1.0 / 16.0,
    "fdb": 2.0 / 16.0,
}

# Bits of storage per weight for the quantized payload (scales counted
# separately).
_WEIGHT_STORAGE_BITS = {
    "fp16": 16.0,
    "3bit": 3.0,
    "2bit": 2.0,
    "binarization": 1.0,
    "fdb": 2.0,
}


@dataclass(frozen=True)
class ArchDims:
    """Decoder-only transformer dimensions for the cost model."""

    n_layers: int
    d_model: int
    d_ffn: int
    vocab_size: int
    n_heads: int
    n_ffn_mats: int = 3  # gated FFN: up, gate, down
    group_size: int = 64

    def weight_macs_per_token(self) -> float:
        attn = 4 * self.d_model * self.d_model
        ffn = self.n_ffn_mats * self.d_model * self.d_ffn
        head = self.d_model * self.vocab_size
        return self.n_layers * (attn + ffn) + head

    def attention_macs(self, seq_len: int) -> float:
        # score and value products over the causal prefix
        pairs = seq_len * (seq_len + 1) / 2
        return self.n_layers * 2 * pairs * self.d_model

    def quantized_weight_count(self) -> int:
        # all linear projections; embeddings and LM head stay fp16
        return self.n_layers * (
            4 * self.d_model * self.d_model + self.n_ffn_mats * self.d_model * self.d_ffn
        )

    def fp_weight_count(self) -> int:
        # token embeddings + LM head
        return 2 * self.vocab_size * self.d_model


@dataclass(frozen=True)
class CostReport:
    method: str
    model_size_bytes: int
    sparsity_plane1: float
    sparsity_plane2: float
    sparsity_avg: float
    flops_fp: float
    equiv_flops_method: float


def masked_gemv(plane: BitPlane, x: np.ndarray) -> np.ndarray:
    """out[r] = sum of x[j] over set bits of row r.

    Words that are entirely zero are skipped; set bits of surviving words
    are accumulated in double precision.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (plane.cols,):
        raise ValueError(f"x has shape {x.shape}, expected ({plane.cols},)")
    wpr = plane.words_per_row
    x_pad = np.zeros(wpr * WORD_BITS, dtype=np.float64)
    x_pad[: plane.cols] = x
    x_words = x_pad.reshape(wpr, WORD_BITS)
    out = np.zeros(plane.rows, dtype=np.float64)
    for r in range(plane.rows):
        row_words = plane.words[r]
        nz = np.flatnonzero(row_words)
        if nz.size == 0:
            continue
        lanes = (row_words[nz, None] >> _BIT_POSITIONS) & np.uint64(1)
        out[r] = float((lanes * x_words[nz]).sum())
    return out


def _masked_group_sums(plane: BitPlane, x: np.ndarray, group_size: int) -> np.ndarray:
    """Per-(row, group) masked partial sums, zero-word skip as in masked_gemv."""
    wpr = plane.words_per_row
    ng = grouping.n_groups(plane.cols, group_size)
    x_pad = np.zeros(wpr * WORD_BITS, dtype=np.float64)
    x_pad[: plane.cols] = x
    gidx = grouping.group_index_per_column(plane.cols, group_size)
    gidx_pad = np.full(wpr * WORD_BITS, ng - 1, dtype=np.int64)
    gidx_pad[: plane.cols] = gidx
    out = np.zeros((plane.rows, ng), dtype=np.float64)
    for r in range(plane.rows):
        row_words = plane.words[r]
        nz = np.flatnonzero(row_words)
        if nz.size == 0:
            continue
        lanes = ((row_words[nz, None] >> _BIT_POSITIONS) & np.uint64(1)).reshape(-1)
        cols = (nz[:, None] * WORD_BITS + np.arange(WORD_BITS)).reshape(-1)
        contrib = lanes * x_pad[cols]
        np.add.at(out[r], gidx_pad[cols], contrib)
    return out


def fdb_forward(d: DualBinaryWeight, x: np.ndarray) -> np.ndarray:
    """y = alpha1 * (b1 (x) masked-sum) + alpha2 * (b2 (x) masked-sum), with
    each group's partial sums scaled by that group's alphas before the
    cross-group reduction."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (d.shape[1],):
        raise ValueError(f"x has shape {x.shape}, expected ({d.shape[1]},)")
    s1 = _masked_group_sums(d.plane1, x, d.group_size)
    s2 = _masked_group_sums(d.plane2, x, d.group_size)
    return (d.pairs.alpha1 * s1 + d.pairs.alpha2 * s2).sum(axis=1)


def cost_model(
    arch: ArchDims,
    seq_len: int,
    method: str,
    sparsity_plane1: float = 0.0,
    sparsity_plane2: float = 0.0,
) -> CostReport:
    """Forward-pass FLOPs and storage accounting (2 FLOPs per MAC).

    equiv_flops = weight_flops * discount(method) * (1 - sparsity)
                  + attention flops, with the binarization footnote honored:
    sign binarization reports sparsity 0 because its levels are +-1.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}, expected one of {METHODS}")
    if seq_len < 0:
        raise ValueError("seq_len must be >= 0")
    if method == "binarization":
        sparsity_plane1 = sparsity_plane2 = 0.0
    if method in ("fp16", "3bit"):
        sparsity_plane1 = sparsity_plane2 = 0.0
    if method == "2bit":
        sparsity_plane2 = sparsity_plane1
    sparsity_avg = (sparsity_plane1 + sparsity_plane2) / 2.0

    weight_flops = 2.0 * arch.weight_macs_per_token() * seq_len
    attn_flops = 2.0 * arch.attention_macs(seq_len)
    flops_fp = weight_flops + attn_flops

    discount = _WEIGHT_OP_DISCOUNT[method]
    equiv = weight_flops * discount * (1.0 - sparsity_avg) + attn_flops
    if method == "fp16":
        equiv = flops_fp

    qcount = arch.quantized_weight_count()
    n_scales = qcount / arch.group_size
    if method == "fdb":
        n_scales *= 2
    if method == "fp16":
        size_bits = 16.0 * (qcount + arch.fp_weight_count())
    else:
        size_bits = (
            _WEIGHT_STORAGE_BITS[method] * qcount
            + 16.0 * n_scales
            + 16.0 * arch.fp_weight_count()
        )
    return CostReport(
        method=method,
        model_size_bytes=int(size_bits / 8),
        sparsity_plane1=sparsity_plane1,
        sparsity_plane2=sparsity_plane2,
        sparsity_avg=sparsity_avg,
        flops_fp=flops_fp,
        equiv_flops_method=equiv,
    )


def cost_report_dict(report: CostReport) -> dict:
    return asdict(report)


LLAMA1_7B = ArchDims(
    n_layers=32, d_model=4096, d_ffn=11008, vocab_size=32000, n_heads=32
)
