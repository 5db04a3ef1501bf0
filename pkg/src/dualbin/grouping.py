"""Group bookkeeping shared by the quantizers and kernels.

Weights are grouped along the input-feature (column) axis. A group is a
contiguous run of `group_size` columns; when the column count is not
divisible by the group size, the final group is a shorter remainder group
with its own scale (no padding).
"""

from __future__ import annotations

import numpy as np


def group_slices(cols: int, group_size: int) -> list[slice]:
    """Column slices covering [0, cols), last one possibly short."""
    if cols < 1:
        raise ValueError(f"cols must be >= 1, got {cols}")
    if group_size < 1:
        raise ValueError(f"group_size must be >= 1, got {group_size}")
    return [slice(a, min(a + group_size, cols)) for a in range(0, cols, group_size)]


def n_groups(cols: int, group_size: int) -> int:
    return (cols + group_size - 1) // group_size


def has_remainder_group(cols: int, group_size: int) -> bool:
    return cols % group_size != 0


def group_index_per_column(cols: int, group_size: int) -> np.ndarray:
    """Maps each column index to its group index."""
    return np.arange(cols) // group_size


def expand_per_group(values: np.ndarray, cols: int, group_size: int) -> np.ndarray:
    """Broadcast a (rows, n_groups) per-group array to full (rows, cols)."""
    idx = group_index_per_column(cols, group_size)
    return values[:, idx]


def validate_weight_matrix(w: np.ndarray) -> np.ndarray:
    """Check the dense-weight invariants and return the array as float64."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"weight matrix must be 2-D, got shape {w.shape}")
    if w.shape[0] < 1 or w.shape[1] < 1:
        raise ValueError(f"weight matrix must be at least 1x1, got {w.shape}")
    if not np.all(np.isfinite(w)):
        bad = np.argwhere(~np.isfinite(w))[0]
        raise ValueError(
            f"weight matrix contains non-finite entry at "
            f"(row={bad[0]}, col={bad[1]})"
        )
    return w
