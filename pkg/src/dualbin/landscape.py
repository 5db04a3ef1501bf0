"""Proxy-error analysis of quantized linear layers: grid-searched scale
parameters and MSE loss surfaces under scale perturbation, comparing sign
binarization, 2-bit quantization, and dual binarization.

Conventions (the comparison axes are ours):
- All methods are parameterized by multipliers on their per-group
  initialization scales (binarization: mean-|w|; 2-bit and dual: the
  max-|w|/2 RTN scale), swept over [0.25, 2] by default.
- Surfaces use two axes per method: binarization gets (scale multiplier,
  dummy); 2-bit gets (scale multiplier, code offset delta = axis2 - 1, in
  units of the group scale); dual binarization gets multipliers on
  (alpha1, alpha2).
- The flatness statistic is mean(loss within +-10% of the optimum
  coordinates) / min(loss).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import grouping
from .quantcore import (
    RANGE_ASYMMETRIC,
    QuantSpec,
    round_half_away,
    rtn_quantize,
)

LANDSCAPE_METHODS = ("binarization", "2bit", "fdb")

DEFAULT_GRID = np.linspace(0.25, 2.0, 101)


def proxy_mse(w: np.ndarray, w_hat: np.ndarray, probe_inputs: np.ndarray) -> float:
    """Mean squared output error of the quantized layer over the probe batch."""
    w = np.asarray(w, dtype=np.float64)
    w_hat = np.asarray(w_hat, dtype=np.float64)
    probe_inputs = np.asarray(probe_inputs, dtype=np.float64)
    if w.shape != w_hat.shape:
        raise ValueError(f"shape mismatch: {w.shape} vs {w_hat.shape}")
    if probe_inputs.shape[1] != w.shape[1]:
        raise ValueError(
            f"probe inputs have {probe_inputs.shape[1]} features, "
            f"layer expects {w.shape[1]}"
        )
    d = probe_inputs @ (w - w_hat).T
    return float(np.mean(d * d))


def make_probe(cols: int, batch: int = 256, seed: int = 0) -> np.ndarray:
    """Standard Gaussian probe activations, seeded."""
    return np.random.default_rng(seed).normal(size=(batch, cols))


def _init_scales(w: np.ndarray, method: str, group_size: int) -> np.ndarray:
    rows, cols = w.shape
    ng = grouping.n_groups(cols, group_size)
    s = np.zeros((rows, ng), dtype=np.float64)
    for gi, sl in enumerate(grouping.group_slices(cols, group_size)):
        wg = np.abs(w[:, sl])
        s[:, gi] = wg.mean(axis=1) if method == "binarization" else wg.max(axis=1) / 2.0
    return s


def _reconstruct(
    w: np.ndarray,
    method: str,
    group_size: int,
    s0: np.ndarray,
    m1: float,
    m2: float,
) -> np.ndarray:
    """Quantize-reconstruct w under the method's perturbed parameters."""
    cols = w.shape[1]
    s_full = grouping.expand_per_group(s0, cols, group_size)
    with np.errstate(divide="ignore", invalid="ignore"):
        if method == "binarization":
            alpha = m1 * s_full
            return alpha * np.where(w >= 0, 1.0, -1.0)
        if method == "2bit":
            s = m1 * s_full
            codes = np.clip(round_half_away(np.where(s > 0, w / s, 0.0)), -1, 2)
            return s * (codes + (m2 - 1.0))
        if method == "fdb":
            a1 = 2.0 * m1 * s_full
            a2 = -m2 * s_full
            live = s_full > 0
            b1 = (w - (a1 + a2) / 2.0 >= 0) & live
            b2 = ((-(w - a1 * b1 - a2 / 2.0)) >= 0) & live
            return a1 * b1 + a2 * b2
    raise ValueError(f"unknown method {method!r}")


@dataclass(frozen=True)
class GridSearchResult:
    method: str
    grid: np.ndarray
    best_m1: float
    best_m2: float
    best_loss: float
    levels: np.ndarray  # (rows, n_groups, n_levels) at the optimum
    losses: np.ndarray = field(repr=False)  # full grid, 1-D or 2-D


def _levels_at(method: str, s0: np.ndarray, m1: float, m2: float) -> np.ndarray:
    if method == "binarization":
        a = m1 * s0
        return np.stack([-a, a], axis=-1)
    if method == "2bit":
        s = m1 * s0
        off = m2 - 1.0
        return np.stack([s * (c + off) for c in (-1, 0, 1, 2)], axis=-1)
    a1 = 2.0 * m1 * s0
    a2 = -m2 * s0
    return np.stack([a2, np.zeros_like(a2), a1 + a2, a1], axis=-1)


def grid_search_levels(
    w: np.ndarray,
    probe_inputs: np.ndarray,
    method: str,
    group_size: int = 64,
    grid: np.ndarray | None = None,
) -> GridSearchResult:
    """Exhaustive sweep of the method's scale multiplier(s), minimizing
    proxy_mse; 2-bit and binarization sweep one axis, dual binarization two.
    """
    if method not in LANDSCAPE_METHODS:
        raise ValueError(f"unknown method {method!r}")
    grid = DEFAULT_GRID if grid is None else np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("empty grid")
    w = grouping.validate_weight_matrix(w)
    probe_inputs = np.asarray(probe_inputs, dtype=np.float64)
    s0 = _init_scales(w, method, group_size)

    if method == "fdb":
        losses = np.empty((grid.size, grid.size))
        for i, m1 in enumerate(grid):
            for j, m2 in enumerate(grid):
                losses[i, j] = proxy_mse(
                    w, _reconstruct(w, method, group_size, s0, m1, m2), probe_inputs
                )
        i, j = np.unravel_index(int(np.argmin(losses)), losses.shape)
        best_m1, best_m2 = float(grid[i]), float(grid[j])
        best_loss = float(losses[i, j])
    else:
        m2_fixed = 1.0
        losses = np.array(
            [
                proxy_mse(
                    w,
                    _reconstruct(w, method, group_size, s0, m, m2_fixed),
                    probe_inputs,
                )
                for m in grid
            ]
        )
        i = int(np.argmin(losses))
        best_m1, best_m2 = float(grid[i]), m2_fixed
        best_loss = float(losses[i])
    return GridSearchResult(
        method=method,
        grid=grid,
        best_m1=best_m1,
        best_m2=best_m2,
        best_loss=best_loss,
        levels=_levels_at(method, s0, best_m1, best_m2),
        losses=losses,
    )


@dataclass(frozen=True)
class LandscapeGrid:
    method: str
    axis1: np.ndarray
    axis2: np.ndarray
    loss: np.ndarray
    min_loss: float
    argmin: tuple[int, int]
    center_m1: float
    center_m2: float


def perturb_surface(
    w: np.ndarray,
    probe_inputs: np.ndarray,
    method: str,
    group_size: int = 64,
    axis1: np.ndarray | None = None,
    axis2: np.ndarray | None = None,
    center: tuple[float, float] | None = None,
) -> LandscapeGrid:
    """Loss surface over two perturbation axes, centered at the grid-searched
    optimum unless an explicit center is given. Axis values multiply the
    center coordinates (the 2-bit offset axis adds (value - 1) code units).
    """
    if method not in LANDSCAPE_METHODS:
        raise ValueError(f"unknown method {method!r}")
    axis1 = DEFAULT_GRID if axis1 is None else np.asarray(axis1, dtype=np.float64)
    axis2 = DEFAULT_GRID if axis2 is None else np.asarray(axis2, dtype=np.float64)
    if axis1.size == 0 or axis2.size == 0:
        raise ValueError("empty perturbation axis")
    w = grouping.validate_weight_matrix(w)
    s0 = _init_scales(w, method, group_size)
    if center is None:
        search = grid_search_levels(w, probe_inputs, method, group_size)
        center = (search.best_m1, search.best_m2)
    c1, c2 = center

    loss = np.empty((axis1.size, axis2.size))
    for i, d1 in enumerate(axis1):
        if method == "binarization":
            # axis2 is a dummy direction; loss constant along it
            val = proxy_mse(
                w, _reconstruct(w, method, group_size, s0, c1 * d1, 1.0), probe_inputs
            )
            loss[i, :] = val
            continue
        for j, d2 in enumerate(axis2):
            if method == "2bit":
                m1, m2 = c1 * d1, c2 + (d2 - 1.0)
            else:
                m1, m2 = c1 * d1, c2 * d2
            loss[i, j] = proxy_mse(
                w, _reconstruct(w, method, group_size, s0, m1, m2), probe_inputs
            )
    i, j = np.unravel_index(int(np.argmin(loss)), loss.shape)
    return LandscapeGrid(
        method=method,
        axis1=axis1,
        axis2=axis2,
        loss=loss,
        min_loss=float(loss[i, j]),
        argmin=(int(i), int(j)),
        center_m1=float(c1),
        center_m2=float(c2),
    )


def flatness(grid: LandscapeGrid, radius: float = 0.1) -> float:
    """mean(loss within +-radius of the optimum axes) / min(loss)."""
    i0, j0 = grid.argmin
    a1c, a2c = grid.axis1[i0], grid.axis2[j0]
    sel1 = np.abs(grid.axis1 - a1c) <= radius * max(abs(a1c), 1.0)
    sel2 = np.abs(grid.axis2 - a2c) <= radius * max(abs(a2c), 1.0)
    window = grid.loss[np.ix_(sel1, sel2)]
    return float(window.mean() / grid.min_loss)


def surface_csv_rows(grid: LandscapeGrid):
    """(axis1, axis2, loss) rows for CSV export."""
    for i, a in enumerate(grid.axis1):
        for j, b in enumerate(grid.axis2):
            yield (float(a), float(b), float(grid.loss[i, j]))
