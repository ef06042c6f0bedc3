"""Positional-embedding table rescaled per input with bilinear interpolation.

One large table is kept at ``TABLE_GRID`` resolution and resampled to the
native patch grid of every input (align-corners sampling, so the native grid
maps back onto the table exactly).
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import InvalidInputError, ShapeError
from .geometry import PatchGrid

# 2048-pixel sides at p=16
TABLE_GRID = 128
INIT_STD = 0.02


@dataclass(frozen=True)
class PositionTable:
    values: torch.Tensor  # [grid_rows, grid_cols, channels]

    @property
    def grid_rows(self) -> int:
        return self.values.shape[0]

    @property
    def grid_cols(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


def build_table(grid_rows: int = TABLE_GRID, grid_cols: int = TABLE_GRID, channels: int = 32,
                seed: int = 0, dtype: torch.dtype = torch.float32) -> PositionTable:
    if min(grid_rows, grid_cols, channels) <= 0:
        raise InvalidInputError("table dimensions must be positive")
    gen = torch.Generator().manual_seed(seed)
    values = torch.randn(grid_rows, grid_cols, channels, generator=gen, dtype=torch.float64) * INIT_STD
    return PositionTable(values.to(dtype))


def source_coords(source: int, target: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Align-corners sample positions: lower index, upper index, upper weight."""
    if target == 1:
        u = torch.tensor([(source - 1) / 2], dtype=torch.float64)
    else:
        i = torch.arange(target, dtype=torch.float64)
        u = i * (source - 1) / (target - 1)
    lo = torch.floor(u).long().clamp(0, source - 1)
    hi = (lo + 1).clamp(max=source - 1)
    frac = u - lo.to(torch.float64)
    return lo, hi, frac


def interpolate_values(values: torch.Tensor, rows: int, cols: int) -> torch.Tensor:
    """Bilinearly resample a ``[G_r, G_c, C]`` tensor to ``[rows, cols, C]``.

    Differentiable in ``values``; used directly by the encoder so the table can
    be trained.
    """
    if rows < 1 or cols < 1:
        raise InvalidInputError(f"target grid must be non-empty, got {rows}x{cols}")
    g_r, g_c, _ = values.shape
    r0, r1, fr = source_coords(g_r, rows)
    c0, c1, fc = source_coords(g_c, cols)
    fr = fr.to(values.dtype)[:, None, None]
    fc = fc.to(values.dtype)[None, :, None]

    top = values[r0] * (1 - fr) + values[r1] * fr  # [rows, G_c, C]
    return top[:, c0] * (1 - fc) + top[:, c1] * fc


def interpolate(table: PositionTable, target: PatchGrid) -> torch.Tensor:
    return interpolate_values(table.values, target.rows, target.cols)


def apply(tokens: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
    """``x = x + P`` on flattened ``[N, C]`` tokens."""
    if pos.dim() == 3:
        pos = pos.reshape(-1, pos.shape[-1])
    if tokens.shape != pos.shape:
        raise ShapeError(f"token shape {tuple(tokens.shape)} != position shape {tuple(pos.shape)}")
    return tokens + pos
