"""Dynamic compressor: downsample, region cross-attention, shared projector.

For a ratio ``r`` the high-resolution map ``f_H`` is pooled to ``f_L``; every
low-resolution patch then attends over the ``r*r`` high-resolution patches of
its cell and adds the result back as a residual::

    f_L = f_L + softmax(phi_q(Q) phi_k(K)^T / sqrt(d_k)) V

with ``Q = f_L`` and ``K = V = f_H`` (raw values, no value/output projection).
The result goes through one MLP shared by all three ratios.
"""
from __future__ import annotations

import math
from enum import Enum

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidInputError, ShapeError
from .structures import FeatureMap

RATIOS = (1, 2, 4)


class DownsampleVariant(str, Enum):
    AVGPOOL = "avgpool"
    DWCONV = "dwconv"
    CONVMLP = "convmlp"


def _check_ratio(r: int) -> None:
    if r not in RATIOS:
        raise InvalidInputError(f"unsupported downsample ratio {r}; expected one of {RATIOS}")


def compressed_grid(rows: int, cols: int, r: int) -> tuple[int, int]:
    _check_ratio(r)
    return -(-rows // r), -(-cols // r)


def compressed_tokens(rows: int, cols: int, r: int) -> int:
    lr, lc = compressed_grid(rows, cols, r)
    return lr * lc


def pad_to_multiple(f: torch.Tensor, r: int) -> torch.Tensor:
    """Edge-replicate ``[rows, cols, C]`` so both sides are multiples of ``r``."""
    rows, cols, _ = f.shape
    pr, pc = (-rows) % r, (-cols) % r
    if pr == 0 and pc == 0:
        return f
    x = f.permute(2, 0, 1).unsqueeze(0)
    x = F.pad(x, (0, pc, 0, pr), mode="replicate")
    return x[0].permute(1, 2, 0)


def cells(f: torch.Tensor, r: int) -> torch.Tensor:
    """Split a padded ``[R*r, Cc*r, C]`` map into ``[R*Cc, r*r, C]`` cells (row-major)."""
    rows, cols, c = f.shape
    x = f.reshape(rows // r, r, cols // r, r, c).permute(0, 2, 1, 3, 4)
    return x.reshape((rows // r) * (cols // r), r * r, c)


class DWConvDown(nn.Module):
    """Depthwise r x r convolution with stride r. Initialised to the average kernel."""

    def __init__(self, channels: int, r: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, r, stride=r, groups=channels)
        nn.init.constant_(self.conv.weight, 1.0 / (r * r))
        nn.init.zeros_(self.conv.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # [rows, cols, C], padded
        y = self.conv(x.permute(2, 0, 1).unsqueeze(0))
        return y[0].permute(1, 2, 0)


class ConvMLPDown(nn.Module):
    def __init__(self, channels: int, r: int):
        super().__init__()
        self.dw = DWConvDown(channels, r)
        self.fc1 = nn.Linear(channels, channels)
        self.fc2 = nn.Linear(channels, channels)
        for fc in (self.fc1, self.fc2):
            nn.init.trunc_normal_(fc.weight, std=0.02, a=-0.04, b=0.04)
            nn.init.zeros_(fc.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(self.dw(x))))


class DynamicCompressor(nn.Module):
    """Weights for all three compression paths.

    ``phi_q``/``phi_k`` project to ``d_k`` channels; ``shared_mlp`` maps
    ``C -> 2*C_lm -> C_lm`` and is the same module for every ratio. Learned
    downsample kernels exist only for the 2x and 4x paths of non-pooling
    variants.
    """

    def __init__(self, channels: int = 32, lm_channels: int = 64, d_k: int | None = None,
                 variant: DownsampleVariant | str = DownsampleVariant.AVGPOOL, seed: int | None = None):
        super().__init__()
        if seed is not None:
            torch.manual_seed(seed)
        self.channels = channels
        self.lm_channels = lm_channels
        self.d_k = d_k if d_k is not None else max(1, channels // 4)
        if self.d_k < 1:
            raise InvalidInputError("d_k must be at least 1")
        self.variant = DownsampleVariant(variant)
        self.phi_q = nn.Linear(channels, self.d_k)
        # a key bias shifts every logit of a cell equally and cancels in the softmax
        self.phi_k = nn.Linear(channels, self.d_k, bias=False)
        self.shared_mlp = nn.Sequential(
            nn.Linear(channels, 2 * lm_channels), nn.GELU(), nn.Linear(2 * lm_channels, lm_channels))
        for m in (self.phi_q, self.phi_k, self.shared_mlp[0], self.shared_mlp[2]):
            nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04)
            if m.bias is not None:
                nn.init.zeros_(m.bias)

        self.down = nn.ModuleDict()
        if self.variant is DownsampleVariant.DWCONV:
            self.down.update({str(r): DWConvDown(channels, r) for r in RATIOS if r > 1})
        elif self.variant is DownsampleVariant.CONVMLP:
            self.down.update({str(r): ConvMLPDown(channels, r) for r in RATIOS if r > 1})

    def forward(self, f_h: FeatureMap, r: int) -> torch.Tensor:
        return compress(f_h, r, self.variant, self)


def downsample(f_h: FeatureMap, r: int, variant: DownsampleVariant | str = DownsampleVariant.AVGPOOL,
               w: DynamicCompressor | None = None) -> FeatureMap:
    _check_ratio(r)
    variant = DownsampleVariant(variant)
    if r == 1:
        return f_h
    x = pad_to_multiple(f_h.values, r)
    if variant is DownsampleVariant.AVGPOOL:
        y = F.avg_pool2d(x.permute(2, 0, 1).unsqueeze(0), r, stride=r)
        return FeatureMap(y[0].permute(1, 2, 0))
    if w is None or w.variant is not variant:
        raise InvalidInputError(f"{variant.value} downsampling needs compressor weights built for it")
    return FeatureMap(w.down[str(r)](x))


def region_attention(f_l: FeatureMap, f_h: FeatureMap, r: int, w: DynamicCompressor,
                     return_weights: bool = False):
    """Residual cross-attention of each low-res patch over its r*r high-res cell."""
    _check_ratio(r)
    expected = compressed_grid(f_h.rows, f_h.cols, r)
    if (f_l.rows, f_l.cols) != expected:
        raise ShapeError(f"f_L grid {f_l.rows}x{f_l.cols} does not match f_H grid "
                         f"{f_h.rows}x{f_h.cols} at ratio {r} (expected {expected[0]}x{expected[1]})")
    if f_l.channels != f_h.channels:
        raise ShapeError("f_L and f_H channel counts differ")

    v = cells(pad_to_multiple(f_h.values, r), r)  # [N, r*r, C]
    q = f_l.flatten()  # [N, C]
    logits = torch.einsum("nd,nkd->nk", w.phi_q(q), w.phi_k(v)) / math.sqrt(w.d_k)
    attn = torch.softmax(logits, dim=-1)
    out = q + torch.einsum("nk,nkc->nc", attn, v)
    fm = FeatureMap(out.reshape(f_l.rows, f_l.cols, -1))
    return (fm, attn) if return_weights else fm


def project_shared(f_l: FeatureMap, w: DynamicCompressor) -> torch.Tensor:
    """Row-major flatten followed by the shared MLP: ``[N, C_lm]`` tokens."""
    if f_l.channels != w.channels:
        raise ShapeError(f"feature map has {f_l.channels} channels, compressor expects {w.channels}")
    return w.shared_mlp(f_l.flatten())


def compress(f_h: FeatureMap, r: int, variant: DownsampleVariant | str | None,
             w: DynamicCompressor) -> torch.Tensor:
    variant = w.variant if variant is None else DownsampleVariant(variant)
    f_l = downsample(f_h, r, variant, w)
    f_l = region_attention(f_l, f_h, r, w)
    return project_shared(f_l, w)
