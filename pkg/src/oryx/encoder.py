"""Toy native-resolution ViT encoder.

patch embedding -> + interpolated position table -> L pre-norm blocks run over a
packed batch with segment-local attention -> one feature map per input.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn as nn

from . import posembed
from .errors import IntegrityError, ShapeError
from .geometry import DEFAULT_PATCH_SIZE, PatchGrid, TooSmallError, patch_grid
from .packing import Attention, PackedBatch, pack, segment_attention
from .structures import FeatureMap, VisualInput

LN_EPS = 1e-6


@dataclass
class EncoderConfig:
    patch_size: int = DEFAULT_PATCH_SIZE
    channels: int = 32
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    in_chans: int = 3
    table_grid: int = posembed.TABLE_GRID
    seed: int = 0

    def __post_init__(self):
        if self.channels % self.heads:
            raise ShapeError(f"channels {self.channels} not divisible by heads {self.heads}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = cls.__dataclass_fields__.keys()
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown encoder config keys: {sorted(unknown)}")
        return cls(**d)


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def patchify(pixels: torch.Tensor, p: int) -> torch.Tensor:
    """``[H, W, c]`` -> ``[rows*cols, p*p*c]`` in row-major patch order.

    Trailing pixels that do not fill a whole patch are dropped (floor grid).
    """
    h, w, c = pixels.shape
    if h < p or w < p:
        raise TooSmallError(f"{w}x{h} input is smaller than one {p}x{p} patch")
    rows, cols = h // p, w // p
    x = pixels[:rows * p, :cols * p]
    x = x.reshape(rows, p, cols, p, c).permute(0, 2, 1, 3, 4)
    return x.reshape(rows * cols, p * p * c)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=LN_EPS)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, batch: PackedBatch, strategy: str = "loop") -> PackedBatch:
        x = batch.tokens
        normed = batch.with_tokens(self.norm1(x))
        x = x + segment_attention(normed, self.attn, strategy).tokens
        x = x + self.mlp(self.norm2(x))
        return batch.with_tokens(x)


class OryxViT(nn.Module):
    def __init__(self, cfg: EncoderConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or EncoderConfig()
        torch.manual_seed(cfg.seed)
        self.patch_embed = nn.Linear(cfg.patch_size ** 2 * cfg.in_chans, cfg.channels)
        table = posembed.build_table(cfg.table_grid, cfg.table_grid, cfg.channels, seed=cfg.seed)
        self.pos_table = nn.Parameter(table.values)
        self.blocks = nn.ModuleList(Block(cfg.channels, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        init_weights(self)

    @property
    def table(self) -> posembed.PositionTable:
        return posembed.PositionTable(self.pos_table)

    def grid_for(self, visual: VisualInput) -> PatchGrid:
        return patch_grid(visual.resolution, self.cfg.patch_size)

    def embed_patches(self, visual: VisualInput) -> torch.Tensor:
        if visual.channels != self.cfg.in_chans:
            raise ShapeError(f"input has {visual.channels} channels, encoder expects {self.cfg.in_chans}")
        pixels = visual.pixels.to(self.patch_embed.weight.dtype)
        return self.patch_embed(patchify(pixels, self.cfg.patch_size))

    def embed(self, visual: VisualInput) -> tuple[torch.Tensor, PatchGrid]:
        """Patch tokens with the position table resampled to this input's grid."""
        grid = self.grid_for(visual)
        pos = posembed.interpolate_values(self.pos_table, grid.rows, grid.cols)
        return posembed.apply(self.embed_patches(visual), pos), grid

    def run_blocks(self, batch: PackedBatch, strategy: str = "loop") -> PackedBatch:
        for blk in self.blocks:
            batch = blk(batch, strategy)
        return batch

    def forward(self, inputs: Sequence[VisualInput]) -> list[FeatureMap]:
        embedded = [self.embed(v) for v in inputs]
        batch = pack([t for t, _ in embedded])
        return encode_packed(batch, [g for _, g in embedded], self)


def patch_embed(visual: VisualInput, encoder: OryxViT) -> torch.Tensor:
    return encoder.embed_patches(visual)


def encode_packed(batch: PackedBatch, grids: Sequence[PatchGrid], encoder: OryxViT,
                  strategy: str = "loop") -> list[FeatureMap]:
    """Run the transformer blocks over an already position-embedded packed batch."""
    if len(grids) != batch.num_segments:
        raise IntegrityError(f"{len(grids)} grids given for {batch.num_segments} packed segments")
    for i, (n, g) in enumerate(zip(batch.lengths, grids)):
        if n != g.token_count:
            raise IntegrityError(f"segment {i} has {n} tokens but its grid holds {g.token_count}", offset=i)
    out = encoder.run_blocks(batch, strategy)
    return [FeatureMap.from_tokens(out.segment(i), g) for i, g in enumerate(grids)]
