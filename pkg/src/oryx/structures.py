"""Data containers shared across the encoder, compressor and harness."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import torch

from .errors import ShapeError
from .geometry import PatchGrid, Resolution


class Modality(str, Enum):
    IMAGE = "image"
    SHORT_VIDEO_FRAME = "short_video_frame"
    LONG_VIDEO_FRAME = "long_video_frame"


@dataclass
class VisualInput:
    pixels: torch.Tensor  # [H, W, channels], values nominally in [0, 1]
    modality: Modality = Modality.IMAGE

    def __post_init__(self):
        if self.pixels.dim() == 2:
            self.pixels = self.pixels.unsqueeze(-1)
        if self.pixels.dim() != 3:
            raise ShapeError(f"pixels must be [H, W, C], got {tuple(self.pixels.shape)}")

    @property
    def resolution(self) -> Resolution:
        return Resolution(self.pixels.shape[0], self.pixels.shape[1])

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass
class FeatureMap:
    values: torch.Tensor  # [rows, cols, C]

    def __post_init__(self):
        if self.values.dim() != 3:
            raise ShapeError(f"feature map must be [rows, cols, C], got {tuple(self.values.shape)}")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def token_count(self) -> int:
        return self.rows * self.cols

    def flatten(self) -> torch.Tensor:
        return self.values.reshape(-1, self.channels)

    @classmethod
    def from_tokens(cls, tokens: torch.Tensor, grid: PatchGrid) -> "FeatureMap":
        if tokens.shape[0] != grid.token_count:
            raise ShapeError(f"{tokens.shape[0]} tokens do not fill a {grid.rows}x{grid.cols} grid")
        return cls(tokens.reshape(grid.rows, grid.cols, tokens.shape[-1]))
