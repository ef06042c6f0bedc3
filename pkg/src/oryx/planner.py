"""On-demand routing of visual inputs to a compression path and token budget."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Sequence

from .compressor import compressed_tokens
from .errors import InvalidInputError
from .geometry import (DEFAULT_PATCH_SIZE, STAGE2_IMAGE_MAX_SIDE, Resolution, patch_grid,
                       plan_image_resolution, plan_video_resolution)

SHORT_VIDEO_CAP = 64
LONG_VIDEO_CAP = 256
# Videos whose 1 fps frame count exceeds this route to the 16x path. Set at the
# long-video cap so that the 64-frame short-video cap is actually exercised.
DEFAULT_LONG_THRESHOLD = LONG_VIDEO_CAP
# reported, not enforced
MAX_SEQUENCE_LENGTH = {"stage1": 8192, "stage2": 16384}


class Category(str, Enum):
    IMAGE = "Image"
    SHORT_VIDEO = "ShortVideo"
    LONG_VIDEO = "LongVideo"


RATIO = {Category.IMAGE: 1, Category.SHORT_VIDEO: 2, Category.LONG_VIDEO: 4}
FRAME_CAP = {Category.IMAGE: 1, Category.SHORT_VIDEO: SHORT_VIDEO_CAP, Category.LONG_VIDEO: LONG_VIDEO_CAP}


@dataclass
class CompressionPlan:
    category: Category
    ratio: int
    frame_cap: int
    indices: list[int]
    per_frame_tokens: list[int] = field(repr=False)
    total_tokens: int = 0

    def to_json(self) -> dict:
        d = asdict(self)
        d["category"] = self.category.value
        return d


def classify_input(n_native_frames: int, long_threshold: int = DEFAULT_LONG_THRESHOLD) -> Category:
    if n_native_frames < 1:
        raise InvalidInputError(f"need at least one frame, got {n_native_frames}")
    if n_native_frames == 1:
        return Category.IMAGE
    if n_native_frames <= long_threshold:
        return Category.SHORT_VIDEO
    return Category.LONG_VIDEO


def sample_frames(duration_s: float, fps_native: float, cap: int) -> list[int]:
    """Indices into the 1 fps frame sequence, uniformly thinned to at most ``cap``.

    ``fps_native`` only matters for mapping the returned indices back to native
    frames (see :func:`native_frame_indices`).
    """
    if duration_s <= 0:
        raise InvalidInputError(f"duration must be positive, got {duration_s}")
    if cap < 1:
        raise InvalidInputError(f"frame cap must be positive, got {cap}")
    n = max(1, math.floor(duration_s))
    if n <= cap:
        return list(range(n))
    return [k * n // cap for k in range(cap)]


def native_frame_indices(indices: Sequence[int], fps_native: float) -> list[int]:
    return [math.floor(i * fps_native) for i in indices]


def frame_tokens(res: Resolution, ratio: int, patch_size: int = DEFAULT_PATCH_SIZE) -> int:
    g = patch_grid(res, patch_size)
    return compressed_tokens(g.rows, g.cols, ratio)


def make_plan(frames: Sequence[Resolution], category: Category | str,
              indices: Sequence[int] | None = None, patch_size: int = DEFAULT_PATCH_SIZE) -> CompressionPlan:
    """Token budget for already-planned frame resolutions under ``category``."""
    if not frames:
        raise InvalidInputError("cannot plan an empty frame list")
    category = Category(category)
    r = RATIO[category]
    per_frame = [frame_tokens(f, r, patch_size) for f in frames]
    idx = list(range(len(frames))) if indices is None else list(indices)
    if len(idx) != len(frames):
        raise InvalidInputError(f"{len(idx)} indices for {len(frames)} frames")
    return CompressionPlan(category, r, FRAME_CAP[category], idx, per_frame, sum(per_frame))


def plan_input(width: int, height: int, frames: int = 1, fps: float = 1.0,
               long_threshold: int = DEFAULT_LONG_THRESHOLD, needle: bool = False,
               image_max_side: int = STAGE2_IMAGE_MAX_SIDE,
               patch_size: int = DEFAULT_PATCH_SIZE) -> tuple[CompressionPlan, Resolution]:
    """Full routing for a raw input: classify, sample, plan resolution, budget.

    ``frames`` is the native frame count, ``fps`` the native frame rate. Needle
    retrieval workloads always take the long-video path.
    """
    res = Resolution(height, width)
    if frames < 1:
        raise InvalidInputError(f"need at least one frame, got {frames}")
    if fps <= 0:
        raise InvalidInputError(f"fps must be positive, got {fps}")
    if frames == 1 and not needle:
        planned = plan_image_resolution(res, image_max_side, patch_size)
        return make_plan([planned], Category.IMAGE, [0], patch_size), planned

    duration = frames / fps
    n_sampled = max(1, math.floor(duration))
    category = Category.LONG_VIDEO if needle else classify_input(max(n_sampled, 2), long_threshold)
    indices = sample_frames(duration, fps, FRAME_CAP[category])
    planned = plan_video_resolution(res, patch_size=patch_size)
    plan = make_plan([planned] * len(indices), category, indices, patch_size)
    return plan, planned
