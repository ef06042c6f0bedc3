"""Resolution planning and patch-grid arithmetic.

Images keep their native aspect ratio and are only scaled down when their
pixel area exceeds a budget. Video frames are scaled (up or down) so that their
pixel area lands inside ``[min_side**2, max_side**2]``.

All scaling is done in exact integer arithmetic. Sides are rounded toward the
clamp (down when shrinking, up when growing) so the planned area never leaves
the configured bounds and planning is idempotent.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import isqrt

from .errors import InvalidInputError

DEFAULT_PATCH_SIZE = 16
STAGE1_IMAGE_MAX_SIDE = 1280
STAGE2_IMAGE_MAX_SIDE = 1536
VIDEO_MIN_SIDE = 288
VIDEO_MAX_SIDE = 480


class TooSmallError(InvalidInputError):
    pass


@dataclass(frozen=True)
class Resolution:
    height: int
    width: int

    def __post_init__(self):
        if int(self.height) != self.height or int(self.width) != self.width:
            raise InvalidInputError(f"non-integer resolution {self.height}x{self.width}")
        if self.height <= 0 or self.width <= 0:
            raise InvalidInputError(f"resolution must be positive, got {self.height}x{self.width}")

    @property
    def area(self) -> int:
        return self.height * self.width

    def __str__(self) -> str:
        return f"{self.width}x{self.height}"


@dataclass(frozen=True)
class PatchGrid:
    rows: int
    cols: int
    patch_size: int

    @property
    def token_count(self) -> int:
        return self.rows * self.cols

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)


def _scale_floor(side: int, target_area: int, area: int) -> int:
    # floor(side * sqrt(target_area / area))
    return isqrt(side * side * target_area // area)


def _scale_ceil(side: int, target_area: int, area: int) -> int:
    # ceil(side * sqrt(target_area / area))
    num = side * side * target_area
    sq = -(-num // area)
    k = isqrt(sq)
    return k if k * k == sq else k + 1


def _scaled(res: Resolution, target_side: int, up: bool, p: int) -> Resolution:
    target = target_side * target_side
    fn = _scale_ceil if up else _scale_floor
    h = fn(res.height, target, res.area)
    w = fn(res.width, target, res.area)
    return Resolution(max(h, p), max(w, p))


def plan_image_resolution(res: Resolution, max_area_side: int = STAGE2_IMAGE_MAX_SIDE,
                          patch_size: int = DEFAULT_PATCH_SIZE) -> Resolution:
    """Shrink ``res`` to fit within ``max_area_side**2`` pixels, keeping aspect ratio."""
    if max_area_side <= 0:
        raise InvalidInputError(f"max_area_side must be positive, got {max_area_side}")
    if res.area <= max_area_side * max_area_side:
        return res
    return _scaled(res, max_area_side, up=False, p=patch_size)


def plan_video_resolution(res: Resolution, min_side: int = VIDEO_MIN_SIDE,
                          max_side: int = VIDEO_MAX_SIDE,
                          patch_size: int = DEFAULT_PATCH_SIZE) -> Resolution:
    """Scale a frame so its pixel area lies in ``[min_side**2, max_side**2]``."""
    if min_side <= 0 or max_side <= 0:
        raise InvalidInputError("clamp sides must be positive")
    if min_side > max_side:
        raise InvalidInputError(f"min_side {min_side} exceeds max_side {max_side}")
    if res.area < min_side * min_side:
        return _scaled(res, min_side, up=True, p=patch_size)
    if res.area > max_side * max_side:
        return _scaled(res, max_side, up=False, p=patch_size)
    return res


def patch_grid(res: Resolution, p: int = DEFAULT_PATCH_SIZE) -> PatchGrid:
    if p <= 0:
        raise InvalidInputError(f"patch size must be positive, got {p}")
    if res.height < p or res.width < p:
        raise TooSmallError(f"resolution {res} is smaller than one {p}x{p} patch")
    return PatchGrid(res.height // p, res.width // p, p)
