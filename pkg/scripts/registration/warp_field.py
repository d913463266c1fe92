"""
Frames, flow fields and the resampling algebra between scales.

- ``downsample``: area-average pooling of a frame to scale s.
- ``warp``: spatial transformer T(I, F), out(p) = I(p + F(p)).
- ``promote_field``: lift a scale-s field to full resolution (lattice and
  magnitudes scaled by 1/s).
- ``compose``: F_prev(p) + F_update(p + F_prev(p)).
- ``track_points``: follow points through a chain of per-pair fields.

Everything here is pure numpy; differentiable sampling lives in
``tensor_core.grid_sample_bilinear`` and is reused through
``bilinear_sample_array``.
"""

from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Sequence, Tuple, Union

import numpy as np
import structlog

from registration.errors import ContractError, InvalidShapeError
from registration.tensor_core import bilinear_sample_array, grid_sample_bilinear, no_graph, pixel_grid

logger = structlog.get_logger(__name__)

ScaleLike = Union[Fraction, float, int, str]


def as_scale(value: ScaleLike) -> Fraction:
    """
    Normalize a scale to a Fraction 1/2**k.

    Raises:
        ContractError: if the scale is not the reciprocal of a power of two.
    """
    scale = Fraction(value).limit_denominator(1 << 16)
    if scale <= 0 or scale > 1 or scale.numerator != 1 or scale.denominator & (scale.denominator - 1):
        raise ContractError(f"Scale must be 1/2**k with k >= 0, got {value}")
    return scale


def scale_factor(scale: ScaleLike) -> int:
    """Integer downsampling factor 1/s."""
    return as_scale(scale).denominator


@dataclass
class Image:
    """Single-channel frame with intensities in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim != 2:
            raise InvalidShapeError(f"Image must be h×w, got shape {pixels.shape}")
        self.pixels = np.clip(pixels, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape


@dataclass
class FlowField:
    """
    Dense h×w field of (dx, dy) vectors in pixels at its own resolution.

    ``scale`` records which fraction of the full-resolution lattice the
    field lives on.
    """

    vectors: np.ndarray
    scale: Fraction = field(default=Fraction(1))

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 3 or vectors.shape[2] != 2:
            raise InvalidShapeError(f"FlowField vectors must be h×w×2, got shape {vectors.shape}")
        if not np.all(np.isfinite(vectors)):
            raise ContractError("FlowField contains non-finite entries")
        self.vectors = vectors
        self.scale = as_scale(self.scale)

    @classmethod
    def zeros(cls, height: int, width: int, scale: ScaleLike = 1) -> "FlowField":
        return cls(np.zeros((height, width, 2)), scale=as_scale(scale))

    @classmethod
    def from_channels(cls, channels: np.ndarray, scale: ScaleLike = 1) -> "FlowField":
        """Build from a 2×h×w (dx, dy) array."""
        return cls(np.moveaxis(np.asarray(channels), 0, -1), scale=as_scale(scale))

    def channels(self) -> np.ndarray:
        """2×h×w view (dx, dy) for tensor operations."""
        return np.ascontiguousarray(np.moveaxis(self.vectors, -1, 0))

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.vectors.shape[:2]

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.vectors[..., 0], self.vectors[..., 1])


def _check_same_shape(a_shape, b_shape, what: str) -> None:
    if tuple(a_shape) != tuple(b_shape):
        raise InvalidShapeError(f"{what}: dimensions differ, {tuple(a_shape)} vs {tuple(b_shape)}")


def _pool2(pixels: np.ndarray) -> np.ndarray:
    blocks = pixels.reshape(pixels.shape[0] // 2, 2, pixels.shape[1] // 2, 2)
    return ((blocks[:, 0, :, 0] + blocks[:, 0, :, 1]) + (blocks[:, 1, :, 0] + blocks[:, 1, :, 1])) * 0.25


def downsample(img: Image, scale: ScaleLike) -> Image:
    """
    Area-average pooling to scale s (P1).

    Implemented as repeated 2×2 block means so dyadic scales nest exactly.

    Raises:
        InvalidShapeError: if height or width is not divisible by 1/s.
    """
    factor = scale_factor(scale)
    for label, size in (("height", img.height), ("width", img.width)):
        if size % factor:
            raise InvalidShapeError(f"Image {label} {size} is not divisible by downsampling factor {factor}")
    pixels = img.pixels
    while factor > 1:
        pixels = _pool2(pixels)
        factor //= 2
    return Image(pixels)


def downsample_mask(mask: np.ndarray, scale: ScaleLike) -> np.ndarray:
    """Boolean mask at scale s: a coarse pixel is kept when most of its block is."""
    return downsample(Image(np.asarray(mask, dtype=np.float64)), scale).pixels >= 0.5


def warp(img: Image, flow: FlowField) -> Image:
    """
    T(I, F): bilinear resampling of ``img`` at p + F(p), border-clamped.

    Non-differentiable wrapper over ``grid_sample_bilinear``. The result is
    clipped to the input's value range.
    """
    _check_same_shape(img.shape, flow.shape, "warp")
    with no_graph():
        out = grid_sample_bilinear(img.pixels[None, None], flow.channels()[None]).data[0, 0]
    return Image(np.clip(out, img.pixels.min(), img.pixels.max()))


def sample_field(flow: FlowField, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinearly sample a field at absolute coordinates; returns (..., 2)."""
    values = bilinear_sample_array(flow.channels()[None], x[None], y[None])[0]
    return np.moveaxis(values, 0, -1)


def promote_field(coarse: FlowField, target_shape: Tuple[int, int]) -> FlowField:
    """
    Lift a scale-s field to ``target_shape`` (P2(F/s, 1/s)).

    The lattice is interpolated bilinearly with pixel-centre alignment, so a
    full-resolution coordinate x reads the coarse field at (x - (f-1)/2) / f,
    and vector magnitudes are multiplied by f = 1/s.

    Raises:
        InvalidShapeError: if the target is not an integral multiple of the
            coarse lattice, or the ratio disagrees with the field's scale tag.
    """
    height, width = target_shape
    if height % coarse.height or width % coarse.width:
        raise InvalidShapeError(
            f"Target {target_shape} is not an integral multiple of coarse field {coarse.shape}")
    factor = height // coarse.height
    if width // coarse.width != factor:
        raise InvalidShapeError(
            f"Height ratio {factor} and width ratio {width // coarse.width} differ")
    # untagged (scale 1) fields are accepted at any factor
    if coarse.scale not in (Fraction(1), Fraction(1, factor)):
        raise InvalidShapeError(f"Field tagged scale {coarse.scale} cannot be promoted by factor {factor}")
    if factor == 1:
        return FlowField(coarse.vectors.copy(), scale=1)

    ys, xs = pixel_grid(height, width)
    offset = (factor - 1) / 2.0
    values = sample_field(coarse, (xs - offset) / factor, (ys - offset) / factor)
    return FlowField(values * factor, scale=1)


def compose(prev: FlowField, update: FlowField) -> FlowField:
    """
    Cross-scale composition: out(p) = prev(p) + update(p + prev(p)).

    ``update`` is sampled bilinearly with border clamping.
    """
    _check_same_shape(prev.shape, update.shape, "compose")
    ys, xs = pixel_grid(prev.height, prev.width)
    sampled = sample_field(update, xs + prev.vectors[..., 0], ys + prev.vectors[..., 1])
    return FlowField(prev.vectors + sampled, scale=prev.scale)


def pad_to_multiple(img: Image, multiple: int) -> Image:
    """Reflect-pad bottom and right edges up to the next multiple of ``multiple``."""
    pad_h = (-img.height) % multiple
    pad_w = (-img.width) % multiple
    if not pad_h and not pad_w:
        return img
    return Image(np.pad(img.pixels, ((0, pad_h), (0, pad_w)), mode="reflect"))


def pad_mask_to_multiple(mask: np.ndarray, multiple: int) -> np.ndarray:
    """Zero-pad a region mask so padded pixels never count."""
    pad_h = (-mask.shape[0]) % multiple
    pad_w = (-mask.shape[1]) % multiple
    return np.pad(np.asarray(mask, dtype=bool), ((0, pad_h), (0, pad_w)))


def pad_field(flow: FlowField, shape: Tuple[int, int]) -> FlowField:
    """Edge-pad a full-resolution field to a larger padded lattice."""
    pad_h = shape[0] - flow.height
    pad_w = shape[1] - flow.width
    if pad_h < 0 or pad_w < 0:
        raise InvalidShapeError(f"Cannot pad field {flow.shape} down to {shape}")
    return FlowField(np.pad(flow.vectors, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge"), scale=flow.scale)


def crop_field(flow: FlowField, shape: Tuple[int, int]) -> FlowField:
    height, width = shape
    if height > flow.height or width > flow.width:
        raise InvalidShapeError(f"Cannot crop field {flow.shape} to larger {shape}")
    return FlowField(flow.vectors[:height, :width].copy(), scale=flow.scale)


def track_points(fields: Sequence[FlowField], points: np.ndarray) -> np.ndarray:
    """
    Follow points through consecutive per-pair fields.

    Args:
        fields: F_1..F_{n-1}, each mapping frame t to frame t+1.
        points: k×2 array of (x, y) positions in frame 1.

    Returns:
        n×k×2 array of positions, row t holding the points in frame t+1.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise InvalidShapeError(f"points must be k×2 (x, y), got shape {points.shape}")
    trajectory: List[np.ndarray] = [points.copy()]
    current = points.copy()
    for flow in fields:
        step = sample_field(flow, current[:, 0][None], current[:, 1][None])[0]
        current = current + step
        trajectory.append(current.copy())
    return np.stack(trajectory)
