"""
Golden RPG - region-aware golden noise prediction at desk scale.
Licensed under GNU GPL-3.0-or-later.

Region layouts: split ratios to hard column bands, Gaussian soft edges,
index maps, fractional-area downsampling and boundary bands.

Masks are stacked as (K, H, W) arrays. A "horizontal" layout partitions the canvas
into column bands (the regional-prompt convention); "vertical" partitions rows.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import LayoutError, ShapeError

logger = logging.getLogger(__name__)

AXES = ("horizontal", "vertical")


@dataclass(frozen=True)
class RegionLayout:
    ratios: Tuple[float, ...]
    height: int
    width: int
    axis: str = "horizontal"

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if self.axis not in AXES:
            raise LayoutError(f"Unknown split axis {self.axis}, expected one of {AXES}.")
        if not self.ratios:
            raise LayoutError("A layout needs at least one region.")
        if any(r <= 0 or not np.isfinite(r) for r in self.ratios):
            raise LayoutError(f"Split ratios must be positive, got {self.ratios}.")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise LayoutError(f"Split ratios must sum to 1, got {sum(self.ratios):.12f}.")
        if self.height < 1 or self.width < 1:
            raise LayoutError(f"Invalid canvas {self.height}x{self.width}.")
        if self.count > self.extent:
            raise LayoutError(f"{self.count} regions do not fit into {self.extent} columns.")

    @property
    def count(self) -> int:
        return len(self.ratios)

    @property
    def extent(self) -> int:
        """Length of the split axis in pixels."""
        return self.width if self.axis == "horizontal" else self.height

    def resized(self, height: int, width: int) -> "RegionLayout":
        return RegionLayout(self.ratios, height, width, self.axis)


@dataclass(frozen=True)
class BoundaryBandPair:
    boundary: int
    left_span: Tuple[int, int]
    right_span: Tuple[int, int]
    left: np.ndarray
    right: np.ndarray
    clipped: bool = False


@dataclass(frozen=True)
class RegionMasks:
    hard: np.ndarray
    soft: np.ndarray
    index_map: np.ndarray


def _roundHalfAway(values: np.ndarray) -> np.ndarray:
    # the 9-decimal pre-round absorbs cumulative-sum noise such as 2.4999999999999996
    values = np.round(np.asarray(values, dtype=np.float64), 9)
    return (np.sign(values) * np.floor(np.abs(values) + 0.5)).astype(int)


def boundary_edges(layout: RegionLayout) -> np.ndarray:
    """K+1 edges along the split axis, region k covering [edges[k], edges[k+1])."""
    cumulative = np.cumsum(layout.ratios)
    edges = np.concatenate([[0], _roundHalfAway(layout.extent * cumulative)])
    edges[-1] = layout.extent
    for k in range(layout.count):
        if edges[k + 1] <= edges[k]:
            raise LayoutError(f"Region {k + 1} receives zero columns (ratio {layout.ratios[k]:.6g}).")
    return edges


def _toAxis(masks: np.ndarray, axis: str) -> np.ndarray:
    """Views the stack so the split axis is the last one."""
    return masks if axis == "horizontal" else np.swapaxes(masks, -1, -2)


def masks_from_ratios(layout: RegionLayout) -> np.ndarray:
    edges = boundary_edges(layout)
    across = layout.height if layout.axis == "horizontal" else layout.width
    bands = np.zeros((layout.count, across, layout.extent))
    for k in range(layout.count):
        bands[k, :, edges[k]:edges[k + 1]] = 1.0
    return np.ascontiguousarray(_toAxis(bands, layout.axis))


def split_axis(hard: np.ndarray) -> str:
    """Recovers the split axis of a stack of band masks: horizontal bands are constant down every column."""
    hard = np.asarray(hard)
    return "horizontal" if np.array_equal(hard, np.broadcast_to(hard[:, :1, :], hard.shape)) else "vertical"


def gaussian_kernel(sigma_b: float) -> np.ndarray:
    radius = int(np.floor(3.0 * sigma_b))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (offsets / sigma_b) ** 2)
    return kernel / kernel.sum()


def soften_masks(hard: np.ndarray, sigma_b: float, axis: str = "horizontal") -> np.ndarray:
    """
    Blurs every mask with a truncated 1-D Gaussian along the split axis (edge
    replication at the canvas border), then renormalizes to a partition of unity.
    """
    if sigma_b < 0:
        raise LayoutError(f"sigma_b must be non-negative, got {sigma_b}.")
    hard = np.asarray(hard, dtype=np.float64)
    if sigma_b == 0:
        return hard.copy()
    kernel = gaussian_kernel(sigma_b)
    radius = len(kernel) // 2
    bands = _toAxis(hard, axis)
    extent = bands.shape[-1]
    padded = np.pad(bands, ((0, 0), (0, 0), (radius, radius)), mode="edge")
    blurred = np.zeros_like(bands)
    for j, weight in enumerate(kernel):
        blurred += weight * padded[:, :, j:j + extent]
    blurred /= blurred.sum(axis=0, keepdims=True)
    return np.ascontiguousarray(_toAxis(blurred, axis))


def region_index_map(hard: np.ndarray) -> np.ndarray:
    """1-based region index of every pixel."""
    hard = np.asarray(hard)
    if not np.all((hard == 0) | (hard == 1)):
        raise LayoutError("Hard masks must be binary.")
    coverage = hard.sum(axis=0)
    if np.any(coverage == 0):
        raise LayoutError(f"{int(np.sum(coverage == 0))} pixels are not covered by any region.")
    if np.any(coverage > 1):
        raise LayoutError(f"{int(np.sum(coverage > 1))} pixels are covered by overlapping regions.")
    return np.argmax(hard, axis=0).astype(np.int64) + 1


def masks_from_index_map(index_map: np.ndarray, count: int) -> np.ndarray:
    return np.stack([(index_map == k + 1).astype(np.float64) for k in range(count)])


def _poolingMatrix(source: int, target: int) -> np.ndarray:
    """Row i averages the source pixels overlapping [i*source/target, (i+1)*source/target)."""
    scale = source / target
    matrix = np.zeros((target, source))
    for i in range(target):
        start, end = i * scale, (i + 1) * scale
        first, last = int(np.floor(start)), int(np.ceil(end))
        for x in range(first, min(last, source)):
            overlap = min(end, x + 1) - max(start, x)
            if overlap > 0:
                matrix[i, x] = overlap / scale
    return matrix


def downsample_mask(mask: np.ndarray, height: int, width: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2 or height > mask.shape[0] or width > mask.shape[1] or height < 1 or width < 1:
        raise ShapeError("downsample_mask", mask.shape, (height, width))
    return _poolingMatrix(mask.shape[0], height) @ mask @ _poolingMatrix(mask.shape[1], width).T


def downsample_masks(masks: np.ndarray, height: int, width: int, renormalize: bool = True) -> np.ndarray:
    pooled = np.stack([downsample_mask(m, height, width) for m in masks])
    if renormalize:
        pooled /= pooled.sum(axis=0, keepdims=True)
    return pooled


def region_spans(hard: np.ndarray, axis: str = "horizontal") -> List[Tuple[int, int]]:
    bands = _toAxis(np.asarray(hard), axis)
    spans = []
    for k, band in enumerate(bands):
        columns = np.flatnonzero(band.any(axis=0))
        if columns.size == 0:
            raise LayoutError(f"Region {k + 1} is empty.")
        spans.append((int(columns[0]), int(columns[-1]) + 1))
    return spans


def boundary_bands(hard: np.ndarray, band_px: int, axis: str = "horizontal") -> List[BoundaryBandPair]:
    """
    Two bands of band_px columns on each side of every internal boundary. Bands wider
    than the adjacent region are clipped to it and a warning is logged.
    """
    if band_px < 1:
        raise LayoutError(f"band_px must be at least 1, got {band_px}.")
    bands = _toAxis(np.asarray(hard), axis)
    across, extent = bands.shape[1], bands.shape[2]
    spans = region_spans(hard, axis)
    pairs = []
    for k in range(len(spans) - 1):
        (start, boundary), (_, end) = spans[k], spans[k + 1]
        left_span = (max(boundary - band_px, start), boundary)
        right_span = (boundary, min(boundary + band_px, end))
        clipped = left_span[0] != boundary - band_px or right_span[1] != boundary + band_px
        if clipped:
            logger.warning("Band of %d px clipped at boundary %d to left %s and right %s.",
                           band_px, boundary, left_span, right_span)
        left = np.zeros((across, extent), dtype=bool)
        right = np.zeros((across, extent), dtype=bool)
        left[:, left_span[0]:left_span[1]] = True
        right[:, right_span[0]:right_span[1]] = True
        if axis != "horizontal":
            left, right = left.T, right.T
        pairs.append(BoundaryBandPair(boundary, left_span, right_span, np.ascontiguousarray(left),
                                      np.ascontiguousarray(right), clipped))
    return pairs


def sigma_for_width(width: int, sigma_at_128: float = 4.0) -> float:
    """Boundary smoothing in pixels, 4 px at a 128-wide latent scaled to `width`."""
    return sigma_at_128 * width / 128.0


def band_for_width(width: int, band_at_1024: int = 32) -> int:
    return max(1, int(_roundHalfAway(np.array([band_at_1024 * width / 1024.0]))[0]))


def build_masks(layout: RegionLayout, sigma_b: float) -> RegionMasks:
    hard = masks_from_ratios(layout)
    return RegionMasks(hard, soften_masks(hard, sigma_b, layout.axis), region_index_map(hard))


def even_layout(count: int, height: int, width: int, axis: str = "horizontal") -> RegionLayout:
    return RegionLayout(tuple([1.0 / count] * count), height, width, axis)


def normalize_ratios(values: Sequence[float], minimum: float = 0.0) -> Tuple[float, ...]:
    ratios = np.maximum(np.asarray(values, dtype=np.float64), minimum)
    ratios = ratios / ratios.sum()
    # the last ratio absorbs the rounding so the sum is 1 to machine precision
    ratios[-1] = 1.0 - ratios[:-1].sum()
    return tuple(float(r) for r in ratios)
