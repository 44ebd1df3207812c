"""
Golden RPG - region-aware golden noise prediction at desk scale.
Licensed under GNU GPL-3.0-or-later.

Synthetic scenes stand in for decoded images: every canvas cell carries the
concept/attribute pair of one sub-prompt and a noise level. The renderer reads
them off a noise tensor so the regional metrics respond to the predicted noise.
"""

from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .config import EvalConfig
from .errors import ShapeError
from .synthetic import PromptRecord, Region, World


@dataclass(frozen=True)
class SyntheticImage:
    """
    labels[cells[x, y]] is the (concept, attribute) pair shown at cell (x, y) and
    noise[x, y] in [0, 1] its corruption level.
    """

    labels: Tuple[Region, ...]
    cells: np.ndarray
    noise: np.ndarray
    prompt_id: str = ""
    method: str = ""
    seed: int = 0

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.int64)
        noise = np.asarray(self.noise, dtype=np.float64)
        if cells.ndim != 2 or cells.shape != noise.shape:
            raise ShapeError("SyntheticImage", cells.shape, noise.shape)
        if cells.size and (cells.min() < 0 or cells.max() >= len(self.labels)):
            raise ShapeError("SyntheticImage", cells.shape, detail=f"cell labels outside [0, {len(self.labels)})")
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "noise", noise)
        object.__setattr__(self, "labels", tuple((c, a if a else None) for c, a in self.labels))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.cells.shape

    def label_at(self, x: int, y: int) -> Region:
        return self.labels[self.cells[x, y]]

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {"cells": self.cells, "noise": self.noise}

    def metadata(self) -> dict:
        return {"labels": [list(label) for label in self.labels], "prompt_id": self.prompt_id,
                "method": self.method, "seed": self.seed}

    @classmethod
    def from_arrays(cls, metadata: dict, arrays: Dict[str, np.ndarray]) -> "SyntheticImage":
        return cls(tuple(tuple(label) for label in metadata["labels"]), arrays["cells"], arrays["noise"],
                   metadata.get("prompt_id", ""), metadata.get("method", ""), int(metadata.get("seed", 0)))


def box_pool(z: np.ndarray, radius: int) -> np.ndarray:
    """Mean over the (2r+1) x (2r+1) neighbourhood of every pixel, edges replicated."""
    if radius <= 0:
        return np.asarray(z, dtype=np.float64)
    size = 2 * radius + 1
    padded = np.pad(np.asarray(z, dtype=np.float64), ((0, 0), (radius, radius), (radius, radius)), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (size, size), axis=(1, 2))
    return windows.mean(axis=(-2, -1))


def _unitRows(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    return np.divide(vectors, norms, out=np.zeros_like(vectors), where=norms > 0)


def render_scene(z: np.ndarray, prompt: PromptRecord, world: World, settings: Optional[EvalConfig] = None,
                 method: str = "", seed: int = 0) -> SyntheticImage:
    """
    Each cell shows the sub-prompt whose projected (centred) text direction has the
    highest cosine with the box-pooled, image-centred latent there; its noise level
    is (1 - best cosine) / 2.
    """
    settings = settings or EvalConfig()
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3 or z.shape[0] != world.dims.channels:
        raise ShapeError("render_scene", z.shape, detail=f"expected ({world.dims.channels}, H, W)")
    pooled = box_pool(z, settings.pool)
    pooled = pooled - pooled.mean(axis=(1, 2), keepdims=True)
    directions = world.project(prompt.region_means)
    if len(directions) > 1:
        directions = directions - directions.mean(axis=0)
    cells = _unitRows(np.moveaxis(pooled, 0, -1))
    cosines = np.clip(cells @ _unitRows(directions).T, -1.0, 1.0)
    best = np.argmax(cosines, axis=-1)
    level = (1.0 - np.take_along_axis(cosines, best[..., None], axis=-1)[..., 0]) / 2.0
    return SyntheticImage(prompt.regions, best, level, prompt.prompt_id, method, seed)


def scene_from_layout(regions: Sequence[Region], cells: np.ndarray, noise: Optional[np.ndarray] = None,
                      prompt_id: str = "", method: str = "", seed: int = 0) -> SyntheticImage:
    cells = np.asarray(cells)
    return SyntheticImage(tuple(regions), cells, np.zeros(cells.shape) if noise is None else noise, prompt_id,
                          method, seed)
