"""
Golden RPG - region-aware golden noise prediction at desk scale.
Licensed under GNU GPL-3.0-or-later.

Regional evaluation metrics over synthetic scenes:

    RSA   mean cosine between each region crop and its sub-prompt
    CRC   mean cosine between the bands on either side of each region boundary
    MOCQ  target-crop similarity minus the mean wrong-crop similarity, per sub-prompt
    AB    1 when the full image is closer to its prompt than to an attribute swap

plus a CLIP-score analog (full image against full prompt). Embeddings come from a
pluggable provider; the mock one is built on the synthetic world.
"""

import abc
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .commons import GoldenRPG
from .config import EvalConfig
from .errors import MetricError
from .geometry import RegionLayout, band_for_width, boundary_bands, masks_from_ratios
from .progress_dialog import ProgressDialog
from .scenes import SyntheticImage
from .synthetic import PromptRecord, Region, World, unit

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["clip", "rsa", "crc", "mocq", "ab"]


class EmbeddingProvider(abc.ABC):
    """Unit-norm, deterministic image-region and text embeddings in a shared space."""

    dimension: int

    @abc.abstractmethod
    def image_embed(self, image: SyntheticImage, mask: Optional[np.ndarray] = None) -> np.ndarray:
        """Embedding of the cells selected by a boolean mask (all cells when None)."""

    @abc.abstractmethod
    def text_embed(self, regions: Sequence[Region]) -> np.ndarray:
        """Embedding of a text made of the given concept/attribute pairs."""


class MockProvider(EmbeddingProvider):
    """
    A crop embeds as the normalized sum of its cells' pair directions, each cell
    perturbed by a fixed per-position noise vector scaled by noise * cell level.
    Texts embed as the world's text vectors.
    """

    def __init__(self, world: World, noise: float = 0.05, seed: int = 0) -> None:
        self.world = world
        self.noise = float(noise)
        self.seed = int(seed)
        self.dimension = world.dims.embed_dim
        self._banks: Dict[Tuple[int, int], np.ndarray] = {}

    def _bank(self, shape: Tuple[int, int]) -> np.ndarray:
        bank = self._banks.get(shape)
        if bank is None:
            rng = np.random.default_rng([self.seed, shape[0], shape[1]])
            bank = rng.standard_normal(shape + (self.dimension,)) / np.sqrt(self.dimension)
            self._banks[shape] = bank
        return bank

    def image_embed(self, image: SyntheticImage, mask: Optional[np.ndarray] = None) -> np.ndarray:
        selected = np.ones(image.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        if selected.shape != image.shape:
            raise MetricError(f"Crop mask {selected.shape} does not match the image {image.shape}.")
        if not selected.any():
            raise MetricError(f"Empty crop in image {image.prompt_id or '<unnamed>'}.")
        directions = np.stack([self.world.pair_direction(c, a) for c, a in image.labels])
        total = directions[image.cells[selected]].sum(axis=0)
        if self.noise:
            perturbation = image.noise[selected][:, None] * self._bank(image.shape)[selected]
            total = total + self.noise * perturbation.sum(axis=0)
        return unit(total)

    def text_embed(self, regions: Sequence[Region]) -> np.ndarray:
        return self.world.text_vector(regions)


class BasisProvider(EmbeddingProvider):
    """
    Every distinct concept/attribute pair gets its own standard basis vector, so
    different pairs are exactly orthogonal. Crops and texts embed as the normalized
    sum of their pairs' basis vectors; cell noise is ignored.
    """

    def __init__(self, pairs: Sequence[Region]) -> None:
        self.index = {}
        for concept, attribute in pairs:
            self.index.setdefault((concept, attribute or None), len(self.index))
        # spare axes for pairs first seen in a text, such as an attribute swap
        self.dimension = 2 * len(self.index) + 2
        self._lock = threading.Lock()

    def _basis(self, region: Region) -> np.ndarray:
        key = (region[0], region[1] or None)
        with self._lock:
            if key not in self.index:
                if len(self.index) >= self.dimension:
                    raise MetricError(f"No basis vector left for {key}.")
                self.index[key] = len(self.index)
        vector = np.zeros(self.dimension)
        vector[self.index[key]] = 1.0
        return vector

    def image_embed(self, image: SyntheticImage, mask: Optional[np.ndarray] = None) -> np.ndarray:
        selected = np.ones(image.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        if selected.shape != image.shape or not selected.any():
            raise MetricError(f"Invalid crop for image {image.prompt_id or '<unnamed>'}.")
        counts = np.bincount(image.cells[selected], minlength=len(image.labels))
        return unit(sum(count * self._basis(label) for count, label in zip(counts, image.labels)))

    def text_embed(self, regions: Sequence[Region]) -> np.ndarray:
        return unit(sum(self._basis(region) for region in regions))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    denominator = float(np.linalg.norm(a) * np.linalg.norm(b))
    if denominator == 0.0:
        raise MetricError("Cosine of a zero-norm embedding.")
    return float(np.clip(np.dot(a, b) / denominator, -1.0, 1.0))


def region_crops(image: SyntheticImage, layout: RegionLayout) -> np.ndarray:
    """Boolean crop per region, the layout scaled to the image canvas."""
    height, width = image.shape
    return masks_from_ratios(layout.resized(height, width)) > 0.5


def rsa(image: SyntheticImage, layout: RegionLayout, regions: Sequence[Region], provider: EmbeddingProvider) -> float:
    crops = region_crops(image, layout)
    if len(regions) != len(crops):
        raise MetricError(f"{len(regions)} sub-prompts for {len(crops)} regions.")
    return float(np.mean([cosine(provider.image_embed(image, crop), provider.text_embed([region]))
                          for crop, region in zip(crops, regions)]))


def crc(image: SyntheticImage, layout: RegionLayout, provider: EmbeddingProvider,
        band_px: Optional[int] = None) -> float:
    """Defined as 1.0 for a single region."""
    if layout.count == 1:
        logger.warning("CRC of single-region image %s is 1 by convention.", image.prompt_id or "<unnamed>")
        return 1.0
    height, width = image.shape
    band_px = band_for_width(width) if band_px is None else band_px
    hard = masks_from_ratios(layout.resized(height, width))
    pairs = boundary_bands(hard, band_px, layout.axis)
    return float(np.mean([cosine(provider.image_embed(image, pair.left), provider.image_embed(image, pair.right))
                          for pair in pairs]))


def mocq(image: SyntheticImage, layout: RegionLayout, regions: Sequence[Region], provider: EmbeddingProvider) -> float:
    count = len(regions)
    if count < 2:
        raise MetricError("MOCQ needs at least two regions.")
    crops = region_crops(image, layout)
    if count != len(crops):
        raise MetricError(f"{count} sub-prompts for {len(crops)} regions.")
    embeddings = [provider.image_embed(image, crop) for crop in crops]
    total = 0.0
    for k, region in enumerate(regions):
        text = provider.text_embed([region])
        similarities = [cosine(embedding, text) for embedding in embeddings]
        wrong = (sum(similarities) - similarities[k]) / (count - 1)
        total += similarities[k] - wrong
    return total / count


@dataclass
class ProbeCounter:
    evaluated: int = 0
    skipped: int = 0
    ties: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def count(self, name: str):
        with self._lock:
            setattr(self, name, getattr(self, name) + 1)


def swapped_attributes(regions: Sequence[Region]) -> Optional[List[Region]]:
    """Swaps the attributes of the first two regions whose attributes differ; None when none do."""
    for k in range(len(regions)):
        for j in range(k + 1, len(regions)):
            first, second = regions[k][1], regions[j][1]
            if first and second and first != second:
                swapped = list(regions)
                swapped[k] = (regions[k][0], second)
                swapped[j] = (regions[j][0], first)
                return swapped
    return None


def attribute_binding(image: SyntheticImage, regions: Sequence[Region], provider: EmbeddingProvider,
                      counter: Optional[ProbeCounter] = None) -> Optional[int]:
    """1 or 0, None when the prompt has no two distinct attributes to swap. A tie scores 0."""
    counter = counter if counter is not None else ProbeCounter()
    swapped = swapped_attributes(regions)
    if swapped is None:
        counter.count("skipped")
        logger.debug("Attribute binding skipped for %s, no distinct attributes.", image.prompt_id or "<unnamed>")
        return None
    counter.count("evaluated")
    embedding = provider.image_embed(image)
    correct = cosine(embedding, provider.text_embed(regions))
    wrong = cosine(embedding, provider.text_embed(swapped))
    if correct == wrong:
        counter.count("ties")
        return 0
    return int(correct > wrong)


def clip_analog(image: SyntheticImage, regions: Sequence[Region], provider: EmbeddingProvider) -> float:
    return cosine(provider.image_embed(image), provider.text_embed(regions))


@dataclass
class MetricRow:
    prompt_id: str
    category: str
    method: str
    seed: int
    clip: float = math.nan
    rsa: float = math.nan
    crc: float = math.nan
    mocq: float = math.nan
    ab: float = math.nan
    missing: bool = False


@dataclass
class MetricReport:
    rows: List[MetricRow] = field(default_factory=list)
    probe: ProbeCounter = field(default_factory=ProbeCounter)

    @property
    def complete(self) -> bool:
        return not any(row.missing for row in self.rows)

    @property
    def methods(self) -> List[str]:
        return sorted({row.method for row in self.rows})

    def to_frame(self) -> pd.DataFrame:
        columns = [f.name for f in MetricRow.__dataclass_fields__.values()]
        return pd.DataFrame([asdict(row) for row in self.rows], columns=columns)

    def aggregates(self, by_category: bool = True) -> pd.DataFrame:
        """Mean, std and count of every metric per method (and category), missing rows excluded."""
        frame = self.to_frame()
        frame = frame[~frame["missing"]]
        keys = ["method", "category"] if by_category else ["method"]
        grouped = frame.groupby(keys, sort=True)[METRIC_COLUMNS]
        table = grouped.agg(["mean", "std", "count"])
        table.columns = [f"{metric}_{stat}" for metric, stat in table.columns]
        return table.reset_index()

    def save_csv(self, path: str):
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def load_csv(cls, path: str) -> "MetricReport":
        frame = pd.read_csv(path, float_precision="round_trip", keep_default_na=True,
                            dtype={"prompt_id": str, "category": str, "method": str})
        rows = []
        for values in frame.to_dict(orient="records"):
            values["seed"] = int(values["seed"])
            values["missing"] = bool(values["missing"])
            rows.append(MetricRow(**values))
        return cls(rows)


def score_image(image: SyntheticImage, prompt: PromptRecord, provider: EmbeddingProvider, band_px: int,
                counter: ProbeCounter) -> Dict[str, float]:
    layout = prompt.layout
    values = {"clip": clip_analog(image, prompt.regions, provider),
              "rsa": rsa(image, layout, prompt.regions, provider),
              "crc": crc(image, layout, provider, band_px),
              "mocq": mocq(image, layout, prompt.regions, provider) if prompt.count > 1 else math.nan}
    binding = attribute_binding(image, prompt.regions, provider, counter)
    values["ab"] = math.nan if binding is None else float(binding)
    return values


ImageKey = Tuple[str, str, int]


def eval_suite(prompts: Sequence[PromptRecord], method_outputs: Dict[ImageKey, Optional[SyntheticImage]],
               provider: EmbeddingProvider, settings: Optional[EvalConfig] = None, methods: Sequence[str] = (),
               seeds: Sequence[int] = (), workers: int = 0) -> MetricReport:
    """
    Scores one image per (prompt id, method, seed). Expected keys come from the given
    methods and seeds, or from method_outputs itself; a missing image gives a row
    flagged missing that the aggregates skip.
    """
    settings = settings or EvalConfig()
    methods = sorted(methods or {key[1] for key in method_outputs})
    seeds = sorted(seeds or {key[2] for key in method_outputs})
    keys = [(prompt, method, seed) for prompt in prompts for method in methods for seed in seeds]
    counter = ProbeCounter()

    def score(item: Tuple[PromptRecord, str, int]) -> MetricRow:
        prompt, method, seed = item
        row = MetricRow(prompt.prompt_id, prompt.category, method, seed)
        image = method_outputs.get((prompt.prompt_id, method, seed))
        if image is None:
            logger.warning("No image for prompt %s, method %s, seed %d.", prompt.prompt_id, method, seed)
            row.missing = True
            return row
        band_px = band_for_width(image.shape[1], settings.band_at_1024)
        for name, value in score_image(image, prompt, provider, band_px, counter).items():
            setattr(row, name, value)
        return row

    workers = GoldenRPG.getWorkerCount(workers)
    rows = []
    with ProgressDialog("Evaluating", 0, len(keys)) as progress, ThreadPoolExecutor(max_workers=workers) as pool:
        for row in pool.map(score, keys):
            rows.append(row)
            progress.increment()
    report = MetricReport(rows, counter)
    if counter.skipped or counter.ties:
        logger.warning("Attribute binding: %d evaluated, %d skipped, %d ties", counter.evaluated, counter.skipped,
                       counter.ties)
    return report
