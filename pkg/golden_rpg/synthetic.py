"""
Golden RPG - region-aware golden noise prediction at desk scale.
Licensed under GNU GPL-3.0-or-later.

The synthetic world: a deterministic mock text encoder, regional prompt plans,
the seven confidence features, and the candidate-ranking oracle producing
(z+, z-, delta) training targets.

Every label maps to a fixed unit direction drawn from a generator seeded with
(world seed, sha1 of the label). A concept/attribute pair embeds as the
normalized combination concept + w_a * attribute + w_b * binding(concept|attribute).
"""

import dataclasses
import hashlib
import logging
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .commons import GoldenRPG
from .config import CorpusConfig, DimsConfig
from .errors import CorpusError
from .geometry import RegionLayout, RegionMasks, build_masks, masks_from_ratios, normalize_ratios
from .progress_dialog import ProgressDialog

logger = logging.getLogger(__name__)

Region = Tuple[str, Optional[str]]

FEATURE_NAMES = ("f1", "f2", "f3", "f4", "f5", "f6", "f7")


def label_hash(label: str) -> int:
    return int.from_bytes(hashlib.sha1(label.encode("utf-8")).digest()[:8], "little")


def unit(vector: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vector))
    if norm == 0.0:
        raise CorpusError("Cannot normalize a zero-norm embedding.")
    return vector / norm


def describe(regions: Sequence[Region]) -> str:
    return "|".join(f"{concept}/{attribute or ''}" for concept, attribute in regions)


class World:
    """
    Label geometry and the fixed text-to-latent projection shared by corpus,
    oracle, scene renderer and mock embedding provider.
    """

    def __init__(self, dims: DimsConfig, settings: CorpusConfig, vocabulary: Optional[dict] = None) -> None:
        self.dims = dims
        self.settings = settings
        self.vocabulary = vocabulary if vocabulary is not None else GoldenRPG.getVocabulary()
        self._directions: Dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        # entries N(0, 1/C)
        self.projection = self.generator("projection").standard_normal((dims.channels, dims.embed_dim))
        self.projection /= np.sqrt(dims.channels)

    def generator(self, *labels: str) -> np.random.Generator:
        return np.random.default_rng([self.settings.world_seed] + [label_hash(label) for label in labels])

    def direction(self, label: str) -> np.ndarray:
        with self._lock:
            cached = self._directions.get(label)
        if cached is None:
            cached = unit(self.generator("direction", label).standard_normal(self.dims.embed_dim))
            with self._lock:
                self._directions[label] = cached
        return cached

    def pair_direction(self, concept: str, attribute: Optional[str] = None) -> np.ndarray:
        vector = self.direction(f"concept:{concept}")
        if attribute:
            vector = (vector
                      + self.settings.attribute_weight * self.direction(f"attribute:{attribute}")
                      + self.settings.binding_weight * self.direction(f"binding:{concept}|{attribute}"))
        return unit(vector)

    def text_vector(self, regions: Sequence[Region]) -> np.ndarray:
        """Unit embedding of a whole prompt, the normalized sum of its pair directions."""
        if not regions:
            raise CorpusError("A text needs at least one concept.")
        return unit(np.sum([self.pair_direction(c, a) for c, a in regions], axis=0))

    def embed_text(self, regions: Sequence[Region], seed: int) -> np.ndarray:
        """
        L x D tokens: token t carries the pair direction of label t mod n plus a seeded
        positional perturbation of norm about positional_eps.
        """
        if not regions:
            raise CorpusError("Cannot embed an empty label set.")
        tokens, dim = self.dims.tokens, self.dims.embed_dim
        pairs = [self.pair_direction(c, a) for c, a in regions]
        base = np.stack([pairs[t % len(pairs)] for t in range(tokens)])
        rng = np.random.default_rng([self.settings.world_seed, label_hash(describe(regions)), int(seed)])
        return base + self.settings.positional_eps * rng.standard_normal((tokens, dim)) / np.sqrt(dim)

    def project(self, vectors: np.ndarray) -> np.ndarray:
        """Text vectors (..., D) into the latent channel space (..., C)."""
        return np.asarray(vectors) @ self.projection.T

    def attributes_for(self, category: str) -> List[str]:
        return list(self.vocabulary["attributes"].get(category, []))

    def oracle_score(self, z: np.ndarray, hard: np.ndarray, region_means: np.ndarray) -> float:
        return oracle_score(z, hard, region_means, self.projection, self.settings.oracle_contrast_floor)


def token_average(tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise CorpusError(f"Expected an L x D token matrix, got shape {tokens.shape}.")
    return tokens.mean(axis=0)


@dataclass(frozen=True)
class ConfidenceFeatures:
    f1: float
    f2: float
    f3: float
    f4: float
    f5: float
    f6: float
    f7: float

    def as_array(self) -> np.ndarray:
        return np.array([self.f1, self.f2, self.f3, self.f4, self.f5, self.f6, self.f7])


def confidence_features(global_mean: np.ndarray, region_means: Sequence[np.ndarray]) -> ConfidenceFeatures:
    region_means = [np.asarray(e, dtype=np.float64) for e in region_means]
    count = len(region_means)
    if count < 1:
        raise CorpusError("Confidence features need at least one region.")
    global_mean = np.asarray(global_mean, dtype=np.float64)
    units = [unit(e) for e in region_means]
    norms = np.array([np.linalg.norm(e) for e in region_means])
    f3 = f7 = 0.0
    if count > 1:
        pairs = [(k, j) for k in range(count) for j in range(count) if k != j]
        f3 = float(np.mean([units[k] @ units[j] for k, j in pairs]))
        f7 = float(max(np.linalg.norm(region_means[k] - region_means[j]) for k, j in pairs))
    return ConfidenceFeatures(
        f1=float(np.linalg.norm(global_mean)),
        f2=float(np.mean([np.linalg.norm(e - global_mean) for e in region_means])),
        f3=float(np.clip(f3, -1.0, 1.0)),
        f4=float(np.std(norms)),
        f5=float(count),
        f6=float(np.clip(unit(np.mean(units, axis=0)) @ unit(global_mean), -1.0, 1.0)),
        f7=f7,
    )


def masked_means(z: np.ndarray, hard: np.ndarray) -> np.ndarray:
    """Per-region, per-channel spatial means, shape (K, C)."""
    areas = hard.sum(axis=(1, 2))
    if np.any(areas == 0):
        raise CorpusError("Masked mean over an empty region.")
    return np.tensordot(hard, z, axes=([1, 2], [1, 2])) / areas[:, None]


def oracle_score(z: np.ndarray, hard: np.ndarray, region_means: np.ndarray, projection: np.ndarray,
                 contrast_floor: float = 0.05) -> float:
    """
    Image-free regional alignment of a noise tensor. With several regions, each
    region's latent mean contrast (against the mean over regions) is compared with
    its projected text contrast; a single region compares the raw vectors.
    """
    mu = masked_means(np.asarray(z), np.asarray(hard))
    q = np.asarray(region_means) @ projection.T
    count = mu.shape[0]
    if count == 1:
        denominator = np.linalg.norm(mu[0]) * np.linalg.norm(q[0])
        if denominator == 0:
            logger.warning("Oracle region 1 has zero norm, scoring 0.")
            return 0.0
        return float(mu[0] @ q[0] / denominator)
    mu_c = mu - mu.mean(axis=0)
    q_c = q - q.mean(axis=0)
    total = 0.0
    for k in range(count):
        latent_norm = np.linalg.norm(mu_c[k])
        if latent_norm == 0:
            logger.warning("Oracle region %d has zero latent contrast, scoring 0.", k + 1)
            continue
        total += float(mu_c[k] @ q_c[k]) / (latent_norm * max(float(np.linalg.norm(q_c[k])), contrast_floor))
    return total / count


@dataclass(frozen=True)
class PromptRecord:
    prompt_id: str
    category: str
    regions: Tuple[Region, ...]
    layout: RegionLayout
    global_tokens: np.ndarray
    region_tokens: np.ndarray
    seed: int
    regional: bool = True

    @property
    def count(self) -> int:
        return len(self.regions)

    @property
    def global_mean(self) -> np.ndarray:
        return token_average(self.global_tokens)

    @property
    def region_means(self) -> np.ndarray:
        return np.stack([token_average(t) for t in self.region_tokens])

    def hard_masks(self) -> np.ndarray:
        return masks_from_ratios(self.layout)

    def masks(self, sigma_b: float) -> RegionMasks:
        return build_masks(self.layout, sigma_b)

    def features(self) -> ConfidenceFeatures:
        return confidence_features(self.global_mean, list(self.region_means))


@dataclass(frozen=True)
class TrainingRecord:
    prompt: PromptRecord
    z_t: np.ndarray
    z_pos: np.ndarray
    z_neg: np.ndarray
    delta: float
    scores: np.ndarray
    candidates: Optional[np.ndarray] = None


@dataclass(frozen=True)
class CorpusStats:
    delta_mean: float
    count: int
    categories: Dict[str, int] = field(default_factory=dict)
    regional: int = 0
    region_counts: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"delta_mean": self.delta_mean, "count": self.count, "categories": dict(self.categories),
                "regional": self.regional, "region_counts": dict(self.region_counts)}

    @classmethod
    def from_dict(cls, values: dict) -> "CorpusStats":
        return cls(float(values["delta_mean"]), int(values["count"]), dict(values.get("categories", {})),
                   int(values.get("regional", 0)), dict(values.get("region_counts", {})))


@dataclass(frozen=True)
class Corpus:
    records: List[TrainingRecord]
    stats: CorpusStats
    settings: CorpusConfig
    dims: DimsConfig


def build_training_record(prompt: PromptRecord, world: World, rng: np.random.Generator, candidates_count: int = 5,
                          candidates: Optional[np.ndarray] = None, keep_candidates: bool = False) -> TrainingRecord:
    """
    Scores K_c standard-normal candidates with the oracle; the best is z+, the worst
    z- (first index on ties) and delta their score gap. z_T is an independent draw.
    """
    dims = world.dims
    shape = (dims.channels, prompt.layout.height, prompt.layout.width)
    if candidates is None:
        if candidates_count < 2:
            raise CorpusError(f"Candidate ranking needs at least 2 candidates, got {candidates_count}.")
        candidates = rng.standard_normal((candidates_count,) + shape)
    candidates = np.asarray(candidates, dtype=np.float64)
    hard = prompt.hard_masks()
    region_means = prompt.region_means
    scores = np.array([world.oracle_score(c, hard, region_means) for c in candidates])
    best, worst = int(np.argmax(scores)), int(np.argmin(scores))
    z_t = rng.standard_normal(shape)
    return TrainingRecord(prompt, z_t, candidates[best].copy(), candidates[worst].copy(),
                          float(scores[best] - scores[worst]), scores, candidates if keep_candidates else None)


def make_prompt(world: World, prompt_id: str, category: str, regions: Sequence[Region], ratios: Sequence[float],
                seed: int, regional: bool = True, jitter_rng: Optional[np.random.Generator] = None) -> PromptRecord:
    """
    Builds a prompt from an explicit regional plan. With a jitter generator every
    region's tokens get an extra perturbation of near_duplicate_jitter.
    """
    dims = world.dims
    regions = tuple((str(c), a if a else None) for c, a in regions)
    layout = RegionLayout(tuple(ratios), dims.latent, dims.latent)
    if layout.count != len(regions):
        raise CorpusError(f"{len(regions)} regions but {layout.count} ratios in prompt {prompt_id}.")
    global_tokens = world.embed_text(regions, seed)
    region_tokens = np.stack([world.embed_text([region], seed) for region in regions])
    if jitter_rng is not None:
        region_tokens = region_tokens + world.settings.near_duplicate_jitter * jitter_rng.standard_normal(
            region_tokens.shape)
    return PromptRecord(prompt_id, category, regions, layout, global_tokens, region_tokens, int(seed), regional)


def draw_prompt(world: World, prompt_id: str, rng: np.random.Generator, mix: float) -> PromptRecord:
    settings = world.settings
    regional = bool(rng.random() < mix)
    keys = sorted(settings.k_distribution, key=int)
    probabilities = np.array([settings.k_distribution[k] for k in keys])
    count = int(keys[rng.choice(len(keys), p=probabilities / probabilities.sum())])
    category = str(settings.categories[rng.integers(len(settings.categories))])
    concepts = world.vocabulary["concepts"]
    chosen = [concepts[i] for i in rng.choice(len(concepts), size=count, replace=False)]
    pool = world.attributes_for(category)
    if pool:
        attributes = [pool[i] for i in rng.choice(len(pool), size=count, replace=count > len(pool))]
    else:
        attributes = [None] * count
    ratios = normalize_ratios(rng.dirichlet(np.full(count, settings.ratio_concentration)), settings.min_ratio)
    seed = int(rng.integers(2 ** 31))
    if regional:
        return make_prompt(world, prompt_id, category, list(zip(chosen, attributes)), ratios, seed, True)
    regions = [(chosen[0], attributes[0])] * count
    return make_prompt(world, prompt_id, category, regions, ratios, seed, False, jitter_rng=rng)


def compute_stats(records: Sequence[TrainingRecord]) -> CorpusStats:
    if not records:
        raise CorpusError("An empty corpus has no statistics.")
    categories = Counter(r.prompt.category for r in records)
    region_counts = Counter(str(r.prompt.count) for r in records)
    return CorpusStats(
        delta_mean=float(np.mean([r.delta for r in records])),
        count=len(records),
        categories=dict(sorted(categories.items())),
        regional=int(sum(r.prompt.regional for r in records)),
        region_counts=dict(sorted(region_counts.items(), key=lambda kv: int(kv[0]))),
    )


def record_generator(seed: int, index: int) -> np.random.Generator:
    """Child generator of record `index`, identical for serial and parallel builds."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def gen_prompts(world: World, count: int, seed: int, mix: float, prefix: str = "e") -> List[PromptRecord]:
    return [draw_prompt(world, f"{prefix}{i:05d}", record_generator(seed, i), mix) for i in range(count)]


def gen_corpus(world: World, size: Optional[int] = None, seed: Optional[int] = None, mix: Optional[float] = None,
               workers: int = 0) -> Corpus:
    settings = world.settings
    size = settings.size if size is None else size
    seed = settings.seed if seed is None else seed
    mix = settings.mix if mix is None else mix
    if size < 1:
        raise CorpusError(f"Corpus size must be at least 1, got {size}.")

    def build(index: int) -> TrainingRecord:
        rng = record_generator(seed, index)
        prompt = draw_prompt(world, f"c{index:05d}", rng, mix)
        return build_training_record(prompt, world, rng, settings.candidates, keep_candidates=settings.keep_candidates)

    workers = GoldenRPG.getWorkerCount(workers)
    logger.info("Generating %d records with seed %d, mix %.2f on %d workers", size, seed, mix, workers)
    records: List[TrainingRecord] = []
    with ProgressDialog("Generating corpus", 0, size) as progress, ThreadPoolExecutor(max_workers=workers) as pool:
        for record in pool.map(build, range(size)):
            records.append(record)
            progress.increment()
    used = dataclasses.replace(settings, size=size, seed=seed, mix=mix)
    stats = compute_stats(records)
    logger.info("Corpus mean gap %.6g over %d records (%d regional)", stats.delta_mean, stats.count, stats.regional)
    return Corpus(records, stats, used, world.dims)
