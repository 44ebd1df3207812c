"""
Golden RPG - region-aware golden noise prediction at desk scale.
Licensed under GNU GPL-3.0-or-later.

Evaluation protocol: a seeded benchmark of prompts, several seeds per prompt,
one noise tensor per (prompt, method, seed) rendered into a synthetic scene
and scored.

Methods:
    random    the seed noise z_T itself
    golden    the frozen surrogate's global golden noise z_g
    weighted  the surrogate fed the mean of the sub-prompt embeddings as its global text
    film_only, v3, v4   trained adapter checkpoints
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .adapter import GoldenRPGModel
from .commons import GoldenRPG
from .config import VARIANTS, RunConfig
from .metrics import EmbeddingProvider, ImageKey, MetricReport, MockProvider, eval_suite
from .progress_dialog import ProgressDialog
from .scenes import SyntheticImage, render_scene
from .surrogate import SurrogateNPNet
from .synthetic import PromptRecord, World, gen_prompts
from .tensor import no_grad

logger = logging.getLogger(__name__)

BASELINES = ("random", "golden", "weighted")
METHODS = BASELINES + VARIANTS


class NoiseMethods:
    """Maps a method id and a seed noise to the initial noise that method would sample from."""

    def __init__(self, surrogate: SurrogateNPNet, models: Optional[Mapping[str, GoldenRPGModel]] = None) -> None:
        self.surrogate = surrogate
        self.models = dict(models or {})

    def available(self, method: str) -> bool:
        return method in BASELINES or method in self.models

    def noise(self, method: str, prompt: PromptRecord, z_t: np.ndarray) -> np.ndarray:
        with no_grad():
            if method == "random":
                return np.asarray(z_t, dtype=np.float64)
            if method == "golden":
                return self.surrogate.npnet_global(z_t, prompt.global_tokens).z_g.numpy()
            if method == "weighted":
                return self.surrogate.npnet_global(z_t, prompt.global_tokens,
                                                   global_mean=prompt.region_means.mean(axis=0)).z_g.numpy()
            if method in self.models:
                model = self.models[method]
                model.eval()
                return model.forward_prompt(prompt, z_t).z_out.numpy()
        raise KeyError(f"Unknown or unavailable method {method}.")


def seed_noise(config: RunConfig, prompt_index: int, seed: int) -> np.ndarray:
    dims = config.dims
    rng = np.random.default_rng([config.eval.seed, 1, prompt_index, seed])
    return rng.standard_normal((dims.channels, dims.latent, dims.latent))


def benchmark_prompts(world: World, config: RunConfig) -> List[PromptRecord]:
    return gen_prompts(world, config.eval.prompts, config.eval.seed, config.eval.mix, prefix="e")


def render_methods(prompts: Sequence[PromptRecord], methods: Sequence[str], noise_methods: NoiseMethods,
                   world: World, config: RunConfig, workers: int = 0) -> Dict[ImageKey, Optional[SyntheticImage]]:
    """One scene per (prompt, method, seed); None where the method has no model loaded."""
    seeds = range(config.eval.seeds)
    jobs = [(index, prompt, method, seed) for index, prompt in enumerate(prompts) for method in methods
            for seed in seeds]

    def render(job: Tuple[int, PromptRecord, str, int]) -> Tuple[ImageKey, Optional[SyntheticImage]]:
        index, prompt, method, seed = job
        key = (prompt.prompt_id, method, seed)
        if not noise_methods.available(method):
            return key, None
        z = noise_methods.noise(method, prompt, seed_noise(config, index, seed))
        return key, render_scene(z, prompt, world, config.eval, method, seed)

    for method in methods:
        if not noise_methods.available(method):
            logger.warning("Method %s has no checkpoint loaded, its rows will be missing.", method)
    scenes: Dict[ImageKey, Optional[SyntheticImage]] = {}
    workers = GoldenRPG.getWorkerCount(workers)
    with ProgressDialog("Rendering scenes", 0, len(jobs)) as progress, ThreadPoolExecutor(max_workers=workers) as pool:
        for key, scene in pool.map(render, jobs):
            scenes[key] = scene
            progress.increment()
    return scenes


def run_evaluation(world: World, config: RunConfig, noise_methods: NoiseMethods, methods: Sequence[str] = (),
                   provider: Optional[EmbeddingProvider] = None, prompts: Optional[Sequence[PromptRecord]] = None,
                   workers: int = 0) -> Tuple[MetricReport, Dict[ImageKey, Optional[SyntheticImage]]]:
    methods = list(methods or config.eval.methods)
    prompts = list(prompts) if prompts is not None else benchmark_prompts(world, config)
    provider = provider or MockProvider(world, config.eval.provider_noise, config.eval.seed)
    logger.info("Evaluating %s on %d prompts x %d seeds", ", ".join(methods), len(prompts), config.eval.seeds)
    scenes = render_methods(prompts, methods, noise_methods, world, config, workers)
    report = eval_suite(prompts, scenes, provider, config.eval, methods, range(config.eval.seeds), workers)
    return report, scenes


def mean_oracle_score(noise_methods: NoiseMethods, method: str, prompts: Sequence[PromptRecord], world: World,
                      config: RunConfig) -> float:
    """Image-free regional alignment of a method, averaged over prompts and seeds."""
    scores = []
    for index, prompt in enumerate(prompts):
        hard = prompt.hard_masks()
        for seed in range(config.eval.seeds):
            z = noise_methods.noise(method, prompt, seed_noise(config, index, seed))
            scores.append(world.oracle_score(z, hard, prompt.region_means))
    return float(np.mean(scores))
