"""
Golden RPG - region-aware golden noise prediction at desk scale.
Licensed under GNU GPL-3.0-or-later.

File-level stages behind the command line (corpus generation, training,
prediction, evaluation, reporting) and the chained run of all of them. Every
stage is a pure function of its configuration and input files; the chained
run signs each stage command like an engine invocation so repeated runs can
be compared.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .adapter import GoldenRPGModel
from .commons import GoldenRPG
from .config import VARIANTS, RunConfig, config_hash
from .errors import ConfigError, CorpusError
from .evaluation import NoiseMethods, run_evaluation
from .geometry import normalize_ratios
from .json_utils import JSonUtils
from .metrics import MetricReport
from .persistence import (load_checkpoint, load_corpus, model_from_checkpoint, save_arrays, save_checkpoint,
                          save_corpus)
from .report import ReportArtifact, render_report
from .scenes import SyntheticImage
from .surrogate import SurrogateNPNet
from .synthetic import Corpus, PromptRecord, World, gen_corpus, make_prompt
from .tensor import no_grad, set_checked, set_precision
from .training import TrainResult, train

logger = logging.getLogger(__name__)


def apply_runtime(config: RunConfig):
    set_precision(config.runtime.precision)
    set_checked(config.runtime.checked)


def make_world(config: RunConfig) -> World:
    return World(config.dims, config.corpus)


def gen_corpus_file(config: RunConfig, path: str) -> Corpus:
    corpus = gen_corpus(make_world(config), workers=config.runtime.workers)
    save_corpus(corpus, path)
    return corpus


def train_file(config: RunConfig, corpus_path: str, checkpoint_path: str, history_path: Optional[str] = None,
               force: bool = False) -> TrainResult:
    corpus = load_corpus(corpus_path)
    if corpus.dims != config.dims:
        raise CorpusError(f"Corpus {corpus_path} was generated for {corpus.dims}, the configuration uses "
                          f"{config.dims}.")
    warm = None
    if config.train.warm_start:
        warm = load_checkpoint(config.train.warm_start)
        if warm.config_hash != config_hash(config) and not force:
            logger.info("Warm-start checkpoint %s was trained under a different configuration",
                        config.train.warm_start)
    result = train(config, corpus, warm, abort_path=checkpoint_path + ".last-good")
    save_checkpoint(result.checkpoint, checkpoint_path)
    if history_path:
        result.history.save_csv(history_path)
    logger.info("Saved %s checkpoint to %s", config.train.variant, checkpoint_path)
    return result


def parse_manifest(document: dict, world: World) -> List[PromptRecord]:
    """
    {"prompts": [{"id", "regions": [{"concept", "attribute"}], "ratios", "seed", "category"}]};
    ratios default to an even split.
    """
    prompts = []
    entries = document.get("prompts")
    if not isinstance(entries, list) or not entries:
        raise ConfigError("A prompt manifest needs a non-empty 'prompts' list.")
    for position, entry in enumerate(entries):
        try:
            regions = [(region["concept"], region.get("attribute")) for region in entry["regions"]]
            ratios = entry.get("ratios") or [1.0 / len(regions)] * len(regions)
            prompt_id = str(entry.get("id", f"p{position:05d}"))
            prompts.append(make_prompt(world, prompt_id, entry.get("category", "spatial"), regions,
                                       normalize_ratios(ratios), int(entry.get("seed", position))))
        except (KeyError, TypeError) as error:
            raise ConfigError(f"Manifest entry {position} is malformed: {error}.") from error
    return prompts


def prompt_noise(config: RunConfig, seed: int) -> np.ndarray:
    dims = config.dims
    return np.random.default_rng([int(seed), 0]).standard_normal((dims.channels, dims.latent, dims.latent))


def predict_file(config: RunConfig, checkpoint_path: str, manifest_path: str, output_path: str,
                 sigma_init: Optional[float] = None, diagnostics_path: Optional[str] = None,
                 force: bool = False) -> Dict[str, np.ndarray]:
    """
    Writes z_out/<id> and alpha/<id> for every manifest prompt, plus z_scaled/<id> =
    z_out * sigma_init when a scheduler init sigma is given.
    """
    model = model_from_checkpoint(load_checkpoint(checkpoint_path), config, force)
    prompts = parse_manifest(JSonUtils.loadJSON(manifest_path), make_world(config))
    arrays: Dict[str, np.ndarray] = {}
    lines = []
    with no_grad():
        for prompt in prompts:
            output = model.forward_prompt(prompt, prompt_noise(config, prompt.seed))
            arrays[f"z_out/{prompt.prompt_id}"] = output.z_out.numpy()
            arrays[f"alpha/{prompt.prompt_id}"] = np.asarray(output.alpha.item())
            if sigma_init is not None:
                arrays[f"z_scaled/{prompt.prompt_id}"] = output.z_out.numpy() * float(sigma_init)
            lines.append(json.dumps({"id": prompt.prompt_id, **output.diagnostics()}, sort_keys=True))
    save_arrays(arrays, output_path, {"variant": model.variant, "prompts": [p.prompt_id for p in prompts]})
    if diagnostics_path:
        with open(diagnostics_path, "w", encoding="utf-8") as file:
            file.write("\n".join(lines) + "\n")
    logger.info("Predicted %d prompts with %s", len(prompts), model.variant)
    return arrays


def load_models(config: RunConfig, checkpoint_paths: Sequence[str], force: bool = False) -> Dict[str, GoldenRPGModel]:
    models = {}
    for path in checkpoint_paths:
        model = model_from_checkpoint(load_checkpoint(path), config, force)
        if model.variant in models:
            logger.warning("Several %s checkpoints given, using %s", model.variant, path)
        models[model.variant] = model
    return models


def save_scenes(scenes: Dict[tuple, Optional[SyntheticImage]], path: str):
    arrays = {}
    labels = {}
    for (prompt_id, method, seed), scene in sorted(scenes.items()):
        if scene is None:
            continue
        key = f"{prompt_id}/{method}/{seed}"
        arrays.update({f"{key}/{name}": value for name, value in scene.to_arrays().items()})
        labels[key] = scene.metadata()
    save_arrays(arrays, path, {"scenes": labels})


def eval_file(config: RunConfig, checkpoint_paths: Sequence[str], report_path: str,
              scenes_path: Optional[str] = None, force: bool = False) -> MetricReport:
    models = load_models(config, checkpoint_paths, force)
    world = make_world(config)
    surrogate = SurrogateNPNet(config.surrogate, config.dims)
    report, scenes = run_evaluation(world, config, NoiseMethods(surrogate, models), workers=config.runtime.workers)
    report.save_csv(report_path)
    if scenes_path:
        save_scenes(scenes, scenes_path)
    return report


def report_file(config: RunConfig, report_path: str, style: str, csv_path: str, text_path: Optional[str] = None,
                category: Optional[str] = None, method: str = "v4") -> ReportArtifact:
    report = MetricReport.load_csv(report_path)
    counts = GoldenRPGModel(config.adapter, config.surrogate, config.dims).parameter_counts()
    artifact = render_report(report, style, counts, category, method)
    artifact.save(csv_path, text_path)
    return artifact


@dataclass
class PipelineRun:
    folder: str
    stages: List[Dict[str, str]] = field(default_factory=list)

    def path(self, name: str) -> str:
        return os.path.join(self.folder, name)

    def record(self, *command: str):
        """Paths inside the run folder are recorded by file name only."""
        command = tuple(os.path.relpath(part, self.folder) if part.startswith(self.folder) else part
                        for part in command)
        self.stages.append({"command": " ".join(command), "signature": GoldenRPG.signature(*command)})


class RunPipeline:
    @staticmethod
    def runPipeline(config: RunConfig, output_folder: str, variants: Sequence[str] = VARIANTS) -> PipelineRun:
        """
        Corpus, one checkpoint per variant (v4 warm-started from v3 when both run),
        evaluation and the main table, all inside output_folder.
        """
        unknown = [variant for variant in variants if variant not in VARIANTS]
        if unknown:
            raise ConfigError(f"Unknown variants {unknown}, expected some of {VARIANTS}.")
        variants = [variant for variant in VARIANTS if variant in variants]
        os.makedirs(output_folder, exist_ok=True)
        apply_runtime(config)
        run = PipelineRun(output_folder)
        digest = config_hash(config)
        corpus_path = run.path("corpus.grpg")
        gen_corpus_file(config, corpus_path)
        run.record("gen-corpus", digest, corpus_path)
        checkpoints = []
        for variant in variants:
            warm = run.path("v3.ckpt") if variant == "v4" and "v3" in variants else ""
            variant_config = config.replace(**{"train.variant": variant, "train.warm_start": warm})
            checkpoint = run.path(f"{variant}.ckpt")
            train_file(variant_config, corpus_path, checkpoint, run.path(f"{variant}_history.csv"), force=True)
            run.record("train", digest, variant, warm, checkpoint)
            checkpoints.append(checkpoint)
        methods = [m for m in config.eval.methods if m not in VARIANTS] + list(variants)
        eval_config = config.replace(**{"eval.methods": methods})
        report_path = run.path("report.csv")
        eval_file(eval_config, checkpoints, report_path, force=True)
        run.record("eval", digest, *checkpoints)
        report_file(config, report_path, "table", run.path("table.csv"), run.path("table.txt"))
        run.record("report", digest, report_path)
        if len(variants) > 1:
            report_file(config, report_path, "ablation", run.path("ablation.csv"), run.path("ablation.txt"))
            run.record("report", digest, "ablation", report_path)
        JSonUtils.saveJSON({"config_hash": digest, "stages": run.stages}, run.path("pipeline.json"))
        return run
