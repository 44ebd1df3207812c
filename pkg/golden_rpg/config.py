"""
Golden RPG - region-aware golden noise prediction at desk scale.
Licensed under GNU GPL-3.0-or-later.

Run configuration. Layers are merged as packaged defaults < preset < user file
< GRPG_CONFIG file < explicit overrides, validated against the packaged schema,
then turned into typed sections.
"""

import copy
import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional

from .commons import GoldenRPG
from .errors import ConfigError
from .json_utils import JSonUtils

logger = logging.getLogger(__name__)

VARIANTS = ("film_only", "v3", "v4")


@dataclass(frozen=True)
class DimsConfig:
    tokens: int = 8
    embed_dim: int = 64
    channels: int = 4
    latent: int = 32


@dataclass(frozen=True)
class SurrogateConfig:
    svd_rank: int = 4
    groups: int = 2
    patch: int = 4
    width: int = 32
    window: int = 4
    heads: int = 2
    mlp_ratio: int = 2
    alpha0: float = 0.5
    beta0: float = 1.0
    output_std: float = 0.125
    eps: float = 1e-5
    seed: int = 1234


@dataclass(frozen=True)
class AdapterConfig:
    film_hidden: int = 128
    film_dropout: float = 0.1
    gamma_min: float = 0.5
    gamma_max: float = 1.5
    rca_dim: int = 32
    rca_heads: int = 2
    rca_norm: str = "residual"
    confidence_hidden: int = 32
    alpha_max: float = 0.6
    alpha_init: float = 0.4
    sigma_at_128: float = 4.0
    seed: int = 99


@dataclass(frozen=True)
class LossConfig:
    lambda_r: float = 0.5
    lambda_d: float = 0.05
    lambda_d_alt: float = 0.1
    lambda_alpha: float = 1.0
    m0: float = 0.05
    tau_alpha: float = 0.05
    margin_clip_low: float = 0.1
    margin_clip_high: float = 3.0
    smooth_l1_beta: float = 1.0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 4
    lr: float = 3e-4
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    warmup_epochs: int = 60
    val_fraction: float = 0.1
    variant: str = "v4"
    warm_start: str = ""
    seed: int = 0


@dataclass(frozen=True)
class CorpusConfig:
    size: int = 220
    seed: int = 7
    mix: float = 1.0
    k_distribution: Dict[str, float] = field(default_factory=lambda: {"2": 0.6, "3": 0.3, "4": 0.1})
    candidates: int = 5
    keep_candidates: bool = False
    ratio_concentration: float = 5.0
    min_ratio: float = 0.1
    world_seed: int = 11
    positional_eps: float = 0.05
    attribute_weight: float = 0.6
    binding_weight: float = 0.4
    near_duplicate_jitter: float = 1e-4
    oracle_contrast_floor: float = 0.05
    categories: List[str] = field(default_factory=lambda: ["spatial", "color", "texture", "shape"])


@dataclass(frozen=True)
class EvalConfig:
    prompts: int = 20
    seeds: int = 5
    seed: int = 2024
    mix: float = 1.0
    band_at_1024: int = 32
    provider_noise: float = 0.05
    pool: int = 2
    methods: List[str] = field(default_factory=lambda: ["random", "golden", "weighted", "v4"])


@dataclass(frozen=True)
class RuntimeConfig:
    precision: str = "float64"
    checked: bool = True
    workers: int = 0


@dataclass(frozen=True)
class RunConfig:
    dims: DimsConfig = field(default_factory=DimsConfig)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **overrides: Any) -> "RunConfig":
        """Copy with dotted-key overrides, e.g. replace(**{"train.epochs": 3})."""
        return config_from_dict(merge_layers(self.to_dict(), expand_dotted(overrides)))


_SECTION_TYPES = {
    "dims": DimsConfig, "surrogate": SurrogateConfig, "adapter": AdapterConfig, "loss": LossConfig,
    "train": TrainConfig, "corpus": CorpusConfig, "eval": EvalConfig, "runtime": RuntimeConfig,
}

_JSON_TYPES = {
    "number": (int, float),
    "integer": (int,),
    "string": (str,),
    "boolean": (bool,),
    "object": (dict,),
    "array": (list, tuple),
}


class ConfigValidator:
    def __init__(self, schema: Optional[dict] = None) -> None:
        self.schema = schema if schema is not None else GoldenRPG.getSolvedSchema()
        self.errors: List[str] = []

    def validate(self, document: Mapping[str, Any], partial: bool = True) -> bool:
        """
        Checks a configuration document against the schema. Unknown keys and type or
        range violations are collected in self.errors; with partial=False required
        keys must be present.
        """
        self.errors = []
        self._validateNode(document, self.schema, "", partial)
        return not self.errors

    def _validateNode(self, value: Any, schema: dict, path: str, partial: bool):
        expected = schema.get("type")
        if expected:
            kinds = _JSON_TYPES[expected]
            # bool is an int subclass, reject it where numbers are expected
            if isinstance(value, bool) and expected != "boolean" or not isinstance(value, kinds):
                self.errors.append(f"{path or '<root>'}: expected {expected}, got {type(value).__name__}")
                return
        if "enum" in schema and value not in schema["enum"]:
            self.errors.append(f"{path}: {value!r} not one of {schema['enum']}")
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            if "minimum" in schema and value < schema["minimum"]:
                self.errors.append(f"{path}: {value} below minimum {schema['minimum']}")
            if "maximum" in schema and value > schema["maximum"]:
                self.errors.append(f"{path}: {value} above maximum {schema['maximum']}")
            if "exclusiveMinimum" in schema and value <= schema["exclusiveMinimum"]:
                self.errors.append(f"{path}: {value} must exceed {schema['exclusiveMinimum']}")
        if isinstance(value, dict):
            properties = schema.get("properties", {})
            extra = schema.get("additionalProperties", True)
            for key, item in value.items():
                child = f"{path}.{key}" if path else key
                if key in properties:
                    self._validateNode(item, properties[key], child, partial)
                elif extra is False:
                    self.errors.append(f"{child}: unknown key")
                elif isinstance(extra, dict):
                    self._validateNode(item, extra, child, partial)
            if not partial:
                for key in schema.get("required", []):
                    if key not in value:
                        self.errors.append(f"{path}.{key}: missing" if path else f"{key}: missing")
        if isinstance(value, (list, tuple)) and "items" in schema:
            for i, item in enumerate(value):
                self._validateNode(item, schema["items"], f"{path}[{i}]", partial)


def merge_layers(base: Mapping[str, Any], layer: Mapping[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(dict(base))
    for key, value in layer.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping) and key != "k_distribution":
            merged[key] = merge_layers(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def expand_dotted(overrides: Mapping[str, Any]) -> Dict[str, Any]:
    tree: Dict[str, Any] = {}
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = tree
        *path, leaf = dotted.split(".")
        for part in path:
            node = node.setdefault(part, {})
        node[leaf] = value
    return tree


def _checkLayer(layer: Mapping[str, Any], source: str):
    validator = ConfigValidator()
    if not validator.validate(layer):
        raise ConfigError(f"Invalid configuration in {source}: " + "; ".join(validator.errors))


def config_from_dict(document: Mapping[str, Any]) -> RunConfig:
    _checkLayer(document, "document")
    sections = {}
    for name, section_type in _SECTION_TYPES.items():
        values = dict(document.get(name, {}))
        if name == "corpus" and "k_distribution" in values:
            values["k_distribution"] = {str(k): float(v) for k, v in values["k_distribution"].items()}
        for f in dataclasses.fields(section_type):
            # integral floats from JSON stay floats in float fields
            if f.name in values and f.type is float and isinstance(values[f.name], int):
                values[f.name] = float(values[f.name])
        sections[name] = section_type(**values)
    config = RunConfig(**sections)
    _checkConsistency(config)
    return config


def _checkConsistency(config: RunConfig):
    if config.dims.latent % config.surrogate.patch:
        raise ConfigError(f"Latent {config.dims.latent} is not divisible by patch {config.surrogate.patch}.")
    grid = config.dims.latent // config.surrogate.patch
    if grid % config.surrogate.window:
        raise ConfigError(f"Token grid {grid} is not divisible by window {config.surrogate.window}.")
    if config.surrogate.width % config.surrogate.heads or config.adapter.rca_dim % config.adapter.rca_heads:
        raise ConfigError("Attention widths must be divisible by their head counts.")
    if config.dims.channels % config.surrogate.groups:
        raise ConfigError(f"{config.dims.channels} channels cannot form {config.surrogate.groups} groups.")
    total = sum(config.corpus.k_distribution.values())
    if abs(total - 1.0) > 1e-9 or any(int(k) < 1 for k in config.corpus.k_distribution):
        raise ConfigError(f"corpus.k_distribution must be a distribution over K >= 1, got "
                          f"{config.corpus.k_distribution}.")


def load_config(preset: Optional[str] = None, config_path: Optional[str] = None,
                overrides: Optional[Mapping[str, Any]] = None, use_environment: bool = True) -> RunConfig:
    document = JSonUtils.loadJSON(GoldenRPG.DEFAULT_CONFIG_PATH)
    layers = []
    if preset:
        preset_path = GoldenRPG.getPresetPath(preset)
        layers.append((preset_path, JSonUtils.loadJSON(preset_path)))
    if config_path:
        layers.append((config_path, JSonUtils.loadJSON(config_path)))
    env_path = GoldenRPG.getConfigOverridePath() if use_environment else None
    if env_path:
        layers.append((env_path, JSonUtils.loadJSON(env_path)))
    if overrides:
        layers.append(("command line", expand_dotted(overrides)))
    for source, layer in layers:
        _checkLayer(layer, source)
        logger.debug("Applying configuration layer %s", source)
        document = merge_layers(document, layer)
    return config_from_dict(document)


def portable_config(config: RunConfig) -> Dict[str, Any]:
    """Configuration minus what only selects a run: variant, warm-start path, evaluation and runtime."""
    document = config.to_dict()
    for section in ("eval", "runtime"):
        document.pop(section)
    for key in ("variant", "warm_start"):
        document["train"].pop(key)
    return document


def config_hash(config: RunConfig) -> str:
    return GoldenRPG.signature(JSonUtils.dumpCanonical(portable_config(config)))
