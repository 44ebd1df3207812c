"""
Golden RPG - region-aware golden noise prediction at desk scale.
Licensed under GNU GPL-3.0-or-later.

The trainable adapter stack over the frozen surrogate: a per-region FiLM adapter,
Region Cross-Attention between the surrogate stages, and the Confidence Head
that blends the two paths:

    z_out = z_swin + alpha * (z_film - z_swin)

All three blocks start as the identity on the surrogate's z_g: the FiLM output
layer and W_O are zero, and alpha starts at alpha_init.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from . import ops
from .config import VARIANTS, AdapterConfig, DimsConfig, SurrogateConfig
from .errors import ShapeError
from .geometry import downsample_masks, sigma_for_width, soften_masks, split_axis
from .nn import MLP, LayerNorm, Linear, Module
from .surrogate import SurrogateNPNet
from .synthetic import ConfidenceFeatures, PromptRecord, confidence_features, token_average
from .tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)

BLOCKS_BY_VARIANT = {
    "film_only": ("film",),
    "v3": ("film", "rca"),
    "v4": ("film", "rca", "confidence"),
}


class FilmAdapter(Module):
    """Two-layer perceptron from a region text mean to per-channel (raw gamma, raw beta)."""

    def __init__(self, config: AdapterConfig, dims: DimsConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.config = config
        self.channels = dims.channels
        self.mlp = MLP([dims.embed_dim, config.film_hidden, 2 * dims.channels], rng, dropout=config.film_dropout,
                       zero_last=True)

    def film_params(self, region_means: Tensor, tau: float,
                    rng: Optional[np.random.Generator] = None) -> tuple:
        """
        gamma = clamp(1 + raw_gamma, gamma_min, gamma_max), beta = clamp(raw_beta, -tau, tau),
        one row per region.
        """
        if tau <= 0:
            raise ValueError(f"tau must be positive, got {tau}.")
        raw = self.mlp(as_tensor(region_means), rng)
        gamma = ops.clamp(ops.add(raw[..., :self.channels], 1.0), self.config.gamma_min, self.config.gamma_max)
        beta = ops.clamp(raw[..., self.channels:], -tau, tau)
        return gamma, beta


def film_apply(z_g: Tensor, gamma: Tensor, beta: Tensor, masks: np.ndarray) -> Tensor:
    """z_film[c, x, y] = sum_k m_k(x, y) * (gamma_kc * z_g[c, x, y] + beta_kc)."""
    z_g, gamma, beta = as_tensor(z_g), as_tensor(gamma), as_tensor(beta)
    masks = np.asarray(masks, dtype=np.float64)
    count = masks.shape[0]
    if gamma.shape[0] != count or beta.shape[0] != count:
        raise ShapeError("film_apply", gamma.shape, masks.shape, detail="one parameter row per region mask")
    channels, height, width = z_g.shape
    if masks.shape[1:] != (height, width):
        raise ShapeError("film_apply", z_g.shape, masks.shape)
    flat = Tensor(masks.reshape(count, height * width))
    scale = ops.reshape(ops.matmul(ops.transpose(gamma), flat), (channels, height, width))
    shift = ops.reshape(ops.matmul(ops.transpose(beta), flat), (channels, height, width))
    return ops.add(ops.mul(z_g, scale), shift)


class RegionCrossAttention(Module):
    """
    Patch tokens attend to each region's text tokens; the per-region updates are
    routed back through the region masks as a residual.
    """

    def __init__(self, config: AdapterConfig, dims: DimsConfig, width: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.heads = config.rca_heads
        self.dim = config.rca_dim
        self.head_dim = config.rca_dim // config.rca_heads
        self.mode = config.rca_norm
        self.w_q = Linear(width, config.rca_dim, rng, bias=False)
        self.w_k = Linear(dims.embed_dim, config.rca_dim, rng, bias=False)
        self.w_v = Linear(dims.embed_dim, config.rca_dim, rng, bias=False)
        self.w_o = Linear(config.rca_dim, width, zero=True)
        self.norm = LayerNorm(config.rca_dim if self.mode == "residual" else width)

    def _heads(self, x: Tensor) -> Tensor:
        """(..., N, d_a) to (..., heads, N, d)."""
        lead = x.shape[:-2]
        tokens = x.shape[-2]
        x = ops.reshape(x, lead + (tokens, self.heads, self.head_dim))
        order = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return ops.transpose(x, order)

    def region_cross_attention(self, features: Tensor, region_tokens: Tensor, masks: np.ndarray) -> Tensor:
        """
        features (N, C_s), region_tokens (K, L, D), masks (K, N) summing to 1 per token.
        """
        features, region_tokens = as_tensor(features), as_tensor(region_tokens)
        masks = np.asarray(masks, dtype=np.float64)
        count, tokens = masks.shape
        if features.shape[0] != tokens or region_tokens.shape[0] != count:
            raise ShapeError("region_cross_attention", features.shape, masks.shape,
                             detail=f"{region_tokens.shape[0]} token banks")
        query = self._heads(self.w_q(features))
        query = ops.stack([query] * count, axis=0)
        keys = self._heads(self.w_k(region_tokens))
        values = self._heads(self.w_v(region_tokens))
        scores = ops.mul(ops.matmul(query, ops.transpose(keys, (0, 1, 3, 2))), self.head_dim ** -0.5)
        attended = ops.matmul(ops.softmax(scores, axis=-1), values)
        deltas = ops.reshape(ops.transpose(attended, (0, 2, 1, 3)), (count, tokens, self.dim))
        if self.mode == "residual":
            deltas = self.norm(deltas)
        routed = ops.sum(ops.mul(self.w_o(deltas), masks.reshape(count, tokens, 1)), axis=0)
        if self.mode == "residual":
            return ops.add(features, routed)
        return self.norm(ops.add(features, routed))

    def __call__(self, features: Tensor, region_tokens: Tensor, masks: np.ndarray) -> Tensor:
        return self.region_cross_attention(features, region_tokens, masks)


class ConfidenceHead(Module):
    """7 -> hidden -> hidden -> 1 perceptron; alpha = alpha_max * sigmoid(output)."""

    def __init__(self, config: AdapterConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.alpha_max = config.alpha_max
        bias = float(np.log(config.alpha_init / (config.alpha_max - config.alpha_init)))
        self.mlp = MLP([7, config.confidence_hidden, config.confidence_hidden, 1], rng, zero_last=True,
                       last_bias=bias)

    def confidence_alpha(self, standardized: Tensor) -> Tensor:
        logit = self.mlp(as_tensor(standardized))
        return ops.mul(ops.sigmoid(ops.reshape(logit, ())), self.alpha_max)


@dataclass(frozen=True)
class FeatureMoments:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls) -> "FeatureMoments":
        return cls(np.zeros(7), np.ones(7))

    @classmethod
    def fit(cls, features: np.ndarray) -> "FeatureMoments":
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        std = features.std(axis=0)
        # constant features (f5 in a single-K corpus) stay unscaled
        return cls(features.mean(axis=0), np.where(std < 1e-8, 1.0, std))

    def standardize(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features, dtype=np.float64) - self.mean) / self.std


@dataclass(frozen=True)
class AdapterOutput:
    z_g: Tensor
    z_swin: Tensor
    z_film: Tensor
    z_out: Tensor
    alpha: Tensor
    gamma: Tensor
    beta: Tensor
    tau: float

    def diagnostics(self) -> Dict[str, object]:
        return {"alpha": self.alpha.item(), "gamma": self.gamma.numpy().tolist(),
                "beta": self.beta.numpy().tolist(), "tau": self.tau}


class GoldenRPGModel(Module):
    """
    Frozen surrogate plus the adapter blocks of one variant. Blocks outside the
    variant are kept (so checkpoints share a layout) but never used or trained.
    """

    def __init__(self, adapter: AdapterConfig, surrogate: SurrogateConfig, dims: DimsConfig,
                 variant: str = "v4", moments: Optional[FeatureMoments] = None) -> None:
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"Unknown variant {variant}, expected one of {VARIANTS}.")
        self.variant = variant
        self.adapter_config = adapter
        self.dims = dims
        self.moments = moments or FeatureMoments.identity()
        self.surrogate = SurrogateNPNet(surrogate, dims)
        self.film = self.new_block("film")
        self.rca = self.new_block("rca")
        self.confidence = self.new_block("confidence")
        self.sigma_b = sigma_for_width(dims.latent, adapter.sigma_at_128)
        self.eval()

    def new_block(self, name: str) -> Module:
        """Freshly initialized block, each drawn from its own seeded stream."""
        rng = np.random.default_rng([self.adapter_config.seed, ("film", "rca", "confidence").index(name)])
        if name == "film":
            return FilmAdapter(self.adapter_config, self.dims, rng)
        if name == "rca":
            return RegionCrossAttention(self.adapter_config, self.dims, self.surrogate.config.width, rng)
        return ConfidenceHead(self.adapter_config, rng)

    def reset_block(self, name: str):
        setattr(self, name, self.new_block(name))

    @property
    def blocks(self) -> tuple:
        return BLOCKS_BY_VARIANT[self.variant]

    def trainable_parameters(self) -> Dict[str, Tensor]:
        named = {}
        for block in self.blocks:
            named.update(getattr(self, block).named_parameters(block + "."))
        return named

    def adapter_state(self) -> Dict[str, np.ndarray]:
        state = {}
        for block in ("film", "rca", "confidence"):
            state.update({f"{block}.{k}": v for k, v in getattr(self, block).state_dict().items()})
        return state

    def frozen_state(self) -> Dict[str, np.ndarray]:
        return self.surrogate.state_dict()

    def parameter_counts(self) -> Dict[str, int]:
        counts = {block: getattr(self, block).parameter_count() for block in ("film", "rca", "confidence")}
        return {variant: sum(counts[b] for b in blocks) for variant, blocks in BLOCKS_BY_VARIANT.items()}

    def standardized_features(self, features: ConfidenceFeatures) -> np.ndarray:
        return self.moments.standardize(features.as_array())

    def golden_rpg_forward(self, z_t: np.ndarray, global_tokens: np.ndarray, region_tokens: np.ndarray,
                           hard_masks: np.ndarray, soft_masks: Optional[np.ndarray] = None,
                           features: Optional[ConfidenceFeatures] = None, rng: Optional[np.random.Generator] = None,
                           force_alpha: Optional[float] = None, axis: Optional[str] = None) -> AdapterOutput:
        """
        Full region-aware forward. Without soft masks the hard ones are blurred along `axis`,
        recovered from the masks themselves when not given.
        """
        region_tokens = np.asarray(region_tokens, dtype=np.float64)
        hard_masks = np.asarray(hard_masks, dtype=np.float64)
        if region_tokens.shape[0] != hard_masks.shape[0]:
            raise ShapeError("golden_rpg_forward", region_tokens.shape, hard_masks.shape,
                             detail="one token bank per region mask")
        if soft_masks is None:
            soft_masks = soften_masks(hard_masks, self.sigma_b, axis or split_axis(hard_masks))
        base = self.surrogate.npnet_global(z_t, global_tokens)
        z_g = base.z_g
        if "rca" in self.blocks:
            grid = self.surrogate.token_grid
            grid_masks = downsample_masks(hard_masks, grid, grid).reshape(hard_masks.shape[0], grid * grid)
            bank = Tensor(region_tokens)

            def hook(tokens: Tensor) -> Tensor:
                return self.rca(tokens, bank, grid_masks)

            swin = self.surrogate.swin(ops.add(as_tensor(z_t), base.ada), hook)
            z_swin = self.surrogate.compose(base.svd, base.ada, swin)
        else:
            z_swin = z_g
        tau = float(np.std(z_g.data))
        region_means = Tensor(np.stack([token_average(t) for t in region_tokens]))
        gamma, beta = self.film.film_params(region_means, tau, rng)
        z_film = film_apply(z_g, gamma, beta, soft_masks)
        if force_alpha is not None:
            alpha = Tensor(float(force_alpha))
        elif "confidence" in self.blocks:
            if features is None:
                features = confidence_features(token_average(global_tokens), list(region_means.data))
            alpha = self.confidence.confidence_alpha(Tensor(self.standardized_features(features)))
        else:
            alpha = Tensor(self.adapter_config.alpha_init)
        z_out = ops.add(z_swin, ops.mul(ops.sub(z_film, z_swin), alpha))
        return AdapterOutput(z_g, z_swin, z_film, z_out, alpha, gamma, beta, tau)

    def forward_prompt(self, prompt: PromptRecord, z_t: np.ndarray, rng: Optional[np.random.Generator] = None,
                       force_alpha: Optional[float] = None) -> AdapterOutput:
        hard = prompt.hard_masks()
        return self.golden_rpg_forward(z_t, prompt.global_tokens, prompt.region_tokens, hard,
                                       soften_masks(hard, self.sigma_b, prompt.layout.axis), prompt.features(),
                                       rng, force_alpha)


def block_names(variant: str) -> List[str]:
    return list(BLOCKS_BY_VARIANT[variant])
