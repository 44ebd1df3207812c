"""
Golden RPG - region-aware golden noise prediction at desk scale.
Licensed under GNU GPL-3.0-or-later.

Frozen stand-in for the global noise predictor:

    z_g = SvdU(z_T) + (2 sigmoid(alpha0) - 1) * Ada(z_T, e_g) + beta0 * Swin(z_T + Ada(z_T, e_g))

SvdU is a rank-r truncated SVD residual, Ada a group norm whose per-group scale and
shift come from the token-averaged global text (identical at every pixel), and
Swin a two-stage windowed self-attention stack. The Region Cross-Attention hook
sits between the two stages.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import ops
from .config import DimsConfig, SurrogateConfig
from .errors import NonFiniteError, ShapeError
from .nn import MLP, LayerNorm, Linear, Module
from .synthetic import token_average
from .tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)

StageHook = Callable[[Tensor], Tensor]


def svd_u(z: np.ndarray, rank: int) -> np.ndarray:
    """
    Rank-r reconstruction of z viewed as a (C*H) x W matrix. Each left singular
    vector is signed so its largest-magnitude entry is positive.
    """
    z = np.asarray(z, dtype=np.float64)
    matrix = z.reshape(-1, z.shape[-1])
    if not 1 <= rank <= min(matrix.shape):
        raise ShapeError("svd_u", matrix.shape, detail=f"rank {rank} outside [1, {min(matrix.shape)}]")
    try:
        u, s, vt = np.linalg.svd(matrix, full_matrices=False)
    except np.linalg.LinAlgError as error:
        raise NonFiniteError(f"SVD of a {matrix.shape} matrix did not converge: {error}.") from error
    u, s, vt = u[:, :rank], s[:rank], vt[:rank]
    pivots = u[np.argmax(np.abs(u), axis=0), np.arange(rank)]
    signs = np.where(pivots < 0, -1.0, 1.0)
    u, vt = u * signs, vt * signs[:, None]
    return ((u * s) @ vt).reshape(z.shape)


def patchify(x: Tensor, patch: int) -> Tensor:
    """(C, H, W) to (h*w, C*p*p) patch rows in raster order."""
    channels, height, width = x.shape
    h, w = height // patch, width // patch
    x = ops.reshape(x, (channels, h, patch, w, patch))
    x = ops.transpose(x, (1, 3, 0, 2, 4))
    return ops.reshape(x, (h * w, channels * patch * patch))


def unpatchify(x: Tensor, channels: int, height: int, width: int, patch: int) -> Tensor:
    h, w = height // patch, width // patch
    x = ops.reshape(x, (h, w, channels, patch, patch))
    x = ops.transpose(x, (2, 0, 3, 1, 4))
    return ops.reshape(x, (channels, height, width))


def window_partition(x: Tensor, grid: int, window: int) -> Tensor:
    """(grid*grid, C) tokens to (windows, window*window, C)."""
    channels = x.shape[-1]
    n = grid // window
    x = ops.reshape(x, (n, window, n, window, channels))
    x = ops.transpose(x, (0, 2, 1, 3, 4))
    return ops.reshape(x, (n * n, window * window, channels))


def window_merge(x: Tensor, grid: int, window: int) -> Tensor:
    channels = x.shape[-1]
    n = grid // window
    x = ops.reshape(x, (n, n, window, window, channels))
    x = ops.transpose(x, (0, 2, 1, 3, 4))
    return ops.reshape(x, (grid * grid, channels))


class WindowAttention(Module):
    def __init__(self, width: int, heads: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = Linear(width, 3 * width, rng)
        self.proj = Linear(width, width, rng)

    def __call__(self, x: Tensor) -> Tensor:
        windows, tokens, width = x.shape
        qkv = ops.reshape(self.qkv(x), (windows, tokens, 3, self.heads, self.head_dim))
        qkv = ops.transpose(qkv, (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ops.matmul(ops.mul(q, self.scale), ops.transpose(k, (0, 1, 3, 2)))
        attended = ops.matmul(ops.softmax(scores, axis=-1), v)
        attended = ops.reshape(ops.transpose(attended, (0, 2, 1, 3)), (windows, tokens, width))
        return self.proj(attended)


class WindowBlock(Module):
    """Pre-norm windowed self-attention and MLP, both residual."""

    def __init__(self, config: SurrogateConfig, grid: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.grid = grid
        self.window = config.window
        self.norm1 = LayerNorm(config.width, config.eps)
        self.attn = WindowAttention(config.width, config.heads, rng)
        self.norm2 = LayerNorm(config.width, config.eps)
        self.mlp = MLP([config.width, config.mlp_ratio * config.width, config.width], rng)

    def __call__(self, x: Tensor) -> Tensor:
        windows = window_partition(self.norm1(x), self.grid, self.window)
        x = ops.add(x, window_merge(self.attn(windows), self.grid, self.window))
        return ops.add(x, self.mlp(self.norm2(x)))


@dataclass(frozen=True)
class SurrogateOutput:
    z_g: Tensor
    svd: np.ndarray
    ada: Tensor
    swin: Tensor


class SurrogateNPNet(Module):
    def __init__(self, config: SurrogateConfig, dims: DimsConfig) -> None:
        super().__init__()
        self.config = config
        self.dims = dims
        self.grid = dims.latent // config.patch
        rng = np.random.default_rng(config.seed)
        self.ada = Linear(dims.embed_dim, 2 * config.groups, rng)
        self.embed = Linear(dims.channels * config.patch ** 2, config.width, rng)
        self.stage1 = WindowBlock(config, self.grid, rng)
        self.stage2 = WindowBlock(config, self.grid, rng)
        self.norm = LayerNorm(config.width, config.eps)
        self.head = Linear(config.width, dims.channels * config.patch ** 2, rng, zero=True)
        self.head.load_state_dict({
            "weight": rng.normal(0.0, config.output_std, self.head.weight.shape),
            "bias": np.zeros(self.head.out_features),
        })
        self.set_requires_grad(False)

    @property
    def gate(self) -> float:
        return 2.0 / (1.0 + np.exp(-self.config.alpha0)) - 1.0

    @property
    def token_grid(self) -> int:
        return self.grid

    def ada_group_norm(self, z: Tensor, global_mean: Tensor) -> Tensor:
        """
        Group norm of z followed by one per-group affine map from the global text,
        applied identically at every spatial position.
        """
        z = as_tensor(z)
        groups = self.config.groups
        channels = z.shape[0]
        normalized = ops.group_norm(z, groups, self.config.eps)
        affine = self.ada(as_tensor(global_mean))
        group_of_channel = np.repeat(np.arange(groups), channels // groups)
        scale = ops.add(ops.take(affine, group_of_channel), 1.0)
        shift = ops.take(affine, group_of_channel + groups)
        scale = ops.reshape(scale, (channels, 1, 1))
        shift = ops.reshape(shift, (channels, 1, 1))
        return ops.add(ops.mul(normalized, scale), shift)

    def stage_forward(self, tokens: Tensor, hook: Optional[StageHook] = None) -> Tensor:
        """Embedded patch tokens through both stages, the hook rewriting the features in between."""
        features = self.stage1(tokens)
        if hook is not None:
            rewritten = hook(features)
            if not isinstance(rewritten, Tensor) or rewritten.shape != features.shape:
                shape = rewritten.shape if isinstance(rewritten, Tensor) else ()
                raise ShapeError("stage hook", features.shape, shape)
            features = rewritten
        out = self.head(self.norm(self.stage2(features)))
        return unpatchify(out, self.dims.channels, self.dims.latent, self.dims.latent, self.config.patch)

    def swin(self, z: Tensor, hook: Optional[StageHook] = None) -> Tensor:
        tokens = self.embed(patchify(as_tensor(z), self.config.patch))
        return self.stage_forward(tokens, hook)

    def compose(self, svd: np.ndarray, ada: Tensor, swin: Tensor) -> Tensor:
        return ops.add(ops.add(Tensor(svd), ops.mul(ada, self.gate)), ops.mul(swin, self.config.beta0))

    def npnet_global(self, z_t: np.ndarray, global_tokens: np.ndarray, hook: Optional[StageHook] = None,
                     global_mean: Optional[np.ndarray] = None) -> SurrogateOutput:
        """
        Full surrogate forward. With a hook the Swin term is the hooked one, giving z_swin.
        `global_mean` overrides the token average of the global text.
        """
        z = as_tensor(z_t)
        expected = (self.dims.channels, self.dims.latent, self.dims.latent)
        if z.shape != expected:
            raise ShapeError("npnet_global", z.shape, expected)
        mean = token_average(global_tokens) if global_mean is None else np.asarray(global_mean)
        svd = svd_u(z.data, self.config.svd_rank)
        ada = self.ada_group_norm(z, Tensor(mean))
        swin = self.swin(ops.add(z, ada), hook)
        return SurrogateOutput(self.compose(svd, ada, swin), svd, ada, swin)
