import dataclasses

import numpy as np
import pytest

from golden_rpg import ops
from golden_rpg.errors import ShapeError
from golden_rpg.surrogate import SurrogateNPNet, patchify, svd_u, unpatchify, window_merge, window_partition
from golden_rpg.tensor import Tensor, no_grad


@pytest.fixture
def surrogate(small_config):
    return SurrogateNPNet(small_config.surrogate, small_config.dims)


def _noise(config, seed=0):
    dims = config.dims
    return np.random.default_rng(seed).standard_normal((dims.channels, dims.latent, dims.latent))


def test_svd_full_rank_reconstructs(rng):
    z = rng.standard_normal((1, 8, 8))
    np.testing.assert_allclose(svd_u(z, 8), z, atol=1e-9)


def test_svd_of_rank_one_input_is_exact():
    z = np.outer([1.0, 2.0, 3.0], [4.0, 5.0])[None]
    np.testing.assert_allclose(svd_u(z, 1), z, atol=1e-12)


def test_svd_truncation_error_is_the_tail_spectrum(rng):
    z = rng.standard_normal((1, 8, 8))
    singular = np.linalg.svd(z[0], compute_uv=False)
    for rank in (1, 3, 6):
        error = np.linalg.norm(z - svd_u(z, rank))
        assert error == pytest.approx(np.sqrt(np.sum(singular[rank:] ** 2)), rel=1e-9)


def test_svd_rank_bounds(rng):
    with pytest.raises(ShapeError):
        svd_u(rng.standard_normal((1, 4, 4)), 5)


def test_patches_and_windows_invert(rng):
    x = Tensor(rng.standard_normal((4, 16, 16)))
    np.testing.assert_array_equal(unpatchify(patchify(x, 4), 4, 16, 16, 4).numpy(), x.numpy())
    tokens = Tensor(rng.standard_normal((16, 3)))
    np.testing.assert_array_equal(window_merge(window_partition(tokens, 4, 2), 4, 2).numpy(), tokens.numpy())


def test_ada_without_affine_is_a_plain_group_norm(surrogate, small_config, rng):
    surrogate.ada.load_state_dict({"weight": np.zeros(surrogate.ada.weight.shape),
                                   "bias": np.zeros(surrogate.ada.bias.shape)})
    z = Tensor(_noise(small_config) * 3.0 + 1.0)
    out = surrogate.ada_group_norm(z, Tensor(rng.standard_normal(small_config.dims.embed_dim))).numpy()
    for group in out.reshape(small_config.surrogate.groups, -1):
        assert group.mean() == pytest.approx(0.0, abs=1e-12)
        assert group.var() == pytest.approx(1.0, abs=1e-4)


def test_ada_affine_is_spatially_uniform(surrogate, small_config, rng):
    z = Tensor(_noise(small_config))
    first = surrogate.ada_group_norm(z, Tensor(rng.standard_normal(small_config.dims.embed_dim))).numpy()
    second = surrogate.ada_group_norm(z, Tensor(rng.standard_normal(small_config.dims.embed_dim))).numpy()
    normalized = ops.group_norm(z, small_config.surrogate.groups).numpy()
    for channel in range(small_config.dims.channels):
        # both outputs are affine in the same normalized map, with per-channel constants
        design = np.stack([normalized[channel].ravel(), np.ones(normalized[channel].size)], axis=1)
        for out in (first, second):
            _, residual, *_ = np.linalg.lstsq(design, out[channel].ravel(), rcond=None)
            assert residual.sum() == pytest.approx(0.0, abs=1e-18)


def test_identity_hook_changes_nothing(surrogate, small_config, rng):
    tokens = surrogate.embed(patchify(Tensor(_noise(small_config)), small_config.surrogate.patch))
    plain = surrogate.stage_forward(tokens).numpy()
    hooked = surrogate.stage_forward(tokens, lambda features: features).numpy()
    np.testing.assert_array_equal(plain, hooked)
    # a uniform shift is removed by the layer norms, a per-channel one is not
    uniform = surrogate.stage_forward(tokens, lambda features: ops.add(features, 0.5)).numpy()
    np.testing.assert_allclose(uniform, plain, atol=1e-9)
    offsets = Tensor(rng.standard_normal(small_config.surrogate.width))
    shifted = surrogate.stage_forward(tokens, lambda features: ops.add(features, offsets)).numpy()
    assert not np.allclose(plain, shifted)


def test_hook_must_keep_the_shape(surrogate, small_config):
    tokens = surrogate.embed(patchify(Tensor(_noise(small_config)), small_config.surrogate.patch))
    with pytest.raises(ShapeError):
        surrogate.stage_forward(tokens, lambda features: features[:1])


def test_closed_gate_and_zero_swin_leave_the_svd_term(small_config):
    config = dataclasses.replace(small_config.surrogate, alpha0=0.0, beta0=0.0)
    surrogate = SurrogateNPNet(config, small_config.dims)
    assert surrogate.gate == 0.0
    z = _noise(small_config)
    tokens = np.ones((small_config.dims.tokens, small_config.dims.embed_dim))
    np.testing.assert_allclose(surrogate.npnet_global(z, tokens).z_g.numpy(), svd_u(z, config.svd_rank),
                               atol=1e-12)


def test_forward_is_deterministic_and_frozen(surrogate, small_config, rng):
    z = _noise(small_config)
    tokens = rng.standard_normal((small_config.dims.tokens, small_config.dims.embed_dim))
    with no_grad():
        first = surrogate.npnet_global(z, tokens).z_g.numpy()
    second = surrogate.npnet_global(z, tokens).z_g
    np.testing.assert_array_equal(first, second.numpy())
    assert not second.requires_grad
    assert not any(t.requires_grad for t in surrogate.named_parameters().values())
    rebuilt = SurrogateNPNet(small_config.surrogate, small_config.dims)
    np.testing.assert_array_equal(rebuilt.npnet_global(z, tokens).z_g.numpy(), first)


def test_wrong_latent_shape(surrogate, small_config):
    with pytest.raises(ShapeError):
        surrogate.npnet_global(np.zeros((3, 16, 16)), np.ones((small_config.dims.tokens, small_config.dims.embed_dim)))
