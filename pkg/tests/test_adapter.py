import numpy as np
import pytest

from golden_rpg import ops
from golden_rpg.adapter import (BLOCKS_BY_VARIANT, ConfidenceHead, FeatureMoments, FilmAdapter, GoldenRPGModel,
                                RegionCrossAttention, film_apply)
from golden_rpg.config import AdapterConfig, DimsConfig
from golden_rpg.errors import ShapeError
from golden_rpg.geometry import (RegionLayout, build_masks, downsample_masks, masks_from_ratios, normalize_ratios,
                                 soften_masks)
from golden_rpg.gradcheck import gradient_check
from golden_rpg.losses import total_loss
from golden_rpg.synthetic import World, gen_prompts, make_prompt
from golden_rpg.tensor import Tensor, no_grad


def _model(config, variant="v4"):
    return GoldenRPGModel(config.adapter, config.surrogate, config.dims, variant)


def _randomize(module, rng, scale=0.3):
    module.load_state_dict({name: scale * rng.standard_normal(array.shape)
                            for name, array in module.state_dict().items()})


def _noise(config, seed):
    dims = config.dims
    return np.random.default_rng([seed, 17]).standard_normal((dims.channels, dims.latent, dims.latent))


def test_fresh_film_is_the_identity(small_config, rng):
    film = FilmAdapter(small_config.adapter, small_config.dims, rng).eval()
    gamma, beta = film.film_params(Tensor(rng.standard_normal((3, small_config.dims.embed_dim))), 0.7)
    np.testing.assert_array_equal(gamma.numpy(), np.ones((3, small_config.dims.channels)))
    np.testing.assert_array_equal(beta.numpy(), np.zeros((3, small_config.dims.channels)))


def test_film_outputs_are_clamped(small_config, rng):
    film = FilmAdapter(small_config.adapter, small_config.dims, rng).eval()
    channels = small_config.dims.channels
    last = film.mlp.layer1
    last.load_state_dict({"weight": np.zeros(last.weight.shape),
                          "bias": np.concatenate([np.full(channels, 10.0), np.full(channels, -5.0)])})
    gamma, beta = film.film_params(Tensor(np.ones((2, small_config.dims.embed_dim))), 0.7)
    np.testing.assert_array_equal(gamma.numpy(), np.full((2, channels), 1.5))
    np.testing.assert_array_equal(beta.numpy(), np.full((2, channels), -0.7))
    with pytest.raises(ValueError):
        film.film_params(Tensor(np.ones((2, small_config.dims.embed_dim))), 0.0)


def test_film_apply_per_region():
    hard = masks_from_ratios(RegionLayout((0.5, 0.5), 4, 4))
    z = Tensor(np.ones((1, 4, 4)))
    out = film_apply(z, Tensor([[2.0], [1.0]]), Tensor([[0.0], [0.0]]), hard).numpy()
    np.testing.assert_array_equal(out[0, :, :2], np.full((4, 2), 2.0))
    np.testing.assert_array_equal(out[0, :, 2:], np.full((4, 2), 1.0))
    identity = film_apply(z, Tensor(np.ones((2, 1))), Tensor(np.zeros((2, 1))), hard)
    np.testing.assert_array_equal(identity.numpy(), z.numpy())


def test_film_apply_blends_across_soft_boundaries():
    soft = build_masks(RegionLayout((0.5, 0.5), 1, 16), 2.0).soft
    out = film_apply(Tensor(np.ones((1, 1, 16))), Tensor([[2.0], [1.0]]), Tensor([[0.0], [0.0]]), soft).numpy()
    row = out[0, 0]
    assert np.all(np.diff(row) <= 1e-12)
    assert row[0] == pytest.approx(2.0) and row[-1] == pytest.approx(1.0)
    assert 1.0 < row[8] < 2.0


def test_film_apply_needs_one_row_per_mask():
    hard = masks_from_ratios(RegionLayout((0.5, 0.5), 4, 4))
    with pytest.raises(ShapeError):
        film_apply(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((3, 1))), Tensor(np.zeros((3, 1))), hard)


def test_confidence_head_starts_at_alpha_init(small_config, rng):
    head = ConfidenceHead(small_config.adapter, rng)
    alpha = head.confidence_alpha(Tensor(rng.standard_normal(7))).item()
    assert alpha == pytest.approx(0.4, abs=1e-12)


def test_confidence_head_stays_in_range(small_config, rng):
    head = ConfidenceHead(small_config.adapter, rng)
    _randomize(head, rng, 3.0)
    for _ in range(20):
        alpha = head.confidence_alpha(Tensor(5.0 * rng.standard_normal(7))).item()
        assert 0.0 <= alpha <= 0.6
    last = head.mlp.layer2
    last.load_state_dict({"weight": np.zeros(last.weight.shape), "bias": np.array([-50.0])})
    assert head.confidence_alpha(Tensor(np.zeros(7))).item() < 1e-20


def test_feature_moments():
    moments = FeatureMoments.fit(np.array([[1.0, 5.0], [3.0, 5.0]]))
    np.testing.assert_array_equal(moments.mean, [2.0, 5.0])
    np.testing.assert_array_equal(moments.std, [1.0, 1.0])
    np.testing.assert_array_equal(moments.standardize(np.array([3.0, 6.0])), [1.0, 1.0])


def _rcaSetup(rng, norm="residual"):
    config = AdapterConfig(rca_dim=8, rca_heads=2, rca_norm=norm)
    dims = DimsConfig(tokens=3, embed_dim=6, channels=4, latent=16)
    rca = RegionCrossAttention(config, dims, 4, rng)
    features = Tensor(rng.standard_normal((6, 4)))
    tokens = Tensor(rng.standard_normal((2, 3, 6)))
    masks = np.array([[1, 1, 1, 0, 0, 0], [0, 0, 0, 1, 1, 1]], dtype=float)
    return rca, features, tokens, masks


def test_rca_with_zero_output_projection_is_the_identity(rng):
    rca, features, tokens, masks = _rcaSetup(rng)
    np.testing.assert_array_equal(rca(features, tokens, masks).numpy(), features.numpy())


def test_rca_single_region_is_plain_cross_attention(rng):
    config = AdapterConfig(rca_dim=8, rca_heads=2)
    dims = DimsConfig(tokens=3, embed_dim=6, channels=4, latent=16)
    rca = RegionCrossAttention(config, dims, 4, rng)
    _randomize(rca, rng, 0.5)
    features = rng.standard_normal((5, 4))
    tokens = rng.standard_normal((1, 3, 6))
    out = rca(Tensor(features), Tensor(tokens), np.ones((1, 5))).numpy()

    state = rca.state_dict()
    q = features @ state["w_q.weight"]
    k = tokens[0] @ state["w_k.weight"]
    v = tokens[0] @ state["w_v.weight"]
    heads = []
    for h in range(2):
        cols = slice(4 * h, 4 * h + 4)
        scores = q[:, cols] @ k[:, cols].T / 2.0
        weights = np.exp(scores - scores.max(axis=1, keepdims=True))
        heads.append((weights / weights.sum(axis=1, keepdims=True)) @ v[:, cols])
    attended = np.concatenate(heads, axis=1)
    centred = attended - attended.mean(axis=1, keepdims=True)
    normed = centred / np.sqrt((centred ** 2).mean(axis=1, keepdims=True) + 1e-5)
    normed = normed * state["norm.gain"] + state["norm.bias"]
    expected = features + normed @ state["w_o.weight"] + state["w_o.bias"]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def _randomLayout(rng, count):
    height, width = (int(v) for v in rng.integers(4 * count, 4 * count + 6, size=2))
    axis = ("horizontal", "vertical")[int(rng.integers(2))]
    return RegionLayout(normalize_ratios(1.0 + rng.random(count)), height, width, axis)


@pytest.mark.parametrize("seed", range(20))
def test_film_gradients_on_random_layouts(seed):
    rng = np.random.default_rng([seed, 31])
    count, channels = int(rng.integers(1, 4)), int(rng.integers(1, 5))
    layout = _randomLayout(rng, count)
    dims = DimsConfig(tokens=3, embed_dim=6, channels=channels, latent=16)
    film = FilmAdapter(AdapterConfig(film_hidden=8), dims, rng).eval()
    _randomize(film, rng, 0.1)
    soft = soften_masks(masks_from_ratios(layout), 1.0, layout.axis)
    z = Tensor(rng.standard_normal((channels, layout.height, layout.width)))
    region_means = Tensor(rng.standard_normal((count, 6)))
    params = {name: Tensor(t.numpy(), requires_grad=True) for name, t in film.named_parameters().items()}

    def expression(p):
        film.bind(p)
        gamma, beta = film.film_params(region_means, 1.0)
        return ops.sum_squares(film_apply(z, gamma, beta, soft))

    errors = gradient_check(expression, params, rng=rng, max_coordinates=12)
    assert set(errors) == set(params)
    for name, error in errors.items():
        assert error <= 1e-6, name


@pytest.mark.parametrize("seed", range(20))
def test_rca_gradients_on_random_grids(seed):
    rng = np.random.default_rng([seed, 37])
    count, heads = int(rng.integers(1, 5)), int(rng.integers(1, 3))
    height, width = (int(v) for v in rng.integers(2, 5, size=2))
    channels = (4, 8)[seed % 2]
    config = AdapterConfig(rca_dim=4 * heads, rca_heads=heads, rca_norm=("residual", "literal")[seed % 2])
    dims = DimsConfig(tokens=3, embed_dim=6, channels=4, latent=16)
    rca = RegionCrossAttention(config, dims, channels, rng)
    _randomize(rca, rng, 0.5)
    masks = np.eye(count)[rng.integers(count, size=height * width)].T
    tokens = Tensor(rng.standard_normal((count, int(rng.integers(2, 5)), 6)))
    params = {name: Tensor(t.numpy(), requires_grad=True) for name, t in rca.named_parameters().items()}
    params["features"] = Tensor(rng.standard_normal((height * width, channels)), requires_grad=True)

    def expression(p):
        rca.bind({name: t for name, t in p.items() if name != "features"})
        return ops.sum_squares(rca(p["features"], tokens, masks))

    errors = gradient_check(expression, params, rng=rng, max_coordinates=12)
    assert set(errors) == set(params)
    for name, error in errors.items():
        assert error <= 1e-6, name


@pytest.mark.parametrize("seed", range(20))
def test_confidence_gradients_on_random_features(seed):
    rng = np.random.default_rng([seed, 41])
    head = ConfidenceHead(AdapterConfig(confidence_hidden=int(rng.integers(4, 17))), rng)
    _randomize(head, rng, 0.5)
    features = Tensor(2.0 * rng.standard_normal(7))
    target = float(rng.uniform(0.0, 0.6))
    params = {name: Tensor(t.numpy(), requires_grad=True) for name, t in head.named_parameters().items()}

    def expression(p):
        head.bind(p)
        return ops.smooth_l1(head.confidence_alpha(features), target, 0.05)

    errors = gradient_check(expression, params, rng=rng, max_coordinates=12)
    assert set(errors) == set(params)
    for name, error in errors.items():
        assert error <= 1e-5, name


@pytest.mark.parametrize("norm", ["residual", "literal"])
def test_rca_edit_of_one_bank_stays_in_its_rows(norm, rng):
    config = AdapterConfig(rca_dim=8, rca_heads=2, rca_norm=norm)
    rca = RegionCrossAttention(config, DimsConfig(tokens=3, embed_dim=6, channels=4, latent=16), 4, rng)
    _randomize(rca, rng, 0.5)
    assert np.any(rca.w_o.weight.numpy() != 0.0)
    tokens = np.zeros((2, 3, 6))
    tokens[0, :, :3] = rng.standard_normal((3, 3))
    tokens[1, :, 3:] = rng.standard_normal((3, 3))
    edited = tokens.copy()
    edited[1, :, 3:] += rng.standard_normal((3, 3))
    masks = np.array([[1, 0, 1, 1, 0, 0], [0, 1, 0, 0, 1, 1]], dtype=float)
    features = Tensor(rng.standard_normal((6, 4)))
    before = rca(features, Tensor(tokens), masks).numpy()
    after = rca(features, Tensor(edited), masks).numpy()
    outside = masks[1] == 0
    np.testing.assert_array_equal(before[outside], after[outside])
    assert np.all(np.any(before[~outside] != after[~outside], axis=1))


def test_inter_stage_update_changes_only_the_edited_region(small_config, world, rng):
    model = _model(small_config, "v3")
    _randomize(model.rca, rng, 0.3)
    prompt = make_prompt(world, "t", "color", [("cat", "red"), ("dog", "blue")], (0.5, 0.5), 1)
    edited = make_prompt(world, "t", "color", [("cat", "red"), ("horse", "green")], (0.5, 0.5), 1)
    grid = model.surrogate.token_grid
    grid_masks = downsample_masks(prompt.hard_masks(), grid, grid).reshape(2, grid * grid)
    z_t = _noise(small_config, 6)
    z = ops.add(Tensor(z_t), model.surrogate.npnet_global(z_t, prompt.global_tokens).ada)
    updates = []
    for current in (prompt, edited):
        captured = {}

        def hook(features, current=current, captured=captured):
            captured["before"] = features.numpy()
            rewritten = model.rca(features, Tensor(current.region_tokens), grid_masks)
            captured["update"] = rewritten.numpy() - captured["before"]
            return rewritten

        with no_grad():
            model.surrogate.swin(z, hook)
        updates.append(captured)
    np.testing.assert_array_equal(updates[0]["before"], updates[1]["before"])
    outside = grid_masks[1] == 0
    assert outside.any() and (~outside).any()
    np.testing.assert_array_equal(updates[0]["update"][outside], updates[1]["update"][outside])
    assert np.any(updates[0]["update"][~outside] != updates[1]["update"][~outside])


def test_missing_soft_masks_are_blurred_along_the_split_axis(small_config, world, rng):
    model = _model(small_config, "film_only")
    _randomize(model.film, rng, 0.3)
    prompt = make_prompt(world, "t", "color", [("cat", "red"), ("dog", "blue")], (0.5, 0.5), 1)
    latent = small_config.dims.latent
    hard = masks_from_ratios(RegionLayout((0.5, 0.5), latent, latent, "vertical"))
    z_t = _noise(small_config, 7)

    def z_film(soft):
        with no_grad():
            return model.golden_rpg_forward(z_t, prompt.global_tokens, prompt.region_tokens, hard, soft,
                                            prompt.features(), force_alpha=1.0).z_film.numpy()

    inferred = z_film(None)
    np.testing.assert_array_equal(inferred, z_film(soften_masks(hard, model.sigma_b, "vertical")))
    assert not np.array_equal(inferred, z_film(hard))


def test_identity_at_init(desk_config):
    model = _model(desk_config)
    world_prompts = _prompts(desk_config, 50)
    with no_grad():
        for seed, prompt in enumerate(world_prompts):
            output = model.forward_prompt(prompt, _noise(desk_config, seed))
            assert np.max(np.abs(output.z_out.numpy() - output.z_g.numpy())) <= 1e-9
            assert output.alpha.item() == pytest.approx(0.4, abs=1e-12)


def _prompts(config, count):
    return gen_prompts(World(config.dims, config.corpus), count, 5, 1.0, prefix="a")


def test_zero_alpha_returns_the_global_path(small_config, rng):
    model = _model(small_config)
    _randomize(model.rca, rng, 0.3)
    _randomize(model.film, rng, 0.3)
    (prompt,) = _prompts(small_config, 1)
    output = model.forward_prompt(prompt, _noise(small_config, 1), force_alpha=0.0)
    np.testing.assert_array_equal(output.z_out.numpy(), output.z_swin.numpy())


def test_blend_distance_scales_with_one_minus_alpha(small_config, rng):
    model = _model(small_config)
    _randomize(model.rca, rng, 0.3)
    _randomize(model.film, rng, 0.3)
    (prompt,) = _prompts(small_config, 1)
    output = model.forward_prompt(prompt, _noise(small_config, 2), force_alpha=0.6)
    gap = np.linalg.norm(output.z_out.numpy() - output.z_film.numpy())
    assert gap == pytest.approx(0.4 * np.linalg.norm(output.z_swin.numpy() - output.z_film.numpy()), rel=1e-9)


def test_regional_edit_stays_inside_its_region(small_config, world, rng):
    model = _model(small_config)
    _randomize(model.film, rng, 0.05)
    prompt = make_prompt(world, "t", "color", [("cat", "red"), ("dog", "blue")], (0.5, 0.5), 1)
    edited = make_prompt(world, "t", "color", [("cat", "red"), ("horse", "green")], (0.5, 0.5), 1)
    z_t = _noise(small_config, 3)
    hard = prompt.hard_masks()
    outputs = []
    for current in (prompt, edited):
        # the global text stays fixed so z_g is shared
        outputs.append(model.golden_rpg_forward(z_t, prompt.global_tokens, current.region_tokens, hard, hard,
                                                prompt.features(), force_alpha=0.4))
    np.testing.assert_array_equal(outputs[0].z_g.numpy(), outputs[1].z_g.numpy())
    difference = np.abs(outputs[0].z_out.numpy() - outputs[1].z_out.numpy())
    assert np.all(difference[:, :, :8] == 0.0)
    assert np.any(difference[:, :, 8:] > 0.0)


def test_variant_blocks_and_parameter_counts(small_config):
    model = _model(small_config)
    counts = model.parameter_counts()
    assert counts["film_only"] < counts["v3"] < counts["v4"]
    hidden = small_config.adapter.confidence_hidden
    assert counts["v4"] - counts["v3"] == 7 * hidden + hidden + hidden * hidden + hidden + hidden + 1
    for variant, blocks in BLOCKS_BY_VARIANT.items():
        names = _model(small_config, variant).trainable_parameters()
        assert {name.split(".")[0] for name in names} == set(blocks)


def test_variant_without_confidence_uses_alpha_init(small_config):
    model = _model(small_config, "v3")
    (prompt,) = _prompts(small_config, 1)
    with no_grad():
        assert model.forward_prompt(prompt, _noise(small_config, 4)).alpha.item() == 0.4


def test_unknown_variant(small_config):
    with pytest.raises(ValueError):
        _model(small_config, "v5")


def test_model_gradients_through_the_full_loss(small_config, corpus, rng):
    model = _model(small_config)
    for block in ("film", "rca", "confidence"):
        _randomize(getattr(model, block), rng, 0.2)
    record = corpus.records[0]
    hard = record.prompt.hard_masks()
    params = {name: Tensor(t.numpy(), requires_grad=True) for name, t in model.trainable_parameters().items()}

    def expression(p):
        model.bind(p)
        output = model.forward_prompt(record.prompt, record.z_t)
        return total_loss(record, output, small_config.loss, corpus.stats.delta_mean, 1.0,
                          small_config.adapter.alpha_max, hard).total

    errors = gradient_check(expression, params, rng=np.random.default_rng(0), max_coordinates=3)
    assert set(errors) == set(params)
    for name, error in errors.items():
        assert error <= 1e-4, name


def test_dropout_only_in_training_mode(small_config, rng):
    model = _model(small_config, "film_only")
    _randomize(model.film, rng, 0.3)
    (prompt,) = _prompts(small_config, 1)
    z_t = _noise(small_config, 5)
    with no_grad():
        first = model.forward_prompt(prompt, z_t, np.random.default_rng(1)).z_out.numpy()
        again = model.forward_prompt(prompt, z_t, np.random.default_rng(2)).z_out.numpy()
        np.testing.assert_array_equal(first, again)
        model.train()
        dropped = model.forward_prompt(prompt, z_t, np.random.default_rng(1)).z_out.numpy()
    assert not np.array_equal(first, dropped)
