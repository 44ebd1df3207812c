import logging

import numpy as np
import pytest

from golden_rpg.adapter import GoldenRPGModel
from golden_rpg.evaluation import (
    NoiseMethods,
    benchmark_prompts,
    mean_oracle_score,
    run_evaluation,
    seed_noise,
)
from golden_rpg.surrogate import SurrogateNPNet
from golden_rpg.synthetic import gen_corpus, gen_prompts
from golden_rpg.training import train


@pytest.fixture(scope="module")
def surrogate(small_config):
    return SurrogateNPNet(small_config.surrogate, small_config.dims)


@pytest.fixture(scope="module")
def prompts(world, small_config):
    return benchmark_prompts(world, small_config)


def test_seed_noise_is_reproducible(small_config):
    first = seed_noise(small_config, 2, 1)
    assert first.shape == (4, 16, 16)
    np.testing.assert_array_equal(first, seed_noise(small_config, 2, 1))
    assert not np.array_equal(first, seed_noise(small_config, 2, 0))
    assert not np.array_equal(first, seed_noise(small_config, 1, 1))


def test_benchmark_prompts_are_stable(world, small_config, prompts):
    assert len(prompts) == 3
    again = benchmark_prompts(world, small_config)
    assert [p.prompt_id for p in again] == [p.prompt_id for p in prompts]
    np.testing.assert_array_equal(again[0].global_tokens, prompts[0].global_tokens)


def test_baseline_methods(surrogate, prompts, small_config):
    methods = NoiseMethods(surrogate)
    z_t = seed_noise(small_config, 0, 0)
    np.testing.assert_array_equal(methods.noise("random", prompts[0], z_t), z_t)
    golden = methods.noise("golden", prompts[0], z_t)
    np.testing.assert_allclose(golden, surrogate.npnet_global(z_t, prompts[0].global_tokens).z_g.numpy())
    weighted = methods.noise("weighted", prompts[0], z_t)
    assert weighted.shape == z_t.shape and np.all(np.isfinite(weighted))
    assert methods.available("weighted") and not methods.available("v4")
    with pytest.raises(KeyError):
        methods.noise("v4", prompts[0], z_t)


def test_fresh_adapter_reproduces_the_golden_noise(surrogate, prompts, small_config):
    model = GoldenRPGModel(small_config.adapter, small_config.surrogate, small_config.dims, "v4")
    methods = NoiseMethods(surrogate, {"v4": model})
    z_t = seed_noise(small_config, 1, 0)
    np.testing.assert_allclose(methods.noise("v4", prompts[1], z_t), methods.noise("golden", prompts[1], z_t),
                               atol=1e-9)


def test_run_evaluation_marks_unloaded_methods(world, small_config, surrogate, caplog):
    with caplog.at_level(logging.WARNING, logger="golden_rpg.evaluation"):
        report, scenes = run_evaluation(world, small_config, NoiseMethods(surrogate), ["random", "v4"], workers=1)
    assert len(scenes) == 3 * 2 * 2
    assert len(report.rows) == 12
    assert not report.complete
    assert "no checkpoint loaded" in caplog.text
    for row in report.rows:
        assert row.missing == (row.method == "v4")
    overall = report.aggregates(by_category=False)
    assert overall["method"].tolist() == ["random"]
    assert overall["rsa_count"].tolist() == [6]


def test_run_evaluation_is_deterministic(world, small_config, surrogate):
    first, _ = run_evaluation(world, small_config, NoiseMethods(surrogate), ["random", "golden"], workers=1)
    second, _ = run_evaluation(world, small_config, NoiseMethods(surrogate), ["random", "golden"], workers=1)
    assert first.complete
    assert first.to_frame().equals(second.to_frame())


def test_mean_oracle_score(world, small_config, surrogate, prompts):
    methods = NoiseMethods(surrogate)
    score = mean_oracle_score(methods, "random", prompts, world, small_config)
    assert np.isfinite(score)
    assert score == mean_oracle_score(methods, "random", prompts, world, small_config)


@pytest.mark.slow
def test_each_block_raises_the_held_out_oracle_score(world, small_config):
    scores = {"golden": [], "v3": [], "v4": []}
    for seed in range(3):
        corpus = gen_corpus(world, size=64, seed=100 + seed, workers=1)
        models = {}
        for variant in ("v3", "v4"):
            config = small_config.replace(**{"train.variant": variant, "train.epochs": 80, "train.seed": seed})
            models[variant] = train(config, corpus).model
        methods = NoiseMethods(models["v4"].surrogate, models)
        held_out = gen_prompts(world, 10, 500 + seed, 1.0, prefix="h")
        for method in scores:
            scores[method].append(mean_oracle_score(methods, method, held_out, world, small_config))
    means = {method: np.mean(values) for method, values in scores.items()}
    assert means["v4"] > means["v3"] > means["golden"]
