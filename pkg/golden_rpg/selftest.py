"""
Golden RPG - region-aware golden noise prediction at desk scale.
Licensed under GNU GPL-3.0-or-later.

In-process invariant checks run by `golden-rpg selftest`. Each check raises
AssertionError (or a GoldenRPGError) on failure; the runner collects them and
never stops at the first one.
"""

import logging
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from . import ops
from .adapter import ConfidenceHead, GoldenRPGModel, film_apply
from .config import LossConfig, RunConfig, load_config
from .errors import CheckpointError, GoldenRPGError
from .geometry import RegionLayout, boundary_bands, build_masks, masks_from_ratios, normalize_ratios
from .gradcheck import gradient_check
from .losses import alpha_target, diversity_loss, lambda_alpha_schedule, rank_margin
from .metrics import BasisProvider, attribute_binding, crc, mocq, rsa
from .persistence import checkpoint_from_model, load_checkpoint, save_checkpoint
from .scenes import scene_from_layout
from .synthetic import CorpusStats, World, gen_prompts
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    seconds: float
    message: str = ""


@dataclass
class SelftestReport:
    results: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(result.passed for result in self.results)

    def summary(self) -> str:
        lines = [f"{'ok' if r.passed else 'FAIL':4} {r.name:24} {r.seconds:6.2f}s {r.message}".rstrip()
                 for r in self.results]
        failed = sum(not r.passed for r in self.results)
        lines.append(f"{len(self.results) - failed} passed, {failed} failed")
        return "\n".join(lines)


def _checkIdentityAtInit(config: RunConfig):
    world = World(config.dims, config.corpus)
    model = GoldenRPGModel(config.adapter, config.surrogate, config.dims, "v4")
    with no_grad():
        for index, prompt in enumerate(gen_prompts(world, 3, 5, 1.0, prefix="s")):
            z_t = np.random.default_rng([index, 17]).standard_normal(
                (config.dims.channels, config.dims.latent, config.dims.latent))
            output = model.forward_prompt(prompt, z_t)
            drift = float(np.max(np.abs(output.z_out.data - output.z_g.data)))
            assert drift <= 1e-9, f"fresh adapter moved z_g by {drift:.3g}"
            assert abs(output.alpha.item() - 0.4) <= 1e-12, f"initial alpha {output.alpha.item()}"


def _checkGradients(config: RunConfig):
    rng = np.random.default_rng(3)
    hard = masks_from_ratios(RegionLayout((0.5, 0.5), 4, 4))
    soft = build_masks(RegionLayout((0.5, 0.5), 4, 4), 1.0).soft
    z_g = Tensor(rng.standard_normal((2, 4, 4)))
    params = {"gamma": Tensor(1.0 + 0.1 * rng.standard_normal((2, 2)), requires_grad=True),
              "beta": Tensor(0.1 * rng.standard_normal((2, 2)), requires_grad=True),
              "z": Tensor(rng.standard_normal((2, 4, 4)), requires_grad=True)}

    def film(p: Dict[str, Tensor]) -> Tensor:
        z_film = film_apply(z_g, p["gamma"], p["beta"], soft)
        return ops.add(ops.sum_squares(z_film), ops.mul(diversity_loss(ops.add(z_film, p["z"]), hard), 3.0))

    head = ConfidenceHead(config.adapter, rng)
    head_params = {name: Tensor(rng.standard_normal(t.shape) * 0.5, requires_grad=True)
                   for name, t in head.named_parameters().items()}
    features = Tensor(rng.standard_normal(7))

    def confidence(p: Dict[str, Tensor]) -> Tensor:
        head.bind(p)
        return head.confidence_alpha(features)

    for name, expression, values in (("film", film, params), ("confidence", confidence, head_params)):
        for parameter, error in gradient_check(expression, values).items():
            assert error <= 1e-4, f"{name} {parameter}: relative error {error:.3g}"


def _checkLosses(config: RunConfig):
    weights = LossConfig()
    assert math.isclose(rank_margin(0.02, 0.02, weights), 0.05, abs_tol=1e-15)
    assert math.isclose(rank_margin(0.2, 0.02, weights), 0.15, abs_tol=1e-15)
    assert math.isclose(alpha_target(0.0, 0.6, 0.05), 0.30, abs_tol=1e-15)
    assert abs(alpha_target(0.05, 0.6, 0.05) - 0.6 / (1.0 + math.exp(-1.0))) <= 1e-12
    assert lambda_alpha_schedule(0, 200) == 1.0 and lambda_alpha_schedule(59, 200) == 1.0
    assert math.isclose(lambda_alpha_schedule(130, 200), 69 / 139, abs_tol=1e-12)
    assert lambda_alpha_schedule(199, 200) == 0.0 and lambda_alpha_schedule(1, 2) == 0.0
    z = np.zeros((4, 4, 4))
    z[0, :, :2] = 1.0
    hard = masks_from_ratios(RegionLayout((0.5, 0.5), 4, 4))
    assert math.isclose(diversity_loss(Tensor(z), hard).item(), -1.0, abs_tol=1e-12)
    for name, value in (("m0", 0.05), ("tau_alpha", 0.05), ("lambda_r", 0.5), ("lambda_alpha", 1.0)):
        assert getattr(config.loss, name) == value, f"loss.{name} is {getattr(config.loss, name)}"
    assert config.adapter.alpha_max == 0.6 and config.train.warmup_epochs == 60


def _checkGeometry(config: RunConfig):
    rng = np.random.default_rng(11)
    for _ in range(50):
        count = int(rng.integers(1, 9))
        layout = RegionLayout(normalize_ratios(rng.dirichlet(np.ones(count)), 0.1), 16, 32)
        masks = build_masks(layout, float(rng.uniform(0.0, 3.0)))
        assert np.all(masks.hard.sum(axis=0) == 1.0), "hard masks do not partition the canvas"
        assert np.max(np.abs(masks.soft.sum(axis=0) - 1.0)) <= 1e-6, "soft masks are not a partition of unity"
    hard = masks_from_ratios(RegionLayout((0.5, 0.5), 128, 128))
    (pair,) = boundary_bands(hard, 32)
    assert pair.left_span == (32, 64) and pair.right_span == (64, 96), f"bands {pair.left_span} {pair.right_span}"


def _checkMetrics(config: RunConfig):
    regions = [("cat", "red"), ("dog", "blue")]
    layout = RegionLayout((0.5, 0.5), 4, 4)
    provider = BasisProvider(regions)
    aligned = scene_from_layout(regions, np.repeat([[0, 0, 1, 1]], 4, axis=0))
    swapped = scene_from_layout(regions, np.repeat([[1, 1, 0, 0]], 4, axis=0))
    uniform = scene_from_layout(regions, np.zeros((4, 4), dtype=int))
    assert math.isclose(rsa(aligned, layout, regions, provider), 1.0, abs_tol=1e-12)
    assert math.isclose(mocq(aligned, layout, regions, provider), 1.0, abs_tol=1e-12)
    assert math.isclose(mocq(swapped, layout, regions, provider), -1.0, abs_tol=1e-12)
    assert math.isclose(crc(uniform, layout, provider, 1), 1.0, abs_tol=1e-12)
    assert attribute_binding(aligned, regions, provider) == 1


def _checkPersistence(config: RunConfig):
    model = GoldenRPGModel(config.adapter, config.surrogate, config.dims, "v4")
    checkpoint = checkpoint_from_model(model, config, 0, CorpusStats(0.01, 1))
    with tempfile.TemporaryDirectory() as folder:
        path = os.path.join(folder, "selftest.ckpt")
        save_checkpoint(checkpoint, path)
        loaded = load_checkpoint(path)
        for section in ("frozen", "trainable"):
            expected, found = getattr(checkpoint, section), getattr(loaded, section)
            assert sorted(expected) == sorted(found), f"{section} names differ"
            for name, array in expected.items():
                assert found[name].dtype == array.dtype and np.array_equal(found[name], array), name
        with open(path, "rb") as file:
            payload = file.read()
        with open(path, "wb") as file:
            file.write(payload[:-5])
        try:
            load_checkpoint(path)
        except CheckpointError as error:
            assert "confidence." in str(error) or "rca." in str(error) or "film." in str(error), str(error)
        else:
            raise AssertionError("truncated checkpoint was accepted")


CHECKS: Dict[str, Callable[[RunConfig], None]] = {
    "identity-at-init": _checkIdentityAtInit,
    "gradients": _checkGradients,
    "loss-values": _checkLosses,
    "geometry": _checkGeometry,
    "metric-anchors": _checkMetrics,
    "checkpoint-roundtrip": _checkPersistence,
}


def run_selftest(config: Optional[RunConfig] = None) -> SelftestReport:
    config = config or load_config(use_environment=False)
    report = SelftestReport()
    for name, check in CHECKS.items():
        start = time.perf_counter()
        try:
            check(config)
            result = CheckResult(name, True, time.perf_counter() - start)
        except (AssertionError, GoldenRPGError, ValueError) as error:
            result = CheckResult(name, False, time.perf_counter() - start, f"{type(error).__name__}: {error}")
            logger.error("Selftest %s failed: %s", name, result.message)
        logger.debug("Selftest %s finished in %.2fs", name, result.seconds)
        report.results.append(result)
    return report
