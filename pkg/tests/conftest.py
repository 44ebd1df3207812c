"""
Golden RPG - region-aware golden noise prediction at desk scale.
Licensed under GNU GPL-3.0-or-later.

Shared fixtures. Most suites run on a 16x16 latent so a full forward pass stays
in the millisecond range; the desk configuration itself is loaded where a test
pins its defaults.
"""

import numpy as np
import pytest

from golden_rpg.config import RunConfig, load_config
from golden_rpg.synthetic import Corpus, World, gen_corpus
from golden_rpg.tensor import set_checked, set_precision

SMALL = {
    "dims.latent": 16,
    "corpus.size": 12,
    "train.epochs": 2,
    "eval.prompts": 3,
    "eval.seeds": 2,
}


@pytest.fixture(autouse=True)
def runtime(monkeypatch: pytest.MonkeyPatch):
    monkeypatch.setenv("GRPG_DETERMINISTIC", "1")
    monkeypatch.delenv("GRPG_CONFIG", raising=False)
    set_precision("float64")
    set_checked(True)
    yield
    set_precision("float64")
    set_checked(True)


@pytest.fixture(scope="session")
def desk_config() -> RunConfig:
    return load_config(use_environment=False)


@pytest.fixture(scope="session")
def small_config(desk_config: RunConfig) -> RunConfig:
    return desk_config.replace(**SMALL)


@pytest.fixture(scope="session")
def world(small_config: RunConfig) -> World:
    return World(small_config.dims, small_config.corpus)


@pytest.fixture(scope="session")
def corpus(world: World) -> Corpus:
    return gen_corpus(world, size=12, workers=1)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
