import numpy as np
import pytest

import vqprompt as vp


@pytest.fixture(scope="session")
def desk_benchmark():
    """Default-parameter synthetic benchmark, shared across test modules."""
    return vp.generate_benchmark(11)


@pytest.fixture(scope="session")
def frozen_backbone(desk_benchmark):
    """Short pretrain on the shared benchmark; returns (backbone, accuracy)."""
    pretrain, _ = desk_benchmark
    config = vp.BackboneConfig(prompt_blocks=(0, 1))
    return vp.pretrain_backbone(
        pretrain.train, config, epochs=4, eval_set=pretrain.test, seed=11
    )


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def make_pool(rng, size=10, length=8, dim=16):
    return vp.PromptPool.build(size, length, dim, rng)
