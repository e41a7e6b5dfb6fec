import hashlib
from pathlib import Path

import numpy as np
import pytest

from mimmu.diffusion import Architecture, DenoiserModel, NoiseSchedule, TrainConfig, checkpoint_bytes, model_from_bytes, pretrain
from mimmu.world import build_grid_world

TEACHER_RECIPE = {"init_seed": 0, "train": TrainConfig()}


@pytest.fixture(scope="session")
def world():
    return build_grid_world()


@pytest.fixture(scope="session")
def tiny_arch(world):
    return Architecture.for_world(world, hidden=(16, 16), time_dim=8, emb_dim=4)


@pytest.fixture(scope="session")
def tiny_model(tiny_arch):
    return DenoiserModel.init(tiny_arch, NoiseSchedule(T=50), seed=3)


@pytest.fixture(scope="session")
def small_teacher(world):
    """A briefly trained small model: enough structure for protocol plumbing tests."""
    arch = Architecture.for_world(world, hidden=(32, 32), time_dim=8, emb_dim=4)
    model = DenoiserModel.init(arch, NoiseSchedule(T=50), seed=0)
    model, _ = pretrain(model, world, None, TrainConfig(epochs=3, steps_per_epoch=40, batch_size=128))
    return model


@pytest.fixture(scope="session")
def teacher(world, request):
    """Default-architecture teacher, trained once and cached across sessions by recipe digest."""
    recipe = repr((world.to_json(), TEACHER_RECIPE))
    key = hashlib.sha256(recipe.encode()).hexdigest()[:16]
    path = Path(request.config.cache.mkdir("mimmu-teacher")) / f"teacher-{key}.ckpt"
    if path.exists():
        return model_from_bytes(path.read_bytes())[0]
    model = DenoiserModel.init(Architecture.for_world(world), NoiseSchedule(), seed=TEACHER_RECIPE["init_seed"])
    model, _ = pretrain(model, world, None, TEACHER_RECIPE["train"])
    path.write_bytes(checkpoint_bytes(model))
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
