import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from uva.body_model import BodySpec, build_default_body
from uva.config import ModelConfig, TrainConfig

torch.set_num_threads(1)

settings.register_profile(
    "uva", max_examples=30, deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("uva")

# compact networks used wherever a test trains or renders many images
SMALL = ModelConfig(
    delta_width=32, density_width=64, color_width=64, color_depth=4, color_skip=2, feature_dim=32, shading_width=32
)
TINY = ModelConfig(
    code_dim=8, delta_width=16, density_width=16, color_width=16, color_depth=3, color_skip=2, feature_dim=8,
    shading_width=8, shading_depth=2, delta_depth=2, density_depth=2,
)


@pytest.fixture(scope="session")
def body():
    return build_default_body(BodySpec())


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)


# schedule of the shared trained avatar; 3x the default rate, the largest that reliably
# keeps density alive, so a recognisable silhouette forms within the step budget
TRAINED_CONFIG = TrainConfig(total_iterations=600, batch_rays=256, samples_per_ray=32, eval_every=0, seed=0,
                             lr_start=1.5e-3, lr_end=1.5e-5)


# PASS/FAIL lines from the acceptance module, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def full_benchmark_enabled() -> bool:
    return os.environ.get("UVA_FULL_BENCHMARK") == "1"


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Five poses, four training cameras plus one held-out camera, 48x48 pixels."""
    from uva.synth_data import SceneSpec, generate_dataset

    return generate_dataset(SceneSpec(resolution=48, n_poses=5, texture_size=64), tmp_path_factory.mktemp("ds48"))


@pytest.fixture(scope="session")
def trained(small_dataset):
    """A SMALL avatar fitted for a few hundred steps; shared by render, edit and CLI tests."""
    from uva.trainer import fit

    return fit(small_dataset, TRAINED_CONFIG, SMALL).model
