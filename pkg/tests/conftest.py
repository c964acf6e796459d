import os
from pathlib import Path
from typing import Any, List

import pytest

from partdiff.config import CodecConfig, TrainingConfig
from partdiff.denoiser import Denoiser
from partdiff.discrete_diffusion import DiffusionSchedule, build_schedule
from partdiff.patch_codec import PatchCodec
from .utils import EEHandler, TestUtil

try:
    from _pytest.fixtures import SubRequest
except Exception:
    SubRequest = object()

RUN_SLOW: bool = os.getenv("PARTDIFF_RUN_SLOW", "").lower() in ("1", "true")


def pytest_collection_modifyitems(config: Any, items: List[Any]) -> None:
    if RUN_SLOW:
        return
    skip_slow = pytest.mark.skip(reason="set PARTDIFF_RUN_SLOW=1 to run desk scale training")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def ee_helper(request: SubRequest):
    eeh = EEHandler()
    yield eeh
    eeh.clean_up()


@pytest.fixture
def schedule() -> DiffusionSchedule:
    """T = 4, K = 5 with the default linear cumulative kind"""
    return build_schedule(4, 5)


@pytest.fixture
def denoiser() -> Denoiser:
    return Denoiser(TestUtil.denoiser_config(), seed=11)


@pytest.fixture
def codec() -> PatchCodec:
    return TestUtil.codec()


@pytest.fixture
def tiny_codec_config() -> CodecConfig:
    return CodecConfig(
        codebook_size=4,
        latent_dim=4,
        warmup_epochs=3,
        epochs=3,
        batch_size=32,
        kmeans_iters=5,
    )


@pytest.fixture
def tiny_training_config() -> TrainingConfig:
    return TrainingConfig(batch_size=2, steps=6, steps_per_epoch=3, log_every=1)


@pytest.fixture
def run_dir(tmp_path: Path) -> Path:
    root = tmp_path / "run"
    root.mkdir()
    return root
