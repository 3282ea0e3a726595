from pathlib import Path

import numpy as np
import pytest

from anchorattack.containers import write_snapshot
from anchorattack.encoder import EncoderConfig, init_encoder

from vebridge.models import load_model

GOLDEN_DIR = Path(__file__).parent / "golden"

TOY_CONFIG = EncoderConfig(
    image_height=8,
    image_width=8,
    channels=3,
    patch_size=4,
    depth=2,
    heads=2,
    token_dim=16,
    seed=7,
)

FIXTURE_CONFIG = EncoderConfig(seed=26)  # the primary's fixture encoder


@pytest.fixture(scope="session")
def toy_snapshot(tmp_path_factory):
    path = tmp_path_factory.mktemp("snap") / "toy.aenc"
    write_snapshot(path, init_encoder(TOY_CONFIG))
    return path


@pytest.fixture(scope="session")
def fixture_snapshot(tmp_path_factory):
    path = tmp_path_factory.mktemp("snap") / "micro.aenc"
    write_snapshot(path, init_encoder(FIXTURE_CONFIG))
    return path


@pytest.fixture(scope="session")
def toy_model(toy_snapshot):
    return load_model(f"micro:{toy_snapshot}")


@pytest.fixture(scope="session")
def micro_model(fixture_snapshot):
    return load_model(f"micro:{fixture_snapshot}")


@pytest.fixture(scope="session")
def vit_model():
    return load_model("vit_test")


@pytest.fixture()
def rng():
    return np.random.default_rng(99)
