import numpy as np
import pytest
from hypothesis import settings as hypothesis_settings
from typer.testing import CliRunner

from app.core.group import GroupSpec

hypothesis_settings.register_profile("default", max_examples=50, deadline=None)
hypothesis_settings.load_profile("default")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def p4() -> GroupSpec:
    return GroupSpec.rot(4)


@pytest.fixture
def p4m() -> GroupSpec:
    return GroupSpec.rot_mirror(4)


@pytest.fixture(params=["p4", "p4m"])
def rotation_group(request) -> GroupSpec:
    return GroupSpec.from_name(request.param)


@pytest.fixture
def runner() -> CliRunner:
    return CliRunner()


@pytest.fixture
def small_env() -> dict[str, str]:
    """Settings that keep command-line runs to a few seconds."""
    return {
        "COATTN_N_TRAIN": "32",
        "COATTN_N_VALID": "16",
        "COATTN_N_TEST": "16",
        "COATTN_CHANNELS": "2",
        "COATTN_BATCH": "8",
        "COATTN_ATTENTION_TRIALS": "400",
        "COATTN_LAYER_TRIALS": "4",
        "COATTN_NETWORK_TRIALS": "4",
        "COATTN_SYNCHRONY_IMAGES": "3",
    }
