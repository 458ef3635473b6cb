import numpy as np
import pytest

from fusionseg.data import generate_synthetic, load_patient, sample_patches
from fusionseg.model import ArchitectureSpec
from fusionseg.optim import TrainConfig


@pytest.fixture(scope="session")
def synthetic(tmp_path_factory):
    """Four 40^3 phantoms (seed 1) on disk; returns the manifest."""
    return generate_synthetic(tmp_path_factory.mktemp("synth"), 4, (40, 40, 40), seed=1)


@pytest.fixture(scope="session")
def patients(synthetic):
    return [load_patient(r) for r in synthetic]


@pytest.fixture(scope="session")
def overfit_patches(patients):
    """Twenty tumor-balanced training patches, used as both train and test set."""
    return sample_patches(patients, 20, 0.5, np.random.default_rng(0))


def overfit_config(**kw) -> TrainConfig:
    base = dict(learning_rate=3e-3, batch_size=4, epochs=200, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def tiny_baseline() -> ArchitectureSpec:
    return ArchitectureSpec.preset("tiny")
