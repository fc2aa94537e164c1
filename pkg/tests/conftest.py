import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from patchframe.attack import AttackConfig, optimize_patch
from patchframe.detector import TrainConfig, train_toy_detector
from patchframe.synth import generate_synthetic_dataset

FAST_SCALE_FACTOR = 0.45  # acceptance-grade footprint; see decisions ledger


@pytest.fixture(scope="session")
def small_train():
    return generate_synthetic_dataset(160, seed=41)


@pytest.fixture(scope="session")
def small_test():
    return generate_synthetic_dataset(24, seed=42, split_tag="test")


@pytest.fixture(scope="session")
def toy_detector(small_train):
    """Quick-budget trained detector shared by the unit tests."""
    return train_toy_detector(small_train, TrainConfig(iters=1200, seed=9, stop_ap=0.88))


@pytest.fixture(scope="session")
def strong_patch(toy_detector, small_train):
    """A converged shared patch against the session detector."""
    cfg = AttackConfig(steps=120, seed=9, patch_scale_factor=FAST_SCALE_FACTOR)
    return optimize_patch(toy_detector, small_train, cfg)
