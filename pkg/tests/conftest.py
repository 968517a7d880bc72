import numpy as np
import pytest

from voleval.volume import BinaryMask, VoxelSpacing

PAPER_SPACING = VoxelSpacing(0.31, 0.46, 0.70)
UNIT = VoxelSpacing(1.0, 1.0, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240915)


def make_mask(arr, tissue=1, spacing=UNIT) -> BinaryMask:
    return BinaryMask(np.asarray(arr, dtype=bool), spacing, tissue)


@pytest.fixture
def mask_factory():
    return make_mask
