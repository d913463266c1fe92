"""Shared fixtures; makes ``registration`` and ``utils`` importable from scripts/."""

import os
import sys

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

SCRIPTS_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "scripts")
if SCRIPTS_DIR not in sys.path:
    sys.path.insert(0, SCRIPTS_DIR)

from registration.warp_field import Image  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def speckle(rng):
    """32×32 band-limited texture with local variance everywhere."""
    raw = gaussian_filter(rng.uniform(size=(32, 32)), sigma=1.0, mode="wrap")
    raw = (raw - raw.min()) / (raw.max() - raw.min())
    return Image(0.1 + 0.8 * raw)


@pytest.fixture
def tiny_arch():
    from registration.unet import ArchDescriptor
    return ArchDescriptor((4, 4), (4, 4))
