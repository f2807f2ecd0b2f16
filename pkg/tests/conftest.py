"""Shared fixtures: a tiny hand-checkable SwiGLU block and its input."""
import numpy as np
import pytest

from sparsim import MlpWeights


@pytest.fixture
def toy_weights() -> MlpWeights:
    """2-in / 3-wide / 2-out block small enough to verify by hand."""
    return MlpWeights(
        up=np.array([[1.0, 1.0], [2.0, 0.0], [0.0, 1.0]]),
        gate=np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]),
        down=np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]]),
    )


@pytest.fixture
def toy_x() -> np.ndarray:
    return np.array([1.0, -1.0])
