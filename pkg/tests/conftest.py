import os
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
os.environ.setdefault("GATEON_DATA", str(ROOT / "data" / "mnist"))


@pytest.fixture(scope="session")
def mnist():
    from gateon.tasks import load_mnist

    return load_mnist("train"), load_mnist("test")


@pytest.fixture(scope="session")
def mnist_small(mnist):
    """A 2000/500 slice for quick end-to-end runs."""
    train, test = mnist
    return train.subset(np.arange(2000)), test.subset(np.arange(500))
