import os
from pathlib import Path

import pytest

from neurogrow.datasets import MNIST_FILES


def mnist_dir() -> Path | None:
    """Directory holding the four canonical MNIST files (raw or .gz), from
    NEUROGROW_DATA_DIR or ./data; None when unavailable."""
    candidates = []
    env = os.environ.get("NEUROGROW_DATA_DIR")
    if env:
        candidates.append(Path(env))
    candidates.append(Path(__file__).resolve().parent.parent / "data")
    for cand in candidates:
        names = [n for pair in MNIST_FILES.values() for n in pair]
        if all((cand / n).exists() or (cand / (n + ".gz")).exists()
               for n in names):
            return cand
    return None


MNIST_DIR = mnist_dir()

requires_mnist = pytest.mark.skipif(
    MNIST_DIR is None,
    reason="MNIST IDX files not found (set NEUROGROW_DATA_DIR or place the "
           "four canonical files under ./data; scripts/fetch_mnist.py "
           "downloads them)")


@pytest.fixture(scope="session")
def mnist_data():
    from neurogrow.datasets import load_mnist_dir
    if MNIST_DIR is None:
        pytest.skip("MNIST data unavailable")
    return load_mnist_dir(MNIST_DIR)
