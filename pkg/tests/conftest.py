import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from synth import bigram_cycle_lines, write_lines


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)


@pytest.fixture()
def cycle_corpus(tmp_path):
    """Path to a deterministic bigram-cycle corpus file."""
    return write_lines(tmp_path / "cycle.txt", bigram_cycle_lines())


@pytest.fixture()
def tiny_corpus(tmp_path):
    lines = [
        "the cat sat on the mat",
        "the dog sat on the rug",
        "a cat saw the dog",
        "the dog saw a cat",
    ]
    return write_lines(tmp_path / "tiny.txt", lines)
