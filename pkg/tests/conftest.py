import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vinet.data import generate_synthetic, load_dataset  # noqa: E402
from vinet.tensor import Tensor  # noqa: E402


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    generate_synthetic(root, n_videos=3, frames_per_video=10, height=32, width=32,
                       audio_informative=True, seed=0)
    return root


@pytest.fixture(scope="session")
def videos(synth_root):
    return load_dataset(synth_root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
