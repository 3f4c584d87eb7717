import numpy as np
import pytest

from plm.synthetic import SquareScene, render_sequence, training_scenes, write_dataset, write_sequence


@pytest.fixture(scope="session")
def fixture_root(tmp_path_factory):
    """Two short synthetic sequences in DAVIS layout."""
    root = tmp_path_factory.mktemp("fixture")
    write_dataset(root, training_scenes(2, n_frames=8), seed=11)
    return root


@pytest.fixture(scope="session")
def square(tmp_path_factory):
    """The 20-frame moving-square test sequence: (root, frames, masks)."""
    root = tmp_path_factory.mktemp("square")
    frames, masks = render_sequence(SquareScene(), seed=0)
    write_sequence(root, "square", frames, masks)
    return root, frames, masks


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
