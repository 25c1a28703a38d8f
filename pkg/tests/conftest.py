import numpy as np
import pytest
from PIL import Image


def make_smoke_pair(size: int = 64):
    """Synthetic low/normal-light pair: smooth gradients, a texture and a coloured block.

    The low-light image is a gamma-darkened, scaled copy of the reference.
    """
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    ref = np.stack([
        0.2 + 0.6 * xx,
        0.3 + 0.4 * yy,
        0.5 + 0.2 * np.sin(6 * np.pi * xx) * np.cos(4 * np.pi * yy),
    ], axis=-1)
    ref[20:40, 10:30] = [0.9, 0.8, 0.2]
    ref = np.clip(ref, 0.0, 1.0)
    low = 0.25 * ref ** 1.2
    return low[None], ref[None]


@pytest.fixture
def smoke_pair():
    return make_smoke_pair()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_png(path, arr):
    """Write an (H, W, 3) float array in [0, 1] as an 8-bit PNG."""
    data = np.floor(np.clip(arr, 0, 1) * 255 + 0.5).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)
    return path


@pytest.fixture
def dataset_dir(tmp_path):
    """A two-pair low/high dataset of 32x32 PNGs."""
    low, ref = make_smoke_pair(32)
    for d in ("low", "high"):
        (tmp_path / d).mkdir()
    for name, shift in (("a.png", 0), ("b.png", 7)):
        write_png(tmp_path / "low" / name, np.roll(low[0], shift, axis=1))
        write_png(tmp_path / "high" / name, np.roll(ref[0], shift, axis=1))
    return tmp_path


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[key])
