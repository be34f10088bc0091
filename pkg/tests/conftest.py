import numpy as np
import pytest
from PIL import Image


def smooth_image(h, w, seed=0):
    """Low-frequency synthetic image in [0, 1]; learnable from few patches."""
    r = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    img = 0.5 + 0.2 * np.sin(2 * np.pi * (r.uniform(1, 3) * xx + r.uniform(0, 1)))
    img += 0.2 * np.cos(2 * np.pi * (r.uniform(1, 3) * yy + r.uniform(0, 1)))
    return np.clip(img, 0, 1)


def write_png(path, img):
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(path)


@pytest.fixture
def tiny_corpus(tmp_path):
    """Three small 8-bit grayscale images."""
    root = tmp_path / "corpus"
    root.mkdir()
    for i, (h, w) in enumerate([(60, 70), (47, 47), (80, 50)]):
        write_png(root / f"img{i}.png", smooth_image(h, w, seed=i))
    return root


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE:
        terminalreporter.write_line(line)
