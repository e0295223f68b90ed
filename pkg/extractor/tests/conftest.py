import numpy as np
import pytest
from PIL import Image


def synth_images(folder, count, seed=0, size_jitter=True):
    """Deterministic folder of varied PNGs: colored shapes over noise."""
    rng = np.random.default_rng(seed)
    folder.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        w = int(rng.integers(200, 420)) if size_jitter else 256
        h = int(rng.integers(180, 360)) if size_jitter else 256
        arr = rng.integers(0, 60, size=(h, w, 3), dtype=np.uint8)
        for _ in range(int(rng.integers(2, 7))):
            x0, y0 = int(rng.integers(0, w - 20)), int(rng.integers(0, h - 20))
            x1 = x0 + int(rng.integers(10, max(11, w - x0)))
            y1 = y0 + int(rng.integers(10, max(11, h - y0)))
            color = rng.integers(0, 256, size=3)
            arr[y0:y1, x0:x1] = color
        Image.fromarray(arr).save(folder / f"img_{i:03d}.png")
    return folder


@pytest.fixture(scope="session")
def folder20(tmp_path_factory):
    return synth_images(tmp_path_factory.mktemp("imgs20") / "imgs", 20, seed=1)


@pytest.fixture(scope="session")
def folder100(tmp_path_factory):
    return synth_images(tmp_path_factory.mktemp("imgs100") / "imgs", 100, seed=2)
