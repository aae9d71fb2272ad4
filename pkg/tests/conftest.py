import numpy as np
import pytest
from PIL import Image

from dfdlab.data import build_index, fraction_split


def write_noise_image(path, rng, mean, size=(48, 48)):
    arr = np.clip(
        rng.normal(mean, 25.0, size=(size[1], size[0], 3)), 0, 255
    ).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def make_corpus(root, n_real=40, n_fake=40, seed=1234, real_mean=190.0, fake_mean=70.0):
    """Brightness-separable toy corpus: bright noise = real, dark noise = fake."""
    rng = np.random.default_rng(seed)
    (root / "real").mkdir(parents=True)
    (root / "fake").mkdir(parents=True)
    for i in range(n_real):
        size = (56, 40) if i % 7 == 0 else (48, 48)  # a few non-square sources
        write_noise_image(root / "real" / f"r{i:03d}.png", rng, real_mean, size)
    for i in range(n_fake):
        size = (40, 56) if i % 7 == 0 else (48, 48)
        write_noise_image(root / "fake" / f"f{i:03d}.png", rng, fake_mean, size)
    return root


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    return make_corpus(tmp_path_factory.mktemp("corpus"))


@pytest.fixture(scope="session")
def toy_index(toy_corpus):
    index, _ = build_index([toy_corpus], fraction_split(0.7, 0.15, 0.15, seed=5))
    counts = index.counts()
    for split in ("train", "val", "test"):
        for label in (0, 1):
            assert counts.get((split, label), 0) > 0, (
                f"fixture split seed leaves {split}/{label} empty; pick a new seed"
            )
    return index
