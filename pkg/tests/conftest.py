import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

# standard test photographs bundled with scikit-image (no download needed)
NATURAL = [
    "astronaut",
    "camera",
    "coffee",
    "chelsea",
    "rocket",
    "hubble_deep_field",
    "immunohistochemistry",
    "moon",
    "coins",
    "clock",
]


def natural_batch(n=10, size=32):
    from PIL import Image
    from skimage import data

    from deend.data import center_crop_resize

    out = []
    for name in NATURAL[:n]:
        pil = Image.fromarray(getattr(data, name)()).convert("RGB")
        arr = np.asarray(center_crop_resize(pil, size, size), dtype=np.float32) / 255.0
        out.append(torch.from_numpy(arr.transpose(2, 0, 1).copy()))
    return torch.stack(out)


@pytest.fixture(scope="session")
def natural_images():
    return natural_batch(10, 64)


# --- tiny training setup shared by the CLI and acceptance tests ---

ACCEPTANCE_LINES = []


def record_result(number, name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2} {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tiny_config():
    from deend.config import TrainConfig

    return TrainConfig(H=32, W=32, L=16, epochs=300, batch_size=8, fixed_messages=True)


@pytest.fixture(scope="session")
def tiny_images():
    return natural_batch(8, 32)


@pytest.fixture(scope="session")
def tiny_image_dir(tmp_path_factory, tiny_images):
    from deend.data import save_png

    d = tmp_path_factory.mktemp("tiny_images")
    for i, (name, img) in enumerate(zip(NATURAL, tiny_images)):
        save_png(img, d / f"{i:02d}_{name}.png")
    return d


class TinyRuns:
    """Trains each (variant, noise, seed) of the tiny setup at most once per session."""

    def __init__(self, images, root):
        self.images, self.root, self.cache, self.seconds = images, root, {}, {}

    def get(self, variant="deend", noise=None, seed=0):
        """``(checkpoint, history, bundle, out_dir)`` of one training run."""
        import json

        from deend.config import NoiseSpec
        from deend.training import train

        noise = noise or NoiseSpec()
        key = (variant, json.dumps(noise.to_dict(), sort_keys=True), seed)
        if key not in self.cache:
            cfg = tiny_config().replace(variant=variant, noise=noise, seed=seed)
            out = self.root / f"{variant}_{noise.kind}_{seed}"
            start = time.perf_counter()
            self.cache[key] = (*train(cfg, self.images, out_dir=out), out)
            self.seconds[key] = time.perf_counter() - start
        self.last_seconds = self.seconds[key]
        return self.cache[key]


@pytest.fixture(scope="session")
def tiny_runs(tmp_path_factory, tiny_images):
    return TinyRuns(tiny_images, tmp_path_factory.mktemp("tiny_runs"))
