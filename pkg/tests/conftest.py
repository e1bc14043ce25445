import random
import sys

import pytest

from mvpipe.core import ImageSpec, SampleRecord


def random_manifest(rng: random.Random, n: int, *, image_prob: float = 0.3, max_text: int = 3000, max_side: int = 900, datasets=("a", "b", "c")):
    """Samples whose visual tokens stay well below the default caps."""
    out = []
    counters = {d: 0 for d in datasets}
    for _ in range(n):
        ds = rng.choice(datasets)
        images = ()
        if rng.random() < image_prob:
            images = tuple(_image(rng, max_side) for _ in range(rng.randint(1, 2)))
        out.append(SampleRecord(ds, counters[ds], rng.randint(1, max_text), images))
        counters[ds] += 1
    return out


def _image(rng: random.Random, max_side: int) -> ImageSpec:
    # aspect ratio within 3:1 so every image resizes under the default windows
    w = rng.randint(20, max_side)
    h = rng.randint(max(1, -(-w // 3)), min(max_side, 3 * w))
    return ImageSpec(w, h) if rng.random() < 0.5 else ImageSpec(h, w)


def text_samples(lengths, dataset="d"):
    return [SampleRecord(dataset, i, n) for i, n in enumerate(lengths)]


@pytest.fixture
def rng():
    return random.Random(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(mod.LINES):
        terminalreporter.write_line(mod.LINES[number])
    passed = sum(v == "PASS" for v in mod.RESULTS.values())
    terminalreporter.write_line(f"{passed}/{len(mod.RESULTS)} acceptance criteria passed")
