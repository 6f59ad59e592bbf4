import numpy as np
import pytest

from oneshotbench.annotations import BoundingBox, CategoryRecord, Dataset, ImageRecord, InstanceAnnotation
from oneshotbench.synthworld import SceneConfig, generate_dataset


def make_dataset(boxes, n_images=None, n_categories=None, size=(100, 100), pixels=False):
    """Dataset from (image_id, category_id, x, y, w, h[, crowd]) rows."""
    n_images = n_images or max(b[0] for b in boxes)
    n_categories = n_categories or max(b[1] for b in boxes)
    h, w = size
    rng = np.random.default_rng(0)
    images = [
        ImageRecord(i, w, h, f"{i}.pgm", rng.random((h, w)) if pixels else None) for i in range(1, n_images + 1)
    ]
    anns = [
        InstanceAnnotation(k + 1, b[0], b[1], BoundingBox(*b[2:6]), bool(b[6]) if len(b) > 6 else False)
        for k, b in enumerate(boxes)
    ]
    cats = [CategoryRecord(c, f"c{c}") for c in range(1, n_categories + 1)]
    return Dataset(images, anns, cats)


@pytest.fixture(scope="session")
def small_scene_cfg():
    return SceneConfig(canvas=(64, 64), n_categories=8, instances_per_image=4.0, categories_per_image=2.0, glyph_size=16.0, seed=3)


@pytest.fixture(scope="session")
def small_synth(small_scene_cfg):
    return generate_dataset(small_scene_cfg, 24)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion and print it."""

    def record(number: int, ok, detail: str):
        verdict = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        line = f"criterion {number:>2}: {verdict}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
