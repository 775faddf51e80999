import pytest

from aerialsynth.geometry import Annotation, BBox, Detection

_ACCEPTANCE_LINES = []


def record_criterion(name: str, passed: bool, detail: str = "") -> None:
    _ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] {name}" + (f" -- {detail}" if detail else ""))


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_box(rng, width, height, min_size=2.0, max_size=60.0) -> BBox:
    w = float(rng.uniform(min_size, min(max_size, width)))
    h = float(rng.uniform(min_size, min(max_size, height)))
    return BBox(float(rng.uniform(0, width - w)), float(rng.uniform(0, height - h)), w, h)


def random_layout(rng, n, size=(256, 256), classes=(1, 2, 3), image_id=1):
    return [
        Annotation(image_id, random_box(rng, *size, max_size=48.0), int(rng.choice(classes)))
        for _ in range(n)
    ]


def copy_detections(layout, score=1.0):
    return [Detection(a.image_id, a.bbox, a.category_id, score) for a in layout]
