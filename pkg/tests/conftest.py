import numpy as np
import pytest
from hypothesis import settings

from mixpl.boxes import BBox

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_box(rng, w=640, h=480, min_side=2.0):
    x1 = rng.uniform(0, w - min_side)
    y1 = rng.uniform(0, h - min_side)
    x2 = rng.uniform(x1 + min_side, w)
    y2 = rng.uniform(y1 + min_side, h)
    return BBox(x1, y1, x2, y2)


# acceptance criteria report, filled by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, secs = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title} ({secs:.1f}s)")
