import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bpmri_lesion.masks import BinaryMask2D  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def ellipse_blob(h: int, w: int, rng: np.random.Generator, min_area: int = 100,
                 inscribed: bool = False) -> BinaryMask2D:
    """Random ellipse fully inside the grid with at least ``min_area`` pixels.

    With ``inscribed`` the ellipse also lies inside the disc inscribed in the
    grid, so any rotation about the centre keeps it in view.
    """
    yy, xx = np.mgrid[0:h, 0:w]
    disc = (yy - (h - 1) / 2.0) ** 2 + (xx - (w - 1) / 2.0) ** 2 <= ((min(h, w) - 1) / 2.0) ** 2
    while True:
        ry = rng.uniform(5, h / 4)
        rx = rng.uniform(5, w / 4)
        cy = rng.uniform(ry + 1, h - ry - 2)
        cx = rng.uniform(rx + 1, w - rx - 2)
        ang = rng.uniform(0, np.pi)
        u = (xx - cx) * np.cos(ang) + (yy - cy) * np.sin(ang)
        v = -(xx - cx) * np.sin(ang) + (yy - cy) * np.cos(ang)
        m = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
        if inscribed and np.any(m & ~disc):
            continue
        if m.sum() >= min_area:
            return BinaryMask2D(m)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def acceptance():
    def record(number: int, name: str, passed: bool, detail: str = ""):
        ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {name} {detail}".rstrip())
        print(ACCEPTANCE_LINES[-1])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
