from __future__ import annotations

import numpy as np
import pytest
from hypothesis import strategies as st

from detfuse.core import BBox, CategoryTable, GroundTruthBox, ScoredDetection
from detfuse.formats import Dataset, ImageInfo

coord = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False, allow_infinity=False)
extent = st.floats(min_value=0.0, max_value=500.0, allow_nan=False, allow_infinity=False)


@st.composite
def boxes(draw, min_extent: float = 0.0):
    x, y = draw(coord), draw(coord)
    w = draw(st.floats(min_value=min_extent, max_value=500.0, allow_nan=False))
    h = draw(st.floats(min_value=min_extent, max_value=500.0, allow_nan=False))
    return BBox(x, y, x + w, y + h)


def random_box(rng: np.random.Generator, span: float = 20.0, max_size: float = 12.0) -> BBox:
    x, y = rng.uniform(0, span, 2)
    w, h = rng.uniform(0.5, max_size, 2)
    return BBox(float(x), float(y), float(x + w), float(y + h))


def random_detections(rng: np.random.Generator, n: int, categories: int = 3, image: int = 0) -> list[ScoredDetection]:
    return [
        ScoredDetection(
            random_box(rng),
            float(rng.uniform(0.01, 1.0)),
            int(rng.integers(categories)),
            int(rng.integers(3)),
            image,
        )
        for _ in range(n)
    ]


@pytest.fixture
def toy_scene():
    """Three 64x48 noise images with a handful of small annotated objects."""
    rng = np.random.default_rng(7)
    table = CategoryTable.from_names(["car", "van"])
    images, rasters, gts = [], {}, []
    for iid in (1, 2, 3):
        images.append(ImageInfo(iid, 64.0, 48.0, f"img{iid}.png"))
        rasters[iid] = rng.integers(0, 256, size=(48, 64, 3), dtype=np.uint8)
        for k in range(2):
            x, y = 5 + 25 * k, 6 + 4 * iid
            gts.append(GroundTruthBox(BBox(x, y, x + 8, y + 6), 1 + k, iid))
    # one instance with a triangular outline to exercise polygon masks
    gts.append(
        GroundTruthBox(BBox(40, 30, 52, 42), 2, 3, segmentation=((40.0, 30.0, 52.0, 30.0, 40.0, 42.0),))
    )
    return Dataset(images, table, gts), rasters


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
