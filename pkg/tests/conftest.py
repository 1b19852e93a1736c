import math
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import strategies as st

sys.path.insert(0, str(Path(__file__).parent))

from wlst.simulate import default_camera  # noqa: E402
from wlst.structures import Box3D, PseudoLabel, Source  # noqa: E402


def random_box(rng: np.random.Generator, spread: float = 3.0) -> Box3D:
    return Box3D(
        *rng.uniform(-spread, spread, 2),
        rng.uniform(-0.5, 0.5),
        *rng.uniform(0.5, 5.0, 3),
        rng.uniform(-math.pi, math.pi),
    )


finite = st.floats(-20.0, 20.0, allow_nan=False, allow_infinity=False)
dim = st.floats(0.3, 6.0, allow_nan=False, allow_infinity=False)
angle = st.floats(-math.pi, math.pi, allow_nan=False, allow_infinity=False)


@st.composite
def boxes(draw, spread: float = 5.0):
    xy = st.floats(-spread, spread, allow_nan=False, allow_infinity=False)
    return Box3D(draw(xy), draw(xy), draw(st.floats(-1, 1)), draw(dim), draw(dim), draw(dim), draw(angle))


@st.composite
def labels(draw, source=Source.DETECTOR, spread: float = 4.0):
    score = draw(st.sampled_from([0.1, 0.3, 0.5, 0.6, 0.65, 0.7, 0.8, 0.9, 1.0]) | st.floats(0, 1))
    prob = draw(st.sampled_from([0.0, 0.5, 0.7, 0.75, 1.0]) | st.floats(0, 1))
    return PseudoLabel(draw(boxes(spread)), score, prob, source)


@pytest.fixture
def cam():
    return default_camera()


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        detail = dict(report.user_properties).get("detail", "")
        name = report.nodeid.split("::")[-1][len("test_criterion_"):]
        _RESULTS[name] = (report.passed, detail)


_RESULTS: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_RESULTS):
        passed, detail = _RESULTS[name]
        num, _, label = name.partition("_")
        terminalreporter.write_line(f"criterion {int(num):>2} {label:<28} {'PASS' if passed else 'FAIL'}  {detail}")
