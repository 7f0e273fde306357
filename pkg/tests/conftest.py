from __future__ import annotations

import math

import numpy as np
import pytest
from shapely.geometry import Polygon

from slimcomm.geometry import box_corners
from slimcomm.scene import Scene, VehicleState, generate_scene, occlusion_template


def box_polygon(box) -> Polygon:
    cx, cy, yaw, length, width = box
    return Polygon(box_corners((cx, cy), yaw, length, width))


def single_target_scene(position, velocity=(0.0, 0.0), ego_velocity=(10.0, 0.0), yaw=0.0, ego_yaw=0.0) -> Scene:
    ego = VehicleState(0, (0.0, 0.0), ego_yaw, ego_velocity)
    tgt = VehicleState(1, tuple(position), yaw, tuple(velocity))
    return Scene(0, (ego, tgt), (), (0,), 0)


@pytest.fixture
def template_scene() -> Scene:
    return generate_scene(occlusion_template(), 0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def unit(angle_deg: float) -> np.ndarray:
    a = math.radians(angle_deg)
    return np.array([math.cos(a), math.sin(a)])


# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary
_CRITERIA: dict[int, tuple[str, bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not report.failed:
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    prev = _CRITERIA.get(number, (title, True, ""))
    _CRITERIA[number] = (title, prev[1] and report.passed, detail or prev[2])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[number]
        line = f"[{'PASS' if ok else 'FAIL'}] {number:2d}. {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
