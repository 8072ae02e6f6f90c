import functools

import numpy as np
import pytest

from spadppc.scene import CameraIntrinsics, render_scene, standard_scene
from spadppc.spad_sim import PulseModel, SbrTarget, SensorConfig, simulate_frame

ACCEPTANCE_LINES = []


@functools.lru_cache(maxsize=None)
def scene_maps(width=128, height=96):
    intr = CameraIntrinsics.default(width, height)
    return render_scene(standard_scene(), intr)


@functools.lru_cache(maxsize=None)
def standard_frame(signal, background, seed, width=128, height=96):
    """Cached simulation of the standard room (frames are treated as read-only)."""
    depth, albedo = scene_maps(width, height)
    return simulate_frame(depth, albedo, PulseModel(), SensorConfig(), SbrTarget(signal, background), seed)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_maps():
    return scene_maps(48, 36)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
