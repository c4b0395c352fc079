import numpy as np
import pytest

from synthdet import toy
from synthdet.dataset_io import CameraIntrinsics, ObjectLibrary, RgbdFrame

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_acceptance(n: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def toy_library() -> ObjectLibrary:
    return ObjectLibrary.from_views(toy.make_library_views(np.random.default_rng(7)))


@pytest.fixture(scope="session")
def kitchen_frame() -> RgbdFrame:
    return toy.render_scene("k0", np.random.default_rng(3), "kitchen")


@pytest.fixture
def intr() -> CameraIntrinsics:
    return CameraIntrinsics(500.0, 500.0, 240.0, 240.0, 640, 480)
