import numpy as np
import pytest
import torch
from hypothesis import settings

from h3r.camera import Camera, Intrinsics, Pose

settings.register_profile("h3r", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("h3r")


@pytest.fixture(autouse=True)
def _restore_dtype():
    dtype = torch.get_default_dtype()
    yield
    torch.set_default_dtype(dtype)


@pytest.fixture
def f64():
    torch.set_default_dtype(torch.float64)
    return torch.float64


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def simple_camera():
    return Camera(Intrinsics(16.0, 16.0, 7.5, 7.5, 16, 16), Pose.identity())


ACCEPTANCE: dict = {}


@pytest.fixture
def verdict(capsys):
    """Record one PASS/FAIL line for an acceptance criterion and print it."""

    def record(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[number] = line
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
