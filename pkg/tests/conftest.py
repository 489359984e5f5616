import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def t64(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def write_ppm(path, pixels):
    """Reference P6/P5 writer used to build fixture files."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim == 2:
        h, w = pixels.shape
        header = f"P5\n{w} {h}\n255\n".encode()
        body = pixels.tobytes()
    else:
        h, w, _ = pixels.shape
        header = f"P6\n{w} {h}\n255\n".encode()
        body = pixels.tobytes()
    path.write_bytes(header + body)


_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one acceptance line; the outcome is printed at the end of the run."""

    def record(number, ok, text):
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {text}"
        _CRITERIA[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
