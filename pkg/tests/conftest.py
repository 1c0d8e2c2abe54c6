import numpy as np
import pytest

from twostream.unet import UNetConfig


@pytest.fixture
def small_cfg():
    """Cheap config that still has four resolutions (16 -> 2) and both bridges."""
    return UNetConfig(frames=4, height=16, width=16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict = {}


@pytest.fixture
def criterion():
    """``record(n, title, ok, detail)``: one line per acceptance criterion,
    repeated in the terminal summary so it survives output capture."""
    def record(n: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"[{n:2d}] {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE[n] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
