import contextlib

import numpy as np
import pytest

from cubesparse.harness import RunConfig, make_workload
from cubesparse.layout import CubeShape, GridShape

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@contextlib.contextmanager
def criterion(label: str):
    """Record one acceptance criterion's outcome for the end-of-run summary."""
    detail = {"text": ""}
    try:
        yield detail
    except BaseException:
        _ACCEPTANCE.append((label, False, detail["text"]))
        raise
    _ACCEPTANCE.append((label, True, detail["text"]))


@pytest.fixture
def acceptance():
    return criterion


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, text in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {label}" + (f"  [{text}]" if text else ""))


def small_config(**overrides) -> RunConfig:
    base = dict(grid=GridShape(4, 8, 8), cube=CubeShape(4, 4, 2), num_text_tokens=6, num_layers=2,
                num_heads=2, d_model=16, d_ff=32)
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture
def small_workload():
    cfg = small_config()
    state, layers = make_workload(cfg)
    return cfg, state, layers


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
