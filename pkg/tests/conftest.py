import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from dentaldet.core import AttributeVector, BoundingBox, Detection, FDILabel, ToothRecord  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


def make_detection(box, probs=None, attrs=(0.0, 0.0, 0.0, 0.0), conf=None, fdi=None):
    if probs is None:
        probs = [0.01] * 32
    conf = max(probs) if conf is None else conf
    return Detection(BoundingBox(*box), tuple(probs), AttributeVector(*attrs), conf,
                     assigned_fdi=FDILabel.from_code(fdi) if fdi else None)


def peaked_probs(code, p=0.9, rest=0.01):
    from dentaldet.core import class_index

    probs = [rest] * 32
    probs[class_index(FDILabel.from_code(code))] = p
    return probs


def record(box, code=None, attrs=None, quadrant=None):
    return ToothRecord(
        box=BoundingBox(*box),
        fdi=FDILabel.from_code(code) if code else None,
        attributes=AttributeVector(*attrs) if attrs is not None else None,
        quadrant=quadrant,
    )


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE_LINES = {}


def acceptance(number: int, title: str, ok: bool, detail: str = "") -> None:
    """Record one criterion's verdict for the end-of-run summary, then assert it."""
    ACCEPTANCE_LINES[number] = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
    assert ok, ACCEPTANCE_LINES[number]


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
