import datetime as dt

import numpy as np
import pytest

from uqshift.dataio import AssaySpec, CompoundRecord, Dataset


@pytest.fixture
def spec_above():
    return AssaySpec("tb", "identity", 6.0, "above")


def make_dataset(fps, labels, dates=None, values=None, spec=None):
    fps = np.asarray(fps, dtype=np.uint8)
    n = len(fps)
    labels = np.asarray(labels, dtype=np.int8)
    if dates is None:
        dates = [dt.date(2020, 1, 1) + dt.timedelta(days=i) for i in range(n)]
    if values is None:
        values = np.where(labels == 1, 7.0, 5.0)
    return Dataset([f"c{i}" for i in range(n)], fps, values, np.array(dates, dtype="datetime64[D]"),
                   labels, spec=spec)


def toy_dataset(n, d, seed, signal=3.0):
    """Random sparse fingerprints with a planted linear label rule."""
    rng = np.random.default_rng(seed)
    fps = (rng.random((n, d)) < 0.3).astype(np.uint8)
    fps[~fps.any(axis=1), 0] = 1
    w = rng.normal(0.0, signal, size=d)
    z = (fps - 0.3) @ w
    labels = (rng.random(n) < 1.0 / (1.0 + np.exp(-z))).astype(np.int8)
    return make_dataset(fps, labels)


@pytest.fixture
def records():
    def build(dates):
        return [
            CompoundRecord(f"r{i}", np.eye(8, dtype=np.uint8)[i % 8], 7.0, dt.date.fromisoformat(d), 1)
            for i, d in enumerate(dates)
        ]
    return build


# -- acceptance summary --------------------------------------------------------------

ACCEPTANCE = {}


def record_criterion(number, title, ok, detail):
    """Store one acceptance verdict for the end-of-run summary, then assert it."""
    ACCEPTANCE[number] = (bool(ok), title, detail)
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  ({detail})"
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  ({detail})")
