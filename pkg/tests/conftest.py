import numpy as np
import pytest
import torch

from longiseg.volumes import LongitudinalSample, Volume3D


def make_sample(shape=(8, 8, 8), values=(1.0, 2.0, 3.0, 4.0), mask=None, subject_id="sub-test"):
    """Sample whose four scans are constants (or given arrays), in channel order."""
    arrays = [np.full(shape, v, dtype=np.float64) if np.isscalar(v) else np.asarray(v, dtype=np.float64)
              for v in values]
    keys = [("ti", "T1"), ("ti", "FLAIR"), ("tj", "T1"), ("tj", "FLAIR")]
    scans = {k: Volume3D(a) for k, a in zip(keys, arrays)}
    mask = np.zeros(shape, dtype=np.uint8) if mask is None else mask.astype(np.uint8)
    return LongitudinalSample(subject_id, scans, Volume3D(mask, is_mask=True))


@pytest.fixture
def sample_factory():
    return make_sample


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


# acceptance bookkeeping: criterion number -> (title, [outcomes])
_CRITERIA: dict[int, tuple[str, list[str]]] = {}


def pytest_collection_modifyitems(config, items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            _CRITERIA.setdefault(number, (title, []))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _CRITERIA[mark.args[0]][1].append("skipped" if report.skipped else report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, outcomes = _CRITERIA[number]
        if not outcomes:
            status = "NOT RUN"
        elif "failed" in outcomes:
            status = "FAIL"
        elif all(o == "passed" for o in outcomes):
            status = "PASS"
        else:
            status = "SKIPPED"
        terminalreporter.write_line(f"criterion {number:>2} {status:<8} {title}")
