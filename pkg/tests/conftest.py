from pathlib import Path

import numpy as np
import pytest
from scipy import ndimage

from toothbench.volume import Spacing, Volume

FIXTURES = Path(__file__).parent / "fixtures"

_criteria = {}


def pytest_runtest_logreport(report):
    marker = getattr(report, "_criterion", None)
    if marker is None:
        return
    number, title = marker
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _criteria[number] = (title, report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        rep._criterion = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, outcome = _criteria[number]
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {status}  {title}")


def random_blob_mask(rng, shape=(16, 16, 16), sigma=None, fill=None):
    """Smoothed-noise mask with a few irregular blobs; never empty."""
    sigma = rng.uniform(0.8, 2.0) if sigma is None else sigma
    field = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    q = rng.uniform(0.6, 0.9) if fill is None else fill
    mask = field > np.quantile(field, q)
    if not mask.any():
        mask.flat[rng.integers(mask.size)] = True
    return mask.astype(np.uint8)


def label(arr, spacing=(1.0, 1.0, 1.0)):
    return Volume(np.asarray(arr, dtype=np.uint8), Spacing(*spacing), "label")


def prob(arr, spacing=(1.0, 1.0, 1.0)):
    return Volume(np.asarray(arr, dtype=np.float64), Spacing(*spacing), "probability")
