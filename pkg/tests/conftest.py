import numpy as np
import pytest

from cxrtrunc.data import ImageDataset, compute_dataset_stats, load_manifest
from cxrtrunc.synth import SynthConfig, make_synthetic_dataset


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """60 synthetic 16x16 images split 36/12/12."""
    root = tmp_path_factory.mktemp("tiny")
    manifests = make_synthetic_dataset(SynthConfig(60, image_size=16, seed=3), root)
    return root, manifests


@pytest.fixture(scope="session")
def tiny_splits(tiny_data):
    _, manifests = tiny_data
    records = {s: load_manifest(p) for s, p in manifests.items()}
    stats = compute_dataset_stats(records["train"])
    return {s: ImageDataset(r, 16, stats) for s, r in records.items()}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    failed = report.failed or (report.when == "call" and report.skipped)
    if failed or report.when == "call":
        prev = _CRITERIA.get(number, (title, "PASS"))[1]
        _CRITERIA[number] = (title, "FAIL" if failed or prev == "FAIL" else "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, verdict = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {verdict}: {title}")
