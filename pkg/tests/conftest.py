import json
import os
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"
IDX_DIR = FIXTURES / "idx"


def idx_corpus():
    """(path, expectation) pairs; an expectation has ``shape``/``data`` or ``error``."""
    expected = json.loads((IDX_DIR / "expected.json").read_text())
    return [(IDX_DIR / name, exp) for name, exp in sorted(expected.items())]


def mnist_dir():
    return Path(os.environ.get("CAMEL2_MNIST_DIR", "/root/data/mnist"))


def have_mnist():
    d = mnist_dir()
    return all((d / f).exists() for f in (
        "train-images-idx3-ubyte", "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte",
    ))


needs_mnist = pytest.mark.skipif(not have_mnist(), reason="MNIST IDX files not found; set CAMEL2_MNIST_DIR")


def separable_bags(seed=0, n_pos=6, n_neg=6, size=20, dim=12, witness_rate=0.3):
    """Bags over two Gaussian clouds; positives carry a share of shifted
    witness instances. Returns a BagDataset with truth."""
    import numpy as np

    from camel2.bags import Bag, BagDataset, BagLabel

    rng = np.random.default_rng(seed)
    feats, truth, bags = [], [], []
    for b in range(n_pos + n_neg):
        positive = b < n_pos
        k = max(1, int(round(witness_rate * size))) if positive else 0
        y = np.zeros(size, dtype=np.int8)
        y[rng.choice(size, k, replace=False)] = 1
        x = rng.normal(0, 1, (size, dim)) + 3.0 * y[:, None]
        ids = np.arange(b * size, (b + 1) * size)
        label = BagLabel.POSITIVE if positive else BagLabel.NEGATIVE
        bags.append(Bag(b, ids, label, ratio=k / size if positive else None))
        feats.append(x)
        truth.append(y)
    x = np.concatenate(feats).astype(np.float32)
    return BagDataset(x, np.arange(len(x)), bags, truth=np.concatenate(truth))


# -- acceptance reporting: one line per criterion at the end of the run -----------

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
        detail = dict(item.user_properties).get("detail", "")
        _CRITERIA[marker.args[0]] = (marker.args[1], status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[number]
        terminalreporter.line(f"criterion {number:2d}: {status}  {title}" + (f"  [{detail}]" if detail else ""))
