from __future__ import annotations

import numpy as np
import pytest

from fedcrop.data import Dataset, load_crop_dataset


@pytest.fixture(scope="session")
def crop():
    return load_crop_dataset()


def blobs(n_per_class=30, num_classes=4, dim=7, seed=0, spread=0.15) -> Dataset:
    """Well separated Gaussian clusters, one per class."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0, 1, size=(num_classes, dim))
    X = np.vstack([c + spread * rng.standard_normal((n_per_class, dim)) for c in centers])
    y = np.repeat(np.arange(num_classes), n_per_class)
    return Dataset(X, y, [f"c{k}" for k in range(num_classes)])


@pytest.fixture
def small_blobs():
    return blobs()


# acceptance outcomes, filled in by test_acceptance.py and echoed at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"AC{criterion:<2} {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"AC{k:<2} {'PASS' if ok else 'FAIL'}  {detail}")
