import re
import sys

import numpy as np
import pytest

from svdkd import models
from svdkd.data import channel_mean, synthetic_splits


@pytest.fixture(scope="session")
def tiny_splits():
    """A small synthetic problem: 3 classes, 6 train / 2 test images per class."""
    return synthetic_splits(3, 6, 2, seed=5)


@pytest.fixture
def tiny_pair(tiny_splits):
    train, _ = tiny_splits
    mean = channel_mean(train)
    teacher = models.build(models.preset("tiny-vgg-T", 3), seed=1, input_mean=mean)
    student = models.build(models.preset("tiny-vgg-S", 3), seed=2, input_mean=mean)
    return teacher, student


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None:
        return
    ran = set()
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            m = re.search(r"test_criterion_(\d)", getattr(rep, "nodeid", ""))
            if m:
                ran.add(int(m.group(1)))
    lines = [mod.RESULTS.get(n, f"criterion {n}: FAIL  did not complete (see traceback)")
             for n in range(1, 10) if n in mod.RESULTS or n in ran]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
