import os

import numpy as np
import pytest
import torch

from sgdiff.scenegraph import Vocab

torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))

_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def vocab():
    return Vocab(("sheep", "horse", "tree", "grass"), ("on", "behind", "in-front-of", "left-of"))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def criterion(request, capsys):
    """``criterion(n, passed, detail)`` prints and records one acceptance line."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        request.config.stash.setdefault(_ACCEPTANCE, []).append(line)
        with capsys.disabled():
            print("\n" + line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
