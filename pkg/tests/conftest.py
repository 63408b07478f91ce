from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from dynmap.expert.recorder import record_dataset
from dynmap.expert.scripted import expert_variants
from dynmap.harness.formats import Dataset
from dynmap.tasks import RandomizationSpec, TaskId, nominal_episode

settings.register_profile("dynmap", max_examples=25, deadline=None)
settings.load_profile("dynmap")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def nominal():
    return nominal_episode(TaskId.BALANCE_REACHING, distance=0.4)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory) -> Dataset:
    """Six training and two evaluation episodes from the scripted experts."""
    root = tmp_path_factory.mktemp("dataset")
    record_dataset(expert_variants(TaskId.BALANCE_REACHING), TaskId.BALANCE_REACHING, 6, 2,
                   RandomizationSpec().reduced(), root, seed=3)
    return Dataset(root)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if getattr(rep, "when", "call") != "call":
                continue
            lines += [v for k, v in getattr(rep, "user_properties", []) if k == "criterion"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
