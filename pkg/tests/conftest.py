import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from medu.data import Dataset

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def toy_dataset(n=40, d=3, classes=2, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.standard_normal((n, d)), rng.integers(0, classes, n))


@pytest.fixture
def toy():
    return toy_dataset


@pytest.fixture(autouse=True)
def _chdir_tmp(tmp_path, monkeypatch):
    # CLI commands default to relative output directories
    monkeypatch.chdir(tmp_path)
