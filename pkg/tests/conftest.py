from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import settings

from mvps.config import RunConfig
from mvps.dataio import load_manifest
from mvps.synthworld import DatasetParams, RenderSettings, make_dataset

settings.register_profile("repo", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("repo")

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Three small synthetic records (32 x 128 panoramas, 32 px satellite tiles)."""
    out = tmp_path_factory.mktemp("tiny_ds")
    params = DatasetParams(render=RenderSettings(pano_size=(32, 128), overhead_size=32, gsd=2.0))
    manifest = make_dataset(3, 5, 123, out, params)
    return manifest


@pytest.fixture(scope="session")
def tiny_records(tiny_dataset):
    return load_manifest(tiny_dataset)


@pytest.fixture
def tiny_cfg():
    return RunConfig.tiny()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    from _acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
