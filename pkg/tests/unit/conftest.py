"""morphmark test wide fixtures and configuration"""
import os
from pathlib import Path

import pytest
import torch

from morphmark import synthbench
from morphmark.settings import Config

TEST_DIR = os.path.dirname(os.path.abspath(__file__))
SRC_DIR = os.path.abspath(os.path.join(TEST_DIR, "../../morphmark/"))


@pytest.fixture
def src_path():
    return Path(SRC_DIR).resolve()


@pytest.fixture(autouse=True)
def _no_thread_env(monkeypatch):
    monkeypatch.delenv("MORPHMARK_THREADS", raising=False)


@pytest.fixture
def smoke_config():
    return Config(preset="smoke")


@pytest.fixture
def generator():
    return torch.Generator().manual_seed(0)


@pytest.fixture
def smoke_dataset(tmp_path, smoke_config):
    spec = synthbench.SyntheticSpec.from_settings(smoke_config.data, seed=0)
    return synthbench.generate(spec, tmp_path / "data")


@pytest.fixture
def blob_image():
    """A 32x32 image with one bright Gaussian blob off the center."""
    ys, xs = torch.meshgrid(torch.arange(32.0), torch.arange(32.0), indexing="ij")
    blob = torch.exp(-((xs - 12.0) ** 2 + (ys - 18.0) ** 2) / (2 * 4.0 ** 2))
    return (0.1 + 0.8 * blob)[None, None]
