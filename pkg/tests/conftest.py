from __future__ import annotations

import textwrap
from importlib import resources

import numpy as np
import pytest

from spatialcrn.network import load_config, load_config_text


def bundled_path(name: str):
    return resources.files("spatialcrn") / "data" / name


def bundled(name: str):
    return load_config(bundled_path(name))


def config_from(text: str):
    return load_config_text(textwrap.dedent(text))


def net_from(text: str):
    return config_from(text).network


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
