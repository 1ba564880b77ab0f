import pathlib
import sys

import pytest

sys.path.insert(0, str(pathlib.Path(__file__).parent))

from voltvar import load_feeder
from voltvar.powerflow import NetworkIndex

DATA = pathlib.Path(__file__).resolve().parents[1] / "src" / "voltvar" / "data"
TEST_DATA = pathlib.Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def base_feeder():
    return load_feeder(DATA / "ieee34_base.json")


@pytest.fixture(scope="session")
def mod_feeder():
    return load_feeder(DATA / "ieee34_mod.json")


@pytest.fixture(scope="session")
def twovr_feeder():
    return load_feeder(DATA / "ieee34_twovr.json")


@pytest.fixture(scope="session")
def base_index(base_feeder):
    return NetworkIndex(base_feeder)


@pytest.fixture(scope="session")
def mod_index(mod_feeder):
    return NetworkIndex(mod_feeder)
