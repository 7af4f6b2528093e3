import os

import pytest

from fairex.kit.hashchain import pad_message
from fairex.kit.protocol import generate_keypair
from fairex.kit.services.arbiter import ArbiterService
from fairex.kit.services.multiparty import MultipartyService


@pytest.fixture(scope="session")
def test_dir():
    return os.path.dirname(__file__)


@pytest.fixture(scope="session")
def test_resources_dir(test_dir):
    return os.path.join(test_dir, "resources")


@pytest.fixture(scope="session")
def config_file(test_resources_dir):
    return os.path.join(test_resources_dir, "config.ini")


@pytest.fixture
def profile():
    return {"max_timeout": "50", "chunk_len": "1", "aggregate_scheme": "concat"}


@pytest.fixture
def arbiter(profile):
    return ArbiterService(profile)


@pytest.fixture
def multiparty(profile, arbiter):
    return MultipartyService(profile, arbiter=arbiter)


@pytest.fixture(scope="session")
def data():
    # 200 bytes pad to 4 blocks
    return bytes(range(200))


@pytest.fixture(scope="session")
def padded(data):
    return pad_message(data)


@pytest.fixture(scope="session")
def seller_keys():
    return generate_keypair("seller")


@pytest.fixture(scope="session")
def buyer_keys():
    return generate_keypair("buyer")


@pytest.fixture(scope="session")
def mebibyte():
    return pad_message(bytes(range(256)) * 4096)
