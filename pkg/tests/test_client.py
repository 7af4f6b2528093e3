import os.path

import pytest

from fairex.kit import ExchangeClient
from fairex.kit.services.arbiter import ArbiterService
from fairex.kit.services.multiparty import ConcatScheme, MultipartyService
from fairex.kit.simnet import SimNet


def test_class(config_file):
    c = ExchangeClient(connect=False, config_file=config_file)
    assert sorted(c.module_names) == ["arbiter", "multiparty"]


# Config file tests
def test_config_non_existing(config_file=None):
    with pytest.raises(RuntimeError):
        ExchangeClient(config_file, connect=False)


# Test config file with incorrect section pointer
def test_config_no_section(test_resources_dir):
    config_file = os.path.join(test_resources_dir, "dummy_config.ini")
    with pytest.raises(KeyError):
        ExchangeClient(config_file, connect=False)


def test_failed_add_module(config_file):
    client = ExchangeClient(connect=False, config_file=config_file)
    with pytest.raises(ModuleNotFoundError):
        client.add_module(paths="fairex.kit.services.xyz", connect=False)


def test_add_module_connect(config_file):
    ec = ExchangeClient(config_file=config_file, connect=False)

    expected_module_config = {"module_param": "value"}
    ec.add_module("mock_service", config=expected_module_config, connect=True)

    assert "mock_service" in ec.module_names
    assert hasattr(ec, "mock_service")

    d = ec.mock_service
    from mock_service import MockService

    assert isinstance(d, MockService)
    assert d.init_connect_arg is True
    assert d.init_config_arg == expected_module_config
    assert d.connect_method_called is True


def test_services_use_profile(config_file):
    ec = ExchangeClient(config_file=config_file)
    assert isinstance(ec.arbiter, ArbiterService)
    assert isinstance(ec.multiparty, MultipartyService)
    assert ec.arbiter.max_timeout == 50
    assert ec.arbiter.get_profile() == "ci"
    assert isinstance(ec.multiparty.scheme, ConcatScheme)
    # segment sessions land on the client's arbiter
    assert ec.multiparty.arbiter is ec.arbiter


def test_env_overrides_profile(config_file, monkeypatch):
    monkeypatch.setenv("FAIREX_MAX_TIMEOUT", "7")
    ec = ExchangeClient(config_file=config_file)
    assert ec.arbiter.max_timeout == 7


def test_simnet_gets_profile(config_file):
    ec = ExchangeClient(config_file=config_file, connect=False)
    net = ec.simnet()
    assert isinstance(net, SimNet)
    assert net.config["max_timeout"] == "50"


def test_connect(config_file, mocker):
    ec = ExchangeClient(config_file=config_file, connect=False)
    mock_connect_results = []

    def make_mock_connect(service_name):
        return lambda: mock_connect_results.append(service_name)

    for name in ec.module_names:
        service = getattr(ec, name)
        mocker.patch.object(service, "connect", side_effect=make_mock_connect(name))

    ec.connect()
    assert mock_connect_results == ec.module_names
