import os
from abc import ABC, abstractmethod
from configparser import SectionProxy
from typing import Any, Optional, TypeAlias

ConfigDict: TypeAlias = dict[str, Any] | SectionProxy


class ServiceBase(ABC):
    """An abstract class for the simulated on-chain components attached to ExchangeClient

    Attributes:
    -----------
    config : dict
        Dictionary of config variables (a profile section of the INI file).
    connect : bool
        Determines if the service should be automatically connected.

    Methods:
    --------
    connect(*args, **kwargs) -> Optional
        Opens the service ledger.
    info(*args, **kwargs) -> str
        Returns information on the service.
    get_profile(*args, **kwargs) -> str
        Returns the currently used profile.
    set_profile(*args, **kwargs) -> str
        Sets the new profile.
    close(*args, **kwargs) -> None
        Drops the service ledger.
    """

    @abstractmethod
    def __init__(self, config, connect: bool, *args, **kwargs) -> None:
        raise NotImplementedError  # pragma: no cover

    @abstractmethod
    def connect(self, *args, **kwargs) -> Optional:
        raise NotImplementedError  # pragma: no cover

    @abstractmethod
    def info(self, *args, **kwargs) -> str:
        raise NotImplementedError  # pragma: no cover

    @abstractmethod
    def get_profile(self, *args, **kwargs) -> str:
        raise NotImplementedError  # pragma: no cover

    @abstractmethod
    def set_profile(self, *args, **kwargs) -> str:
        raise NotImplementedError  # pragma: no cover

    @abstractmethod
    def close(self, *args, **kwargs) -> None:
        raise NotImplementedError  # pragma: no cover


def config_value(config: ConfigDict | None, name: str, default: Any = None) -> Any:
    """Looks up ``name`` in the environment (FAIREX_<NAME>) first, then in the profile."""
    env_name = f"FAIREX_{name.upper()}"
    value = os.environ.get(env_name)
    if value is None and config is not None:
        value = config.get(name)
    return default if value is None else value
