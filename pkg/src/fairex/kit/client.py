import logging
import os
from configparser import ConfigParser, SectionProxy
from importlib import import_module
from inspect import isabstract, isclass
from pathlib import Path
from pkgutil import iter_modules
from types import GenericAlias

from .services import ServiceBase
from .simnet import SimNet


class ExchangeClient:
    """
    The main class of the fairex.kit library.

    Loads the simulated on-chain services found in <projectbase>/services (the arbiter and the
    multiparty extension) with the variables of one configuration profile.


    Parameters:
    -----------
    config_file : str
        The location of the file in INI format that holds the configuration variables.
        The config file needs to define a [global] section with the name of the default profile,
        which is another section holding variables such as max_timeout, chunk_len and
        aggregate_scheme. Environment variables FAIREX_<NAME> take precedence over the profile.
    connect : bool (True)
        Calls connect() method of each of the services.


    Attributes:
    -----------
    module_names : list
        The services loaded from the <projectbase>/services directory.
    config : configparser.SectionProxy
        The active profile.

    Methods:
    --------
    add_module(paths, config, connect):
        Adds and optionally connects the services defined in the given modules.
    connect()
        Connects all the services by calling their connect() functions.
    simnet()
        Returns a SimNet running on the active profile.
    """

    def __init__(self, config_file: str = "config/config.ini", connect: bool = True) -> None:
        if not config_file:
            raise RuntimeError("Configuration file not given")

        config = ConfigParser()

        if os.path.isfile(config_file):
            config.read(config_file)
            logging.debug(str(config))
        current_config = config["global"]["default_profile"]

        logging.debug("Using the following config:")
        logging.debug(str(config[current_config]))
        self.config: SectionProxy = config[current_config]
        self.module_names = []

        package_dir = os.path.join(Path(__file__).resolve().parent, "services")

        for _, module_name, _ in iter_modules([package_dir]):
            self.add_module(f"{__package__}.services.{module_name}", self.config, connect)

        if "arbiter" in self.module_names and "multiparty" in self.module_names:
            self.multiparty.attach(self.arbiter)

    def add_module(
        self,
        paths: str | list[str],
        config: dict | SectionProxy | None = None,
        connect: bool = True,
    ) -> None:
        """Adds and optionally connects the services defined in the given modules.

        Parameters:
        -----------
        paths : str or list[str]
            a path to the module
        config : dict or configparser.SectionProxy
            the configuration variables handed to the service
        connect : bool
            determines if the service should auto-connect
        """
        if not isinstance(paths, list):
            paths = [paths]

        for path in paths:
            module_name = path.split(".")[-1] if "." in path else path
            try:
                module = import_module(path)
            except ModuleNotFoundError:
                logging.debug(
                    "Skipping module. Failed to import from %s", f"{path=}", exc_info=True
                )
                raise
            for attribute_name in dir(module):
                attribute = getattr(module, attribute_name)
                if (
                    isclass(attribute)
                    and not isinstance(attribute, GenericAlias)
                    and issubclass(attribute, ServiceBase)
                    and not isabstract(attribute)
                    and attribute.__module__ == module.__name__
                ):
                    self.module_names.append(module_name)
                    c = attribute(connect=connect, config=config)
                    setattr(self, module_name, c)
                    if connect:
                        c.connect()

    def connect(self) -> bool:
        """Connects each of the services loaded into self.module_names"""
        for module_name in self.module_names:
            module = getattr(self, module_name)
            if hasattr(module, "connect"):
                module.connect()
        return True

    def simnet(self) -> SimNet:
        return SimNet(self.config)
