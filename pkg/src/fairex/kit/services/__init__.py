import os
from importlib import import_module
from inspect import isabstract, isclass
from pathlib import Path
from pkgutil import iter_modules
from types import GenericAlias

from ._default import ServiceBase

package_dir = os.path.join(Path(__file__).resolve().parent)

__all__ = ["ServiceBase"]

# Every concrete ServiceBase found next to this file becomes importable from the package.
for _, module_name, _ in iter_modules([package_dir]):
    module = import_module(f"{__name__}.{module_name}")
    for attribute_name in dir(module):
        attribute = getattr(module, attribute_name)
        if (
            isclass(attribute)
            and not isinstance(attribute, GenericAlias)
            and issubclass(attribute, ServiceBase)
            and not isabstract(attribute)
        ):
            globals()[attribute_name] = attribute
            if attribute_name not in __all__:
                __all__.append(attribute_name)
