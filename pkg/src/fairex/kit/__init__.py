from .client import ExchangeClient

__all__: tuple[str, ...] = [
    "ExchangeClient",
]
