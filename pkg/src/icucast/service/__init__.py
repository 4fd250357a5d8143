from .app import create_app
from .config import ServiceConfig
from .registry import ModelRegistry, RegistryEntry
from .storage import DataRoot, SchemaViolation

__all__ = [
    "create_app",
    "ServiceConfig",
    "ModelRegistry",
    "RegistryEntry",
    "DataRoot",
    "SchemaViolation",
]
