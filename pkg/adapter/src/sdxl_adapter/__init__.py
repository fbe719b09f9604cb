"""Reference backend adapter: serves the personalization wire protocol
(txt2img / img2img / segment / embed) over a pluggable runtime and hosts
the delegated LoRA fine-tuning entry point."""

from .config import AdapterConfig, TrainingConfig
from .runtime import ProceduralRuntime, Runtime
from .server import create_app

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig",
    "ProceduralRuntime",
    "Runtime",
    "TrainingConfig",
    "create_app",
]
