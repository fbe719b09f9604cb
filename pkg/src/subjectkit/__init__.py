"""subjectkit: deterministic tooling for two-stage subject personalization.

The package covers everything around the model calls of a two-stage
personalization pipeline: rare-token scouting, safetensors / LoRA weight
algebra with distributional-shift bounds, segmentation post-processing,
distance-decayed blurring, two-stage prompt rewriting and orchestration,
and an evaluation harness.  All model inference is delegated to a
pluggable backend client (HTTP or in-process mock).
"""

from . import backends
from . import image
from . import lora
from . import masks
from . import metrics
from . import pipeline
from . import safetensors_io
from . import tokens

__version__ = "0.1.0"

__all__ = [
    "backends",
    "image",
    "lora",
    "masks",
    "metrics",
    "pipeline",
    "safetensors_io",
    "tokens",
]
