"""Adapter configuration: runtime selection, the lora_ref registry, and
the fine-tuning recipe."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

__all__ = ["AdapterConfig", "TrainingConfig", "load_config"]

DEFAULT_LABELS = ("person", "man", "woman", "dog", "cat", "object")


@dataclass(frozen=True)
class TrainingConfig:
    """Recipe for the low-rank fine-tune: rank-r factors on attention-style
    projection layers only."""

    rank: int = 4
    alpha: float = 1.0
    steps: int = 300
    learning_rate: float = 5e-3
    target_layers: tuple[str, ...] = (
        "unet.attn.to_q",
        "unet.attn.to_v",
    )
    feature_dim: int = 64
    output_dim: int = 96
    max_factor_bound: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.steps < 1 or self.learning_rate <= 0:
            raise ValueError("steps must be >= 1 and learning_rate > 0")
        if not self.target_layers:
            raise ValueError("at least one target layer is required")
        if self.max_factor_bound <= 0:
            raise ValueError("max_factor_bound must be > 0")


@dataclass(frozen=True)
class AdapterConfig:
    model: str = "stabilityai/stable-diffusion-xl-base-1.0"
    device: str = "cpu"
    runtime: str = "procedural"  # "procedural" | "diffusers"
    lora_registry: dict[str, str] = field(default_factory=dict)
    known_labels: tuple[str, ...] = DEFAULT_LABELS
    training: TrainingConfig = TrainingConfig()

    def __post_init__(self):
        if self.runtime not in ("procedural", "diffusers"):
            raise ValueError(f"unknown runtime {self.runtime!r}")
        for ref, path in self.lora_registry.items():
            if not Path(path).exists():
                raise ValueError(f"lora_registry[{ref!r}] points at missing file {path}")

    def resolve_lora(self, lora_ref: str | None) -> str | None:
        """Map a lora_ref to a weight file: registry key first, then a
        direct path.  Unknown refs are an error, not a silent no-op."""
        if lora_ref is None:
            return None
        if lora_ref in self.lora_registry:
            return self.lora_registry[lora_ref]
        if Path(lora_ref).exists():
            return lora_ref
        raise KeyError(f"unknown lora_ref {lora_ref!r}")


def load_config(path) -> AdapterConfig:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    training = TrainingConfig(**{
        **raw.get("training", {}),
        "target_layers": tuple(raw.get("training", {}).get(
            "target_layers", TrainingConfig.target_layers)),
    })
    return AdapterConfig(
        model=raw.get("model", AdapterConfig.model),
        device=raw.get("device", AdapterConfig.device),
        runtime=raw.get("runtime", AdapterConfig.runtime),
        lora_registry=dict(raw.get("lora_registry", {})),
        known_labels=tuple(raw.get("known_labels", DEFAULT_LABELS)),
        training=training,
    )
