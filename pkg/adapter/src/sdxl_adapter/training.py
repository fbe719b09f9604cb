"""Delegated LoRA fine-tuning entry point.

Trains rank-r factor pairs (U, V) by gradient descent against the subject
images and writes them to a safetensors file under the lora_A / lora_B /
alpha naming convention, so the result satisfies the toolkit's discovery,
rank, and shift-bound contracts.

The objective is a miniature of the real recipe: frozen projection
weights stand in for attention layers, image-derived feature vectors are
the inputs, and the targets pull the adapted output toward a direction
keyed to the placeholder token.  Only U and V receive gradients; the
factor norms are capped after training so the Frobenius ceiling
alpha*||U||_F*||V||_F stays below the configured bound.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .config import TrainingConfig

__all__ = ["TrainingDivergedError", "TrainingInputError", "TrainingResult",
           "train_lora"]

FEATURE_PATCH = 16  # images are downsampled to this square before projection


class TrainingInputError(ValueError):
    """Wrong image count or an image that cannot be loaded."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during optimization."""


@dataclass(frozen=True)
class TrainingResult:
    output_path: str
    placeholder_token: str
    final_loss: float
    steps: int
    factor_bounds: dict[str, float]


def _seeded(name: str, seed: int) -> np.random.Generator:
    digest = hashlib.sha256(f"{name}\x1f{seed}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


def _image_features(paths, feature_dim: int, seed: int) -> np.ndarray:
    """Deterministic per-image feature rows: flattened 16x16 RGB through a
    fixed random projection."""
    raws = []
    for path in paths:
        try:
            pil = Image.open(path).convert("RGB")
        except Exception as exc:
            raise TrainingInputError(f"cannot load image {path}: {exc}") from exc
        small = pil.resize((FEATURE_PATCH, FEATURE_PATCH), Image.BILINEAR)
        raws.append(np.asarray(small, dtype=np.float64).reshape(-1) / 255.0)
    flat = np.stack(raws)  # (n, 16*16*3)
    projection = _seeded("feature-projection", seed).normal(
        size=(flat.shape[1], feature_dim)) / math.sqrt(flat.shape[1])
    features = flat @ projection
    return features / np.linalg.norm(features, axis=1, keepdims=True)


def train_lora(images, placeholder_token: str, config: TrainingConfig,
               output_path) -> TrainingResult:
    """Fit rank-r updates on 4-5 subject images and emit a safetensors file.

    Raises TrainingInputError for a wrong image count or unreadable file
    and TrainingDivergedError if the loss stops being finite.
    """
    import torch
    from safetensors.numpy import save_file

    paths = [str(p) for p in images]
    if not 4 <= len(paths) <= 5:
        raise TrainingInputError(
            f"need 4-5 subject images, got {len(paths)}")
    if not placeholder_token:
        raise TrainingInputError("placeholder_token must be nonempty")

    features = _image_features(paths, config.feature_dim, config.seed)
    x = torch.tensor(features, dtype=torch.float64)  # (n, d_in)

    token_rng = _seeded(f"token\x1f{placeholder_token}", config.seed)
    direction = token_rng.normal(size=config.output_dim)
    direction /= np.linalg.norm(direction)
    direction_t = torch.tensor(direction, dtype=torch.float64)

    torch.manual_seed(config.seed)
    tensors: dict[str, np.ndarray] = {}
    factor_bounds: dict[str, float] = {}
    total_loss = 0.0

    for layer in config.target_layers:
        layer_rng = _seeded(f"base-weight\x1f{layer}", config.seed)
        W = torch.tensor(
            layer_rng.normal(size=(config.output_dim, config.feature_dim))
            / math.sqrt(config.feature_dim),
            dtype=torch.float64,
        )
        base_out = x @ W.T  # (n, d_out), frozen
        scale = base_out.norm(dim=1, keepdim=True)
        target = base_out + 0.5 * scale * direction_t  # pull toward the token

        U = torch.zeros(config.output_dim, config.rank,
                        dtype=torch.float64, requires_grad=True)
        V = torch.tensor(
            _seeded(f"init-V\x1f{layer}", config.seed).normal(
                size=(config.rank, config.feature_dim)) * 0.1,
            dtype=torch.float64, requires_grad=True,
        )
        optimizer = torch.optim.Adam([U, V], lr=config.learning_rate)
        loss = None
        for _ in range(config.steps):
            optimizer.zero_grad()
            adapted = base_out + config.alpha * (x @ V.T @ U.T)
            loss = ((adapted - target) ** 2).mean()
            loss_value = float(loss.detach())
            if not math.isfinite(loss_value) or loss_value > 1e30:
                raise TrainingDivergedError(
                    f"loss diverged on layer {layer!r}: {loss_value}")
            loss.backward()
            optimizer.step()
        total_loss += float(loss.detach())

        U_np = U.detach().numpy()
        V_np = V.detach().numpy()
        bound = abs(config.alpha) * np.linalg.norm(U_np) * np.linalg.norm(V_np)
        if bound > config.max_factor_bound:
            shrink = math.sqrt(0.95 * config.max_factor_bound / bound)
            U_np = U_np * shrink
            V_np = V_np * shrink
            bound = abs(config.alpha) * np.linalg.norm(U_np) * np.linalg.norm(V_np)
        factor_bounds[layer] = float(bound)

        tensors[f"{layer}.lora_A"] = V_np.astype(np.float32)
        tensors[f"{layer}.lora_B"] = U_np.astype(np.float32)
        tensors[f"{layer}.alpha"] = np.array(config.alpha, dtype=np.float32)

    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    save_file(tensors, str(output_path), metadata={
        "placeholder_token": placeholder_token,
        "rank": str(config.rank),
        "steps": str(config.steps),
    })
    return TrainingResult(
        output_path=str(output_path),
        placeholder_token=placeholder_token,
        final_loss=total_loss / len(config.target_layers),
        steps=config.steps,
        factor_bounds=factor_bounds,
    )
