"""Inference runtimes behind the wire protocol.

``Runtime`` is the internal seam the HTTP layer talks to: images cross it
as float32 arrays in [0, 1], shape (h, w, 3) for scenes and (h, w) for
masks.  ``ProceduralRuntime`` is the deterministic CPU reference used in
tests and for protocol development; ``DiffusersRuntime`` wires the same
seam to an actual SDXL + open-set segmentation stack when those models
are installed.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Protocol

import numpy as np
from PIL import Image

from .config import AdapterConfig

__all__ = ["Detection", "DiffusersRuntime", "ProceduralRuntime", "Runtime",
           "RuntimeError_", "build_runtime"]

EMBED_DIM = 128


class RuntimeError_(RuntimeError):
    """Runtime-level failure (reported as HTTP 5xx)."""


class Detection(dict):
    """Plain dict payload {box, score, label}; kept schema-identical to the
    wire format so the server can pass it straight through."""


class Runtime(Protocol):
    deterministic: bool

    def txt2img(self, prompt: str, seed: int, width: int, height: int) -> np.ndarray: ...

    def img2img(self, prompt: str, init: np.ndarray, strength: float, seed: int,
                lora_path: str | None) -> np.ndarray: ...

    def segment(self, image: np.ndarray, label: str
                ) -> tuple[list[Detection], list[np.ndarray]]: ...

    def embed(self, image: np.ndarray | None, text: str | None,
              source: str) -> np.ndarray: ...


def _seed_from(*parts) -> int:
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "big")


class ProceduralRuntime:
    """Deterministic stand-in for the model stack.

    Scenes are smooth multi-octave noise keyed by (prompt, seed); img2img
    blends the init toward a texture keyed by (prompt, seed, lora file
    content); segmentation places a box around the brightness centroid for
    labels the runtime knows and returns nothing otherwise.
    """

    def __init__(self, config: AdapterConfig):
        self.config = config
        self.known_labels = {label.lower() for label in config.known_labels}
        self.deterministic = True

    def _noise_field(self, key: int, width: int, height: int) -> np.ndarray:
        rng = np.random.default_rng(key)
        field = np.zeros((height, width, 3), dtype=np.float64)
        for cell in (8, 16, 32):
            coarse = rng.uniform(0.0, 1.0, size=(max(height // cell, 1) + 1,
                                                 max(width // cell, 1) + 1, 3))
            for c in range(3):
                plane = Image.fromarray((coarse[:, :, c] * 255).astype(np.uint8), "L")
                plane = plane.resize((width, height), Image.BILINEAR)
                field[:, :, c] += np.asarray(plane, dtype=np.float64) / 255.0
        field /= 3.0
        return np.clip(field, 0.0, 1.0).astype(np.float32)

    def txt2img(self, prompt, seed, width, height):
        return self._noise_field(_seed_from("txt2img", prompt, seed), width, height)

    def img2img(self, prompt, init, strength, seed, lora_path):
        if not 0.0 <= strength <= 1.0:
            raise RuntimeError_(f"strength must be in [0,1], got {strength}")
        lora_tag = ""
        if lora_path is not None:
            lora_tag = hashlib.sha256(Path(lora_path).read_bytes()).hexdigest()
        key = _seed_from("img2img", prompt, seed, lora_tag)
        texture = self._noise_field(key, init.shape[1], init.shape[0])
        out = (1.0 - strength) * init.astype(np.float64) \
            + strength * texture.astype(np.float64)
        return out.astype(np.float32)

    def segment(self, image, label):
        if label.lower() not in self.known_labels:
            return [], []
        luma = image.mean(axis=2).astype(np.float64)
        total = luma.sum()
        h, w = luma.shape
        if total <= 0:
            cy, cx = 0.5, 0.5
        else:
            ys, xs = np.mgrid[0:h, 0:w]
            cy = float((ys * luma).sum() / total + 0.5) / h
            cx = float((xs * luma).sum() / total + 0.5) / w
        half = 0.22
        x0, x1 = max(cx - half, 0.0), min(cx + half, 1.0)
        y0, y1 = max(cy - half, 0.0), min(cy + half, 1.0)
        detection = Detection(box=[x0, y0, x1, y1], score=0.92, label=label)
        mask = np.zeros((h, w), dtype=np.float32)
        mask[int(round(y0 * h)):int(round(y1 * h)),
             int(round(x0 * w)):int(round(x1 * w))] = 1.0
        return [detection], [mask]

    def embed(self, image, text, source):
        if image is not None:
            payload = hashlib.sha256(
                np.ascontiguousarray(image).tobytes()).hexdigest()
        else:
            payload = text or ""
        rng = np.random.default_rng(_seed_from("embed", source, payload))
        return rng.normal(size=EMBED_DIM).astype(np.float32)


class DiffusersRuntime:
    """SDXL + open-set segmentation over the same seam.

    Imports happen lazily so the adapter package works without the model
    stack; constructing this runtime without diffusers/transformers (or
    without weights) raises RuntimeError_ with the missing piece named.
    Generation uses a fixed-seed generator so a deterministic scheduler
    yields reproducible images.
    """

    def __init__(self, config: AdapterConfig):
        self.config = config
        self.deterministic = False
        try:
            import torch  # noqa: F401
            from diffusers import (  # noqa: F401
                AutoPipelineForImage2Image,
                AutoPipelineForText2Image,
            )
        except ImportError as exc:
            raise RuntimeError_(
                f"diffusers runtime requested but dependencies are missing: {exc}"
            ) from exc
        import torch
        from diffusers import AutoPipelineForImage2Image, AutoPipelineForText2Image

        self._torch = torch
        self._txt2img = AutoPipelineForText2Image.from_pretrained(
            config.model).to(config.device)
        self._img2img = AutoPipelineForImage2Image.from_pipe(self._txt2img)
        self._loaded_ref: str | None = None

    def _generator(self, seed: int):
        return self._torch.Generator(device=self.config.device).manual_seed(seed)

    def _apply_lora(self, lora_path: str | None) -> None:
        # non-destructive: unload before every call so a missing ref
        # restores the base model exactly
        if self._loaded_ref is not None:
            self._txt2img.unload_lora_weights()
            self._loaded_ref = None
        if lora_path is not None:
            self._txt2img.load_lora_weights(lora_path)
            self._loaded_ref = lora_path

    def txt2img(self, prompt, seed, width, height):
        image = self._txt2img(prompt, width=width, height=height,
                              generator=self._generator(seed)).images[0]
        return np.asarray(image, dtype=np.float32) / 255.0

    def img2img(self, prompt, init, strength, seed, lora_path):
        self._apply_lora(lora_path)
        pil = Image.fromarray((np.clip(init, 0, 1) * 255).astype(np.uint8))
        image = self._img2img(prompt, image=pil, strength=strength,
                              generator=self._generator(seed)).images[0]
        return np.asarray(image, dtype=np.float32) / 255.0

    def segment(self, image, label):
        try:
            from transformers import pipeline
        except ImportError as exc:
            raise RuntimeError_(f"segmentation stack unavailable: {exc}") from exc
        detector = pipeline("zero-shot-object-detection", device=self.config.device)
        pil = Image.fromarray((np.clip(image, 0, 1) * 255).astype(np.uint8))
        results = detector(pil, candidate_labels=[label])
        h, w = image.shape[:2]
        detections, masks = [], []
        for r in results:
            box = r["box"]
            x0, y0 = box["xmin"] / w, box["ymin"] / h
            x1, y1 = box["xmax"] / w, box["ymax"] / h
            detections.append(Detection(box=[x0, y0, x1, y1],
                                        score=float(r["score"]), label=label))
            mask = np.zeros((h, w), dtype=np.float32)
            mask[box["ymin"]:box["ymax"], box["xmin"]:box["xmax"]] = 1.0
            masks.append(mask)
        return detections, masks

    def embed(self, image, text, source):
        raise RuntimeError_(
            "embedding models are not bundled; configure a provider or use "
            "the procedural runtime"
        )


def build_runtime(config: AdapterConfig) -> Runtime:
    if config.runtime == "procedural":
        return ProceduralRuntime(config)
    return DiffusersRuntime(config)
