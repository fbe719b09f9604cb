"""Backend clients: the inference protocol, an HTTP client, and the
deterministic in-process mock used by the test suite and demos.

Wire protocol (JSON over HTTP, images as base64 PNG):

* ``POST /txt2img  {prompt, seed, width, height} -> {image_b64_png}``
* ``POST /img2img  {prompt, init_image_b64_png, strength, seed, lora_ref}
  -> {image_b64_png}``
* ``POST /segment  {image_b64_png, label} ->
  {detections: [{box: [4], score, label}], masks: [mask_b64_png]}``
* ``POST /embed    {image_b64_png | text, source?} -> {vector, source}``

Errors are non-200 responses with an ``{error}`` body.  The optional
``source`` request field selects the embedding space ("dino",
"clip_image", "clip_text"); it defaults to "dino" for images and
"clip_text" for text.
"""

from __future__ import annotations

import base64
import hashlib
import math
from typing import Protocol, runtime_checkable

import numpy as np
import requests

from .image import ImageBuffer, Mask, decode_png, encode_png
from .masks import Detection, MaskCandidate, rasterize_box
from .metrics import EmbeddingVector

__all__ = [
    "BackendClient",
    "BackendError",
    "HttpBackendClient",
    "MockBackend",
    "decode_image_b64",
    "encode_image_b64",
    "parse_embed_response",
    "parse_image_response",
    "parse_segment_response",
]

EMBED_DIM = 64


class BackendError(RuntimeError):
    """A backend request failed; carries the HTTP status when known."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


@runtime_checkable
class BackendClient(Protocol):
    """Inference surface the orchestrator depends on.

    Implementations set ``deterministic`` to declare that fixed inputs
    always produce identical outputs.
    """

    deterministic: bool

    def txt2img(self, prompt: str, seed: int,
                size: tuple[int, int] = (512, 512)) -> ImageBuffer: ...

    def img2img(self, prompt: str, init_image: ImageBuffer, strength: float,
                seed: int, lora_ref: str | None = None) -> ImageBuffer: ...

    def segment(self, image: ImageBuffer, label: str
                ) -> tuple[list[Detection], list[MaskCandidate]]: ...

    def embed(self, image: ImageBuffer | None = None, text: str | None = None,
              source: str | None = None) -> EmbeddingVector: ...


def encode_image_b64(img: ImageBuffer, bit_depth: int = 8) -> str:
    """PNG-encode an image buffer to a base64 string (8-bit on the wire)."""
    return base64.b64encode(encode_png(img, bit_depth=bit_depth)).decode("ascii")


def decode_image_b64(payload: str) -> ImageBuffer:
    return decode_png(base64.b64decode(payload))


def parse_image_response(payload: dict) -> ImageBuffer:
    if "image_b64_png" not in payload:
        raise BackendError(f"response missing image_b64_png: keys {sorted(payload)}")
    return decode_image_b64(payload["image_b64_png"])


def parse_segment_response(payload: dict) -> tuple[list[Detection], list[MaskCandidate]]:
    dets = [
        Detection(box=tuple(float(v) for v in d["box"]),
                  score=float(d["score"]), label=str(d["label"]))
        for d in payload.get("detections", [])
    ]
    cands = [
        MaskCandidate(mask=Mask(decode_image_b64(m).data[:, :, 0]))
        for m in payload.get("masks", [])
    ]
    return dets, cands


def parse_embed_response(payload: dict) -> EmbeddingVector:
    return EmbeddingVector(values=np.asarray(payload["vector"], dtype=np.float32),
                           source=str(payload["source"]))


class HttpBackendClient:
    """Thin requests-based client for the wire protocol."""

    def __init__(self, base_url: str, timeout: float = 300.0,
                 deterministic: bool = False, session=None):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.deterministic = deterministic
        self._session = session or requests.Session()

    def _post(self, endpoint: str, body: dict) -> dict:
        url = f"{self.base_url}/{endpoint}"
        resp = self._session.post(url, json=body, timeout=self.timeout)
        if resp.status_code != 200:
            try:
                message = resp.json().get("error", resp.text)
            except ValueError:
                message = resp.text
            raise BackendError(f"{endpoint}: {message}", status=resp.status_code)
        return resp.json()

    def txt2img(self, prompt, seed, size=(512, 512)):
        body = {"prompt": prompt, "seed": int(seed),
                "width": int(size[0]), "height": int(size[1])}
        return parse_image_response(self._post("txt2img", body))

    def img2img(self, prompt, init_image, strength, seed, lora_ref=None):
        body = {
            "prompt": prompt,
            "init_image_b64_png": encode_image_b64(init_image),
            "strength": float(strength),
            "seed": int(seed),
            "lora_ref": lora_ref,
        }
        return parse_image_response(self._post("img2img", body))

    def segment(self, image, label):
        body = {"image_b64_png": encode_image_b64(image), "label": label}
        return parse_segment_response(self._post("segment", body))

    def embed(self, image=None, text=None, source=None):
        if (image is None) == (text is None):
            raise ValueError("embed needs exactly one of image or text")
        body: dict = {}
        if image is not None:
            body["image_b64_png"] = encode_image_b64(image)
        else:
            body["text"] = text
        if source is not None:
            body["source"] = source
        return parse_embed_response(self._post("embed", body))


def _digest_seed(*parts) -> int:
    h = hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


class MockBackend:
    """Fully deterministic procedural backend for tests and demos.

    txt2img styles:

    * "procedural" (default): smooth sinusoid field keyed by (prompt, seed);
    * "noise": iid uniform noise keyed by (prompt, seed);
    * "constant": field keyed by the prompt only, identical across seeds.

    ``style`` may also be a callable ``(prompt, seed) -> style name``.
    segment() serves the configured detection/mask fixtures; by default one
    centered box at score 0.9 with its rasterization as the single mask.
    """

    DEFAULT_BOX = (0.25, 0.25, 0.75, 0.75)

    def __init__(self, style="procedural",
                 detections: list[Detection] | None = None,
                 segment_masks: list[Mask] | None = None,
                 embed_dim: int = EMBED_DIM):
        self.style = style
        self._detections = detections
        self._segment_masks = segment_masks
        self.embed_dim = embed_dim
        self.deterministic = True

    def _style_for(self, prompt: str, seed: int) -> str:
        if callable(self.style):
            return self.style(prompt, seed)
        return self.style

    def _field(self, key: str, size: tuple[int, int]) -> np.ndarray:
        w, h = size
        rng = np.random.default_rng(_digest_seed("field", key))
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        ys /= max(h, 1)
        xs /= max(w, 1)
        out = np.zeros((h, w, 3))
        for c in range(3):
            acc = np.zeros((h, w))
            for _ in range(4):
                fx, fy = rng.uniform(0.5, 4.0, size=2)
                phase = rng.uniform(0.0, 2.0 * math.pi)
                amp = rng.uniform(0.5, 1.0)
                acc += amp * np.sin(2.0 * math.pi * (fx * xs + fy * ys) + phase)
            out[:, :, c] = acc
        out -= out.min()
        peak = out.max()
        if peak > 0:
            out /= peak
        return 0.05 + 0.9 * out

    def txt2img(self, prompt, seed, size=(512, 512)):
        style = self._style_for(prompt, seed)
        w, h = size
        if style == "constant":
            return ImageBuffer(self._field(f"txt2img|{prompt}", size).astype(np.float32))
        if style == "noise":
            rng = np.random.default_rng(_digest_seed("txt2img-noise", prompt, seed))
            return ImageBuffer(rng.uniform(0.0, 1.0, size=(h, w, 3)).astype(np.float32))
        return ImageBuffer(
            self._field(f"txt2img|{prompt}|{seed}", size).astype(np.float32)
        )

    def img2img(self, prompt, init_image, strength, seed, lora_ref=None):
        if not 0.0 <= strength <= 1.0:
            raise BackendError(f"strength must be in [0,1], got {strength}")
        size = (init_image.width, init_image.height)
        texture = self._field(f"img2img|{prompt}|{seed}|{lora_ref}", size)
        out = (1.0 - strength) * init_image.data.astype(np.float64) \
            + strength * texture
        return ImageBuffer(out.astype(np.float32))

    def segment(self, image, label):
        if self._detections is not None:
            dets = list(self._detections)
        else:
            dets = [Detection(box=self.DEFAULT_BOX, score=0.9, label=label)]
        if not dets:
            return [], []
        if self._segment_masks is not None:
            masks = list(self._segment_masks)
        else:
            grid = rasterize_box(dets[0].box, image.height, image.width)
            masks = [Mask(grid.astype(np.float32))]
        return dets, [MaskCandidate(mask=m) for m in masks]

    def embed(self, image=None, text=None, source=None):
        if (image is None) == (text is None):
            raise ValueError("embed needs exactly one of image or text")
        if image is not None:
            src = source or "dino"
            payload = hashlib.sha256(
                np.ascontiguousarray(image.data).tobytes()
            ).hexdigest()
        else:
            src = source or "clip_text"
            payload = text
        rng = np.random.default_rng(_digest_seed("embed", src, payload))
        values = rng.uniform(-1.0, 1.0, size=self.embed_dim).astype(np.float32)
        return EmbeddingVector(values=values, source=src)
