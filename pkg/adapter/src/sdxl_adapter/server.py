"""FastAPI application implementing the wire protocol.

Endpoints (JSON, images as base64 PNG):

* ``POST /txt2img  {prompt, seed, width, height} -> {image_b64_png}``
* ``POST /img2img  {prompt, init_image_b64_png, strength, seed, lora_ref}
  -> {image_b64_png}``
* ``POST /segment  {image_b64_png, label} -> {detections, masks}``
* ``POST /embed    {image_b64_png | text, source?} -> {vector, source}``

Malformed requests answer 400 and runtime failures 500, both with an
``{"error": ...}`` body.  The confidence threshold tau is applied on the
client side per protocol, so /segment returns every proposal.
"""

from __future__ import annotations

import base64
import io

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from PIL import Image
from pydantic import BaseModel

from .config import AdapterConfig
from .runtime import Runtime, RuntimeError_, build_runtime

__all__ = ["create_app"]

VALID_SOURCES = ("dino", "clip_image", "clip_text")


def _decode_image(b64: str) -> np.ndarray:
    try:
        pil = Image.open(io.BytesIO(base64.b64decode(b64)))
    except Exception as exc:
        raise ValueError(f"image payload is not a decodable PNG: {exc}") from exc
    if pil.mode in ("I;16", "I;16B", "I"):
        return (np.asarray(pil, dtype=np.float32) / 65535.0)[:, :, None].repeat(3, 2)
    return np.asarray(pil.convert("RGB"), dtype=np.float32) / 255.0


def _encode_image(arr: np.ndarray) -> str:
    data = np.clip(arr, 0.0, 1.0)
    if data.ndim == 2:
        pil = Image.fromarray(np.round(data * 255.0).astype(np.uint8), "L")
    else:
        pil = Image.fromarray(np.round(data * 255.0).astype(np.uint8), "RGB")
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class Txt2ImgRequest(BaseModel):
    prompt: str
    seed: int
    width: int = 512
    height: int = 512


class Img2ImgRequest(BaseModel):
    prompt: str
    init_image_b64_png: str
    strength: float
    seed: int
    lora_ref: str | None = None


class SegmentRequest(BaseModel):
    image_b64_png: str
    label: str


class EmbedRequest(BaseModel):
    image_b64_png: str | None = None
    text: str | None = None
    source: str | None = None


def create_app(config: AdapterConfig | None = None,
               runtime: Runtime | None = None) -> FastAPI:
    """Build the wire-protocol app over the configured runtime (injectable
    for tests)."""
    config = config or AdapterConfig()
    runtime = runtime or build_runtime(config)
    app = FastAPI(title="sdxl-adapter", version="0.1.0")

    @app.exception_handler(RequestValidationError)
    async def malformed(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.exception_handler(ValueError)
    async def bad_value(request: Request, exc: ValueError):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.exception_handler(KeyError)
    async def bad_ref(request: Request, exc: KeyError):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.exception_handler(RuntimeError_)
    async def runtime_failed(request: Request, exc: RuntimeError_):
        return JSONResponse(status_code=500, content={"error": str(exc)})

    @app.get("/health")
    def health():
        return {
            "status": "ok",
            "runtime": config.runtime,
            "deterministic": bool(getattr(runtime, "deterministic", False)),
            "model": config.model,
        }

    @app.post("/txt2img")
    def txt2img(request: Txt2ImgRequest):
        if request.width < 1 or request.height < 1:
            raise ValueError("width and height must be positive")
        image = runtime.txt2img(request.prompt, request.seed,
                                request.width, request.height)
        return {"image_b64_png": _encode_image(image)}

    @app.post("/img2img")
    def img2img(request: Img2ImgRequest):
        if not 0.0 <= request.strength <= 1.0:
            raise ValueError(f"strength must be in [0,1], got {request.strength}")
        init = _decode_image(request.init_image_b64_png)
        lora_path = config.resolve_lora(request.lora_ref)
        if request.strength == 0.0:
            # identity contract: nothing to denoise, echo the init image
            return {"image_b64_png": _encode_image(init)}
        image = runtime.img2img(request.prompt, init, request.strength,
                                request.seed, lora_path)
        return {"image_b64_png": _encode_image(image)}

    @app.post("/segment")
    def segment(request: SegmentRequest):
        image = _decode_image(request.image_b64_png)
        detections, masks = runtime.segment(image, request.label)
        return {
            "detections": [dict(d) for d in detections],
            "masks": [_encode_image(m) for m in masks],
        }

    @app.post("/embed")
    def embed(request: EmbedRequest):
        if (request.image_b64_png is None) == (request.text is None):
            raise ValueError("embed needs exactly one of image_b64_png or text")
        if request.image_b64_png is not None:
            source = request.source or "dino"
            image = _decode_image(request.image_b64_png)
            vector = runtime.embed(image, None, source)
        else:
            source = request.source or "clip_text"
            vector = runtime.embed(None, request.text, source)
        if source not in VALID_SOURCES:
            raise ValueError(f"unknown embedding source {source!r}")
        return {"vector": [float(v) for v in vector], "source": source}

    return app
