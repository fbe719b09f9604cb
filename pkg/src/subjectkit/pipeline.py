"""Two-stage generation driver: prompt rewriting, backend calls, blur
insertion, and audited manifest persistence.

Stage 1 renders a generic scene with the subject swapped for its class
label on the *unmodified* model.  The subject region is then located via
the segmentation backend, grown, and blurred; stage 2 re-renders from that
blurred init via img2img with the subject's low-rank weights attached and
the placeholder token in the prompt.  Every backend call and artifact is
recorded in a manifest with content hashes so a run can be replayed and
verified bit for bit against a deterministic backend.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .backends import BackendClient
from .image import (
    ImageBuffer,
    decay_blur,
    encode_png,
    gaussian_blur,
    gaussian_kernel,
    write_png,
)
from .masks import DEFAULT_TAU, filter_detections, select_mask, dilate
from .safetensors_io import read_store

__all__ = [
    "BlurConfig",
    "Manifest",
    "ManifestIntegrityError",
    "PipelineError",
    "PipelineJob",
    "RecordingBackend",
    "ReplayMismatchError",
    "SegmentationConfig",
    "SubjectNotFoundError",
    "count_whole_word",
    "load_manifest",
    "replay_job",
    "rewrite_stage1",
    "rewrite_stage2",
    "run_job",
]

MANIFEST_NAME = "manifest.json"


class PipelineError(RuntimeError):
    """A stage failed; the message carries the stage context."""


class SubjectNotFoundError(PipelineError):
    """No detection survived the confidence threshold in the base image."""

    def __init__(self, message: str, manifest_path: Path | None = None):
        super().__init__(message)
        self.manifest_path = manifest_path


class ManifestIntegrityError(PipelineError):
    """A persisted artifact no longer matches its recorded hash."""


class ReplayMismatchError(PipelineError):
    """Replaying a manifest did not reproduce the recorded hashes."""


def count_whole_word(text: str, word: str) -> int:
    return len(re.findall(rf"(?<!\w){re.escape(word)}(?!\w)", text))


def _rewrite(prompt: str, target: str, replacement: str) -> str:
    pattern = rf"(?<!\w){re.escape(target)}(?!\w)"
    rewritten, count = re.subn(pattern, lambda _m: replacement, prompt)
    if count == 0:
        raise ValueError(f"{target!r} does not occur as a whole word in {prompt!r}")
    return rewritten


def rewrite_stage1(prompt: str, subject_name: str, class_label: str) -> str:
    """Swap every whole-word subject occurrence for the class label."""
    return _rewrite(prompt, subject_name, class_label)


def rewrite_stage2(prompt: str, subject_name: str, placeholder: str) -> str:
    """Swap every whole-word subject occurrence for the placeholder token."""
    return _rewrite(prompt, subject_name, placeholder)


@dataclass(frozen=True)
class BlurConfig:
    mode: str = "decay"           # "decay" | "gaussian"
    kernel_size: int = 151
    sigma: float = 100.0
    lam: float = 5.0
    normalization: str = "diagonal"

    def __post_init__(self):
        if self.mode not in ("decay", "gaussian"):
            raise ValueError(f"blur mode must be 'decay' or 'gaussian', got {self.mode!r}")
        if self.kernel_size % 2 != 1 or self.kernel_size < 1:
            raise ValueError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")


@dataclass(frozen=True)
class SegmentationConfig:
    tau: float = DEFAULT_TAU
    lambda_sel: float = 0.0
    dilate_radius: float = 8.0

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0,1], got {self.tau}")
        if self.lambda_sel < 0 or self.dilate_radius < 0:
            raise ValueError("lambda_sel and dilate_radius must be >= 0")


@dataclass(frozen=True)
class PipelineJob:
    """Declarative input for one two-stage run."""

    prompt: str
    subject_name: str
    class_label: str
    placeholder_token: str
    lora_path: str
    seed: int
    blur: BlurConfig = BlurConfig()
    segmentation: SegmentationConfig = SegmentationConfig()
    img2img_strength: float = 0.75
    width: int = 512
    height: int = 512

    def __post_init__(self):
        if count_whole_word(self.prompt, self.subject_name) == 0:
            raise ValueError(
                f"subject {self.subject_name!r} does not occur in the prompt"
            )
        if not self.placeholder_token:
            raise ValueError("placeholder_token must be nonempty")
        if not self.class_label:
            raise ValueError("class_label must be nonempty")
        if not 0.0 < self.img2img_strength <= 1.0:
            raise ValueError(
                f"img2img_strength must be in (0,1], got {self.img2img_strength}"
            )
        if self.width < 1 or self.height < 1:
            raise ValueError("width and height must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineJob":
        d = dict(d)
        d["blur"] = BlurConfig(**d.get("blur", {}))
        d["segmentation"] = SegmentationConfig(**d.get("segmentation", {}))
        return cls(**d)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _digest_json(obj) -> str:
    return _sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8"))


def _digest_image(img: ImageBuffer) -> str:
    return _sha256(encode_png(img, bit_depth=16))


class RecordingBackend:
    """Wraps a client and logs one digest pair per call, in call order."""

    def __init__(self, inner: BackendClient):
        self.inner = inner
        self.calls: list[dict] = []
        self.deterministic = getattr(inner, "deterministic", False)

    def _log(self, endpoint: str, request: dict, response_digest: str) -> None:
        self.calls.append({
            "endpoint": endpoint,
            "request_sha256": _digest_json({"endpoint": endpoint, **request}),
            "response_sha256": response_digest,
        })

    def txt2img(self, prompt, seed, size=(512, 512)):
        img = self.inner.txt2img(prompt, seed, size=size)
        self._log("txt2img",
                  {"prompt": prompt, "seed": seed, "width": size[0], "height": size[1]},
                  _digest_image(img))
        return img

    def segment(self, image, label):
        dets, cands = self.inner.segment(image, label)
        response = {
            "detections": [
                {"box": list(d.box), "score": d.score, "label": d.label}
                for d in dets
            ],
            "masks": [_digest_image(ImageBuffer(c.mask.data)) for c in cands],
        }
        self._log("segment", {"image": _digest_image(image), "label": label},
                  _digest_json(response))
        return dets, cands

    def img2img(self, prompt, init_image, strength, seed, lora_ref=None):
        img = self.inner.img2img(prompt, init_image, strength, seed, lora_ref=lora_ref)
        self._log("img2img",
                  {"prompt": prompt, "init_image": _digest_image(init_image),
                   "strength": strength, "seed": seed, "lora_ref": lora_ref},
                  _digest_image(img))
        return img

    def embed(self, image=None, text=None, source=None):
        vec = self.inner.embed(image=image, text=text, source=source)
        request = {"source": source}
        if image is not None:
            request["image"] = _digest_image(image)
        else:
            request["text"] = text
        self._log("embed", request, _digest_json(vec.values.tolist()))
        return vec


@dataclass
class Manifest:
    """The audited record of one run; everything needed to replay it."""

    job: dict
    stage1_prompt: str
    stage2_prompt: str | None
    artifacts: dict[str, dict]
    backend_calls: list[dict]
    timings: dict[str, float]
    status: str
    directory: Path = field(default=Path("."), compare=False)

    def to_dict(self) -> dict:
        return {
            "job": self.job,
            "stage1_prompt": self.stage1_prompt,
            "stage2_prompt": self.stage2_prompt,
            "artifacts": self.artifacts,
            "backend_calls": self.backend_calls,
            "timings": self.timings,
            "status": self.status,
        }

    @property
    def path(self) -> Path:
        return self.directory / MANIFEST_NAME

    def save(self) -> Path:
        """Atomic write: temp file in the same directory, then rename."""
        body = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        tmp = self.directory / (MANIFEST_NAME + ".tmp")
        tmp.write_text(body, encoding="utf-8")
        os.replace(tmp, self.path)
        return self.path


def load_manifest(path, verify: bool = True) -> Manifest:
    """Load a manifest; with verify, re-hash every artifact on disk."""
    path = Path(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    manifest = Manifest(directory=path.parent, **data)
    if verify:
        for name, ref in manifest.artifacts.items():
            artifact_path = path.parent / ref["path"]
            if not artifact_path.exists():
                raise ManifestIntegrityError(f"artifact {name!r} missing: {artifact_path}")
            actual = _sha256(artifact_path.read_bytes())
            if actual != ref["sha256"]:
                raise ManifestIntegrityError(
                    f"artifact {name!r} hash mismatch: recorded {ref['sha256'][:12]}..., "
                    f"found {actual[:12]}..."
                )
    return manifest


def _persist(img: ImageBuffer, directory: Path, name: str) -> dict:
    path = directory / f"{name}.png"
    write_png(img, path, bit_depth=16)
    return {"path": path.name, "sha256": _sha256(path.read_bytes())}


def run_job(job: PipelineJob, backend: BackendClient, out_dir) -> Manifest:
    """Execute both stages and persist the audited manifest.

    Artifacts land in out_dir as 16-bit PNGs (base_image, mask, blurred,
    final) next to manifest.json.  Raises SubjectNotFoundError (with the
    partial manifest persisted) when no detection survives tau.
    """
    directory = Path(out_dir)
    directory.mkdir(parents=True, exist_ok=True)
    read_store(job.lora_path)  # fail before any backend spend if unreadable

    recorder = RecordingBackend(backend)
    timings: dict[str, float] = {}
    t_start = time.perf_counter()

    stage1_prompt = rewrite_stage1(job.prompt, job.subject_name, job.class_label)
    t0 = time.perf_counter()
    base = recorder.txt2img(stage1_prompt, job.seed, size=(job.width, job.height))
    timings["stage1"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    detections, candidates = recorder.segment(base, job.class_label)
    timings["segment"] = time.perf_counter() - t0
    kept = filter_detections(detections, job.segmentation.tau)
    if not kept:
        artifacts = {"base_image": _persist(base, directory, "base_image")}
        timings["total"] = time.perf_counter() - t_start
        manifest = Manifest(
            job=job.to_dict(), stage1_prompt=stage1_prompt, stage2_prompt=None,
            artifacts=artifacts, backend_calls=recorder.calls, timings=timings,
            status="no_subject", directory=directory,
        )
        manifest.save()
        raise SubjectNotFoundError(
            f"subject not found in base image: no detection scored >= "
            f"tau={job.segmentation.tau}", manifest_path=manifest.path,
        )

    best = kept[0]
    for det in kept[1:]:
        if det.score > best.score:
            best = det

    t0 = time.perf_counter()
    if not candidates:
        raise PipelineError("segment stage returned detections but no mask candidates")
    selected = select_mask(candidates, best.box, job.segmentation.lambda_sel)
    mask = dilate(selected.mask, job.segmentation.dilate_radius)
    kernel = gaussian_kernel(job.blur.kernel_size, job.blur.sigma)
    if job.blur.mode == "gaussian":
        blurred = gaussian_blur(base, kernel)
    else:
        blurred = decay_blur(base, mask, kernel, job.blur.lam,
                             normalization=job.blur.normalization)
    timings["blur"] = time.perf_counter() - t0

    stage2_prompt = rewrite_stage2(job.prompt, job.subject_name, job.placeholder_token)
    t0 = time.perf_counter()
    final = recorder.img2img(stage2_prompt, blurred, job.img2img_strength,
                             job.seed, lora_ref=str(job.lora_path))
    timings["stage2"] = time.perf_counter() - t0

    artifacts = {
        "base_image": _persist(base, directory, "base_image"),
        "mask": _persist(ImageBuffer(mask.data), directory, "mask"),
        "blurred": _persist(blurred, directory, "blurred"),
        "final": _persist(final, directory, "final"),
    }
    timings["total"] = time.perf_counter() - t_start
    manifest = Manifest(
        job=job.to_dict(), stage1_prompt=stage1_prompt, stage2_prompt=stage2_prompt,
        artifacts=artifacts, backend_calls=recorder.calls, timings=timings,
        status="complete", directory=directory,
    )
    manifest.save()
    return manifest


def replay_job(manifest_path, backend: BackendClient, out_dir) -> Manifest:
    """Re-execute a recorded job and verify it reproduces the manifest.

    Raises ReplayMismatchError if prompts or artifact hashes diverge.
    """
    recorded = load_manifest(manifest_path, verify=True)
    job = PipelineJob.from_dict(recorded.job)
    replayed = run_job(job, backend, out_dir)
    problems = []
    if replayed.stage1_prompt != recorded.stage1_prompt:
        problems.append("stage1_prompt differs")
    if replayed.stage2_prompt != recorded.stage2_prompt:
        problems.append("stage2_prompt differs")
    for name, ref in recorded.artifacts.items():
        got = replayed.artifacts.get(name)
        if got is None or got["sha256"] != ref["sha256"]:
            problems.append(f"artifact {name!r} hash differs")
    if problems:
        raise ReplayMismatchError("; ".join(problems))
    return replayed
