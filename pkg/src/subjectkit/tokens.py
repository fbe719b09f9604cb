"""Rank candidate placeholder tokens by cross-seed output variability.

A token with no prior association produces wildly different images across
seeds for the same prompt, while a token the model "knows" keeps producing
the same concept.  Variability is operationalized as 1 minus the mean
pairwise SSIM over the per-seed generations (luma, 256x256), so it lives
in [0, 2] and higher means a better placeholder candidate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .backends import BackendClient
from .image import ImageBuffer, ssim, to_luma, write_png

__all__ = [
    "DEFAULT_SEEDS",
    "DEFAULT_TEMPLATE",
    "SSIM_RESOLUTION",
    "TokenReport",
    "TokenScoutError",
    "default_candidates",
    "rank_tokens",
    "score_token",
]

DEFAULT_TEMPLATE = "a photo of {token}"
DEFAULT_SEEDS = (0, 1, 2, 3)
SSIM_RESOLUTION = 256

# 28 short low-prior tokenizer entries that proved safe placeholder names
_CANDIDATE_TOKENS = (
    "immen", "pasqu", "iklan", "rapi",
    "bhar", "ellu", "ffin", "icop",
    "aben", "mmor", "psal", "phyl",
    "rrrr", "wozni", "geaux", "koval",
    "ayles", "mccre", "fortn", "prote",
    "pascu", "lisam", "percu", "alfar",
    "insom", "offro", "syour", "redon",
)


class TokenScoutError(RuntimeError):
    """Scoring failed; per-seed failures are listed in the message."""


def default_candidates() -> list[str]:
    """The stock list of low-prior placeholder token candidates."""
    return list(_CANDIDATE_TOKENS)


@dataclass
class TokenReport:
    """Cross-seed variability evidence for one candidate token."""

    token: str
    seeds: tuple[int, ...]
    pairwise_ssim: np.ndarray
    variability: float
    images: list[str] = field(default_factory=list)
    ssim_resolution: int = SSIM_RESOLUTION

    def to_dict(self) -> dict:
        return {
            "token": self.token,
            "seeds": list(self.seeds),
            "pairwise_ssim": self.pairwise_ssim.tolist(),
            "variability": self.variability,
            "images": self.images,
            "ssim_resolution": self.ssim_resolution,
        }


def _quantize16(img: ImageBuffer) -> ImageBuffer:
    """Snap samples to the 16-bit grid so on-disk copies decode identically."""
    q = np.round(np.clip(img.data.astype(np.float64), 0.0, 1.0) * 65535.0)
    return ImageBuffer((q / 65535.0).astype(np.float32))


def _ssim_input(img: ImageBuffer) -> ImageBuffer:
    luma = to_luma(img)
    pil = Image.fromarray(luma.data[:, :, 0], mode="F")
    resized = pil.resize((SSIM_RESOLUTION, SSIM_RESOLUTION), Image.BILINEAR)
    return ImageBuffer(np.asarray(resized, dtype=np.float32))


def score_token(token: str, backend: BackendClient,
                seeds=DEFAULT_SEEDS, template: str = DEFAULT_TEMPLATE,
                size: tuple[int, int] = (512, 512),
                out_dir: Path | str | None = None) -> TokenReport:
    """Generate once per seed and score all unordered image pairs with SSIM.

    Per-seed backend failures are tolerated while at least two generations
    succeed; below that the failures are raised with their seed context.
    """
    if "{token}" not in template:
        raise ValueError("template must contain a {token} placeholder")
    seeds = tuple(int(s) for s in seeds)
    if len(seeds) < 2:
        raise ValueError(f"need at least 2 seeds, got {len(seeds)}")
    prompt = template.format(token=token)

    generated: list[tuple[int, ImageBuffer]] = []
    failures: list[str] = []
    for seed in seeds:
        try:
            img = backend.txt2img(prompt, seed, size=size)
        except Exception as exc:
            failures.append(f"seed {seed}: {exc}")
            continue
        generated.append((seed, _quantize16(img)))
    if len(generated) < 2:
        detail = "; ".join(failures) or "no seeds supplied"
        raise TokenScoutError(
            f"token {token!r}: fewer than 2 successful generations ({detail})"
        )

    image_paths: list[str] = []
    if out_dir is not None:
        token_dir = Path(out_dir) / token
        token_dir.mkdir(parents=True, exist_ok=True)
        for seed, img in generated:
            path = token_dir / f"seed_{seed}.png"
            write_png(img, path, bit_depth=16)
            image_paths.append(str(path))

    luma = [_ssim_input(img) for _, img in generated]
    n = len(luma)
    matrix = np.eye(n, dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            value = ssim(luma[i], luma[j])
            matrix[i, j] = matrix[j, i] = value
    off_diagonal = matrix[~np.eye(n, dtype=bool)]
    variability = 1.0 - float(off_diagonal.mean())
    return TokenReport(
        token=token,
        seeds=tuple(seed for seed, _ in generated),
        pairwise_ssim=matrix,
        variability=variability,
        images=image_paths,
    )


def rank_tokens(candidates, backend: BackendClient,
                seeds=DEFAULT_SEEDS, template: str = DEFAULT_TEMPLATE,
                size: tuple[int, int] = (512, 512),
                out_dir: Path | str | None = None) -> list[TokenReport]:
    """Score every candidate and sort by variability (descending, then token).

    Candidates whose scoring fails outright are skipped; if every candidate
    fails, the collected failures are raised.
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("no candidate tokens supplied")
    reports: list[TokenReport] = []
    failures: list[str] = []
    for token in candidates:
        try:
            reports.append(score_token(token, backend, seeds=seeds,
                                        template=template, size=size,
                                        out_dir=out_dir))
        except TokenScoutError as exc:
            failures.append(str(exc))
    if not reports:
        raise TokenScoutError(
            "all candidates failed: " + "; ".join(failures)
        )
    reports.sort(key=lambda r: (-r.variability, r.token))
    if out_dir is not None:
        leaderboard = Path(out_dir) / "leaderboard.json"
        leaderboard.parent.mkdir(parents=True, exist_ok=True)
        with open(leaderboard, "w", encoding="utf-8") as fh:
            json.dump([r.to_dict() for r in reports], fh, indent=2)
    return reports
