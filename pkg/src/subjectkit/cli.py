"""Command-line front end: generate, scout, blur, lora-report, evaluate.

Every subcommand accepts --backend as either a base URL of a wire-protocol
server or the literal "mock" for the deterministic in-process backend.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .backends import HttpBackendClient, MockBackend
from .image import (
    ImageBuffer,
    Mask,
    decay_blur,
    gaussian_blur,
    gaussian_kernel,
    read_png,
    to_luma,
    write_png,
)
from .lora import shift_bound
from .metrics import (
    EmbeddingVector,
    NiqeModel,
    cosine_similarity,
    fit_gaussian_model,
    mscn_features,
    niqe_distance,
    subject_similarity,
)
from .pipeline import BlurConfig, PipelineJob, SegmentationConfig, run_job
from .safetensors_io import discover_lora_pairs, read_store
from .tokens import default_candidates, rank_tokens

__all__ = ["main"]


def _make_backend(spec: str):
    if spec == "mock":
        return MockBackend()
    if spec.startswith("http://") or spec.startswith("https://"):
        return HttpBackendClient(spec)
    raise SystemExit(f"--backend must be 'mock' or an http(s) URL, got {spec!r}")


def _cmd_generate(args) -> int:
    job = PipelineJob(
        prompt=args.prompt,
        subject_name=args.subject,
        class_label=args.class_label,
        placeholder_token=args.token,
        lora_path=args.lora,
        seed=args.seed,
        blur=BlurConfig(mode=args.blur_mode, kernel_size=args.kernel_size,
                        sigma=args.sigma, lam=args.lam),
        segmentation=SegmentationConfig(tau=args.tau, lambda_sel=args.lambda_sel,
                                        dilate_radius=args.dilate_radius),
        img2img_strength=args.strength,
        width=args.width,
        height=args.height,
    )
    backend = _make_backend(args.backend)
    manifest = run_job(job, backend, args.out)
    print(json.dumps({"manifest": str(manifest.path),
                      "final": manifest.artifacts["final"]["path"],
                      "status": manifest.status}, indent=2))
    return 0


def _cmd_scout(args) -> int:
    if args.tokens == "default":
        candidates = default_candidates()
    else:
        candidates = [line.strip() for line in
                      Path(args.tokens).read_text(encoding="utf-8").splitlines()
                      if line.strip()]
    seeds = tuple(int(s) for s in args.seeds.split(","))
    backend = _make_backend(args.backend)
    reports = rank_tokens(candidates, backend, seeds=seeds,
                          template=args.template,
                          size=(args.size, args.size), out_dir=args.out)
    leaderboard = [{"token": r.token, "variability": r.variability}
                   for r in reports]
    print(json.dumps(leaderboard, indent=2))
    return 0


def _cmd_blur(args) -> int:
    img = read_png(args.image)
    kernel = gaussian_kernel(args.kernel_size, args.sigma)
    if args.mode == "gaussian":
        out = gaussian_blur(img, kernel)
    else:
        if args.mask is None:
            raise SystemExit("--mask is required for --mode decay")
        mask = Mask(to_luma(read_png(args.mask)).data[:, :, 0])
        out = decay_blur(img, mask, kernel, args.lam,
                         normalization=args.normalization)
    write_png(out, args.out, bit_depth=args.bit_depth)
    print(args.out)
    return 0


def _cmd_lora_report(args) -> int:
    store = read_store(args.file)
    discovery = discover_lora_pairs(store)
    for name in discovery.unmatched:
        print(f"unmatched candidate tensor: {name}", file=sys.stderr)
    for delta in discovery.deltas:
        report = shift_bound(delta, kappa=args.kappa)
        print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def _load_images(directory: str) -> list[ImageBuffer]:
    paths = sorted(Path(directory).glob("*.png"))
    if not paths:
        raise SystemExit(f"no PNG files in {directory}")
    return [read_png(p) for p in paths]


def _crop_to_mask(img: ImageBuffer, mask_path: Path) -> ImageBuffer:
    mask = Mask(to_luma(read_png(mask_path)).data[:, :, 0])
    ys, xs = np.nonzero(mask.binary())
    if ys.size == 0:
        return img
    return ImageBuffer(img.data[ys.min():ys.max() + 1, xs.min():xs.max() + 1, :])


def _embed_set(images, backend, source, masks_dir=None, names=None):
    vectors = []
    for i, img in enumerate(images):
        if masks_dir is not None and names is not None:
            mask_path = Path(masks_dir) / names[i]
            if mask_path.exists():
                img = _crop_to_mask(img, mask_path)
        vectors.append(backend.embed(image=img, source=source))
    return vectors


def _load_embedding_file(path: str) -> list[EmbeddingVector]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return [EmbeddingVector(values=np.asarray(v, dtype=np.float32),
                            source=data["source"])
            for v in data["vectors"]]


def _cmd_evaluate(args) -> int:
    backend = _make_backend(args.backend) if args.backend else None
    subject_crop = args.masks is not None

    def embeddings(path: str, source: str):
        if path.endswith(".json"):
            return [e for e in _load_embedding_file(path) if e.source == source] or None
        if backend is None:
            raise SystemExit("--backend is required when refs/gens are image directories")
        names = sorted(p.name for p in Path(path).glob("*.png"))
        imgs = _load_images(path)
        return _embed_set(imgs, backend, source,
                          masks_dir=args.masks, names=names)

    row: dict = {"subject_crop": subject_crop}
    refs_dino = embeddings(args.refs, "dino")
    gens_dino = embeddings(args.gens, "dino")
    row["dino"] = (subject_similarity(refs_dino, gens_dino)
                   if refs_dino and gens_dino else None)
    refs_clip = embeddings(args.refs, "clip_image")
    gens_clip = embeddings(args.gens, "clip_image")
    row["clip_i"] = (subject_similarity(refs_clip, gens_clip)
                     if refs_clip and gens_clip else None)
    if args.prompt and backend is not None and gens_clip:
        text_vec = backend.embed(text=args.prompt, source="clip_text")
        row["clip_t"] = float(np.mean([
            cosine_similarity(text_vec, g) for g in gens_clip
        ]))
    else:
        row["clip_t"] = None

    if not args.gens.endswith(".json"):
        gen_images = _load_images(args.gens)
        features = np.stack([mscn_features(to_luma(im)) for im in gen_images])
        row["mscn_feature_mean"] = features.mean(axis=0).tolist()
        row["mscn_feature_std"] = features.std(axis=0).tolist()
        if args.pristine:
            pristine = NiqeModel.from_dict(
                json.loads(Path(args.pristine).read_text(encoding="utf-8")))
            test_model = fit_gaussian_model(features)
            row["niqe_distance"] = niqe_distance(test_model, pristine)

    body = json.dumps(row, indent=2)
    if args.out:
        Path(args.out).write_text(body + "\n", encoding="utf-8")
    print(body)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="subjectkit",
        description="Deterministic stages of two-stage subject personalization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="run a two-stage personalization job")
    g.add_argument("--prompt", required=True)
    g.add_argument("--subject", required=True)
    g.add_argument("--class-label", required=True)
    g.add_argument("--token", required=True)
    g.add_argument("--lora", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--backend", default="mock")
    g.add_argument("--blur-mode", choices=("decay", "gaussian"), default="decay")
    g.add_argument("--kernel-size", type=int, default=151)
    g.add_argument("--sigma", type=float, default=100.0)
    g.add_argument("--lambda", dest="lam", type=float, default=5.0)
    g.add_argument("--tau", type=float, default=0.3)
    g.add_argument("--lambda-sel", type=float, default=0.0)
    g.add_argument("--dilate-radius", type=float, default=8.0)
    g.add_argument("--strength", type=float, default=0.75)
    g.add_argument("--width", type=int, default=512)
    g.add_argument("--height", type=int, default=512)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_generate)

    s = sub.add_parser("scout", help="rank placeholder tokens by variability")
    s.add_argument("--tokens", default="default",
                   help="'default' or a file with one token per line")
    s.add_argument("--seeds", default="0,1,2,3")
    s.add_argument("--template", default="a photo of {token}")
    s.add_argument("--size", type=int, default=512)
    s.add_argument("--backend", default="mock")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_scout)

    b = sub.add_parser("blur", help="blur an image (uniform or decay)")
    b.add_argument("--mode", choices=("gaussian", "decay"), default="decay")
    b.add_argument("--image", required=True)
    b.add_argument("--mask")
    b.add_argument("--kernel-size", type=int, default=151)
    b.add_argument("--sigma", type=float, default=100.0)
    b.add_argument("--lambda", dest="lam", type=float, default=5.0)
    b.add_argument("--normalization", choices=("diagonal", "pixels"),
                   default="diagonal")
    b.add_argument("--bit-depth", type=int, choices=(8, 16), default=16)
    b.add_argument("--out", required=True)
    b.set_defaults(func=_cmd_blur)

    r = sub.add_parser("lora-report",
                       help="discover LoRA pairs and print bound reports")
    r.add_argument("file")
    r.add_argument("--kappa", type=float, default=1.0)
    r.set_defaults(func=_cmd_lora_report)

    e = sub.add_parser("evaluate", help="embedding similarities and quality features")
    e.add_argument("--refs", required=True,
                   help="directory of PNGs or a JSON embedding file")
    e.add_argument("--gens", required=True,
                   help="directory of PNGs or a JSON embedding file")
    e.add_argument("--backend", default=None)
    e.add_argument("--prompt", default=None,
                   help="prompt text for the text-alignment column")
    e.add_argument("--masks", default=None,
                   help="directory of subject masks (matched by file name)")
    e.add_argument("--pristine", default=None,
                   help="JSON sidecar with a pristine Gaussian feature model")
    e.add_argument("--out", default=None)
    e.set_defaults(func=_cmd_evaluate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
