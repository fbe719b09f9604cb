"""Evaluate subject preservation and no-reference quality features.

Embedding vectors come from the backend (here the deterministic mock);
the harness owns the similarity math.  The quality side computes MSCN
coefficients natively and compares Gaussian feature models with the
Mahalanobis-style model distance.
"""

import numpy as np

from subjectkit.backends import MockBackend
from subjectkit.image import ImageBuffer, to_luma
from subjectkit.metrics import (
    cosine_similarity,
    fit_gaussian_model,
    mscn,
    mscn_features,
    niqe_distance,
    subject_similarity,
)

backend = MockBackend()
rng = np.random.default_rng(4)

refs = [backend.txt2img("reference subject", seed, size=(96, 96)) for seed in range(10)]
gens = [backend.txt2img("generated subject", seed, size=(96, 96)) for seed in range(12)]

ref_vecs = [backend.embed(image=im, source="dino") for im in refs]
gen_vecs = [backend.embed(image=im, source="dino") for im in gens]
print(f"DINO subject similarity: {subject_similarity(ref_vecs, gen_vecs):+.4f}")

text_vec = backend.embed(text="a photo of immen", source="clip_text")
gen_clip = [backend.embed(image=im, source="clip_image") for im in gens]
clip_t = float(np.mean([cosine_similarity(text_vec, g) for g in gen_clip]))
print(f"text alignment (CLIP-T style): {clip_t:+.4f}")

# MSCN coefficients: roughly zero-mean, unit-ish spread on natural images
luma = to_luma(gens[0])
coeffs = mscn(luma)
print(f"MSCN mean {float(coeffs.data.mean()):+.4f}, "
      f"std {float(coeffs.data.std()):.4f}")

flat = ImageBuffer(np.full((64, 64), 0.5, dtype=np.float32))
print(f"MSCN of a constant plane is identically zero: "
      f"{bool(np.all(mscn(flat).data == 0.0))}")

# Gaussian feature models for two image populations
feats_a = np.stack([mscn_features(to_luma(im)) for im in gens])
feats_b = np.stack([mscn_features(to_luma(im)) for im in refs])
model_a = fit_gaussian_model(feats_a)
model_b = fit_gaussian_model(feats_b)
print(f"feature-model distance gens vs refs: {niqe_distance(model_a, model_b):.4f}")
print(f"feature-model distance gens vs gens: {niqe_distance(model_a, model_a):.4f}")
