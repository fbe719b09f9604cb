"""Merge a low-rank update into a weight matrix and report shift bounds.

The update never touches the base weights: merge returns a new matrix and
unmerge recovers the original, which is what lets one model serve many
subjects by loading and unloading adapters.
"""

import numpy as np

from subjectkit.lora import merge, shift_bound, unmerge, verify_rank
from subjectkit.safetensors_io import LoraDelta

rng = np.random.default_rng(1)

d1, d2, r = 64, 48, 4
W = rng.normal(size=(d1, d2))
delta = LoraDelta(
    base_name="unet.attn.to_q.weight",
    U=rng.normal(size=(d1, r)) * 0.1,
    V=rng.normal(size=(r, d2)) * 0.1,
    alpha=1.0,
    rank=r,
)

merged = merge(W, delta)
print(f"merged {d1}x{d2} weight with a rank-{r} update; "
      f"max |change| = {np.abs(merged - W).max():.5f}")

recovered = unmerge(merged, delta)
print(f"unmerge round-trip error: {np.abs(recovered - W).max():.2e}")

print(f"declared rank honest: {verify_rank(delta)}")

report = shift_bound(delta, kappa=1.0)
print(f"||dW||_F        = {report.delta_frobenius:.6f}")
print(f"alpha*|U||V|    = {report.factor_bound:.6f}  (factor ceiling)")
print(f"kappa*||dW||_F  = {report.kl_bound:.6f}  (divergence ceiling, kappa=1)")
assert report.delta_frobenius <= report.factor_bound + 1e-9

# a rank-1 update achieves the ceiling exactly
rank1 = LoraDelta("w", U=rng.normal(size=(d1, 1)), V=rng.normal(size=(1, d2)),
                  alpha=1.0, rank=1)
r1 = shift_bound(rank1)
print(f"rank-1 tightness: {r1.delta_frobenius:.6f} vs {r1.factor_bound:.6f}")
