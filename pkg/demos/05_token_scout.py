"""Rank placeholder-token candidates by cross-seed output variability.

A good placeholder has no prior meaning: prompting with it yields a
different image per seed, so the mean pairwise SSIM is low and the
variability score 1 - mean(SSIM) is high.  The deterministic mock backend
stands in for the real generator here; "known" tokens are simulated with a
seed-independent response.
"""

import pathlib

from subjectkit.backends import MockBackend
from subjectkit.tokens import default_candidates, rank_tokens

out_dir = pathlib.Path(__file__).parent / "output" / "scout"

print(f"stock candidate list has {len(default_candidates())} tokens, e.g. "
      f"{default_candidates()[:4]}")


# pretend the model strongly associates 'sks' with a concept (constant
# output across seeds) while the stock candidates stay varied
def style(prompt: str, seed: int) -> str:
    return "constant" if "sks" in prompt else "procedural"


backend = MockBackend(style=style)
candidates = ["sks", "immen", "pasqu", "iklan"]

reports = rank_tokens(candidates, backend, seeds=(0, 1, 2, 3),
                      size=(128, 128), out_dir=out_dir)

print(f"{'token':<8} {'variability':>12}")
for report in reports:
    print(f"{report.token:<8} {report.variability:>12.4f}")

print(f"\nworst candidate (strong prior): {reports[-1].token}")
print(f"reports and per-seed images under {out_dir}")
