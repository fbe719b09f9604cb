"""Low-rank merge arithmetic and distributional-shift bound reporting.

A delta is applied as W + alpha * U @ V, never in place: the base weights
stay untouched so an adaptation can be loaded and unloaded freely.  The
bound report pairs the exact Frobenius norm of the materialized update
with its factor ceiling alpha*||U||_F*||V||_F and the Lipschitz-scaled
divergence ceiling kappa*||dW||_F.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .safetensors_io import LoraDelta

__all__ = ["BoundReport", "merge", "unmerge", "shift_bound", "verify_rank"]


@dataclass(frozen=True)
class BoundReport:
    """Shift bounds for one delta; all fields are >= 0 and
    delta_frobenius <= factor_bound up to accumulation error."""

    base_name: str
    delta_frobenius: float
    factor_bound: float
    kappa: float
    kl_bound: float

    def to_dict(self) -> dict:
        return {
            "base_name": self.base_name,
            "delta_frobenius": self.delta_frobenius,
            "factor_bound": self.factor_bound,
            "kappa": self.kappa,
            "kl_bound": self.kl_bound,
        }


def _check_dims(W: np.ndarray, delta: LoraDelta) -> None:
    if W.ndim != 2 or W.shape != delta.shape:
        raise ValueError(
            f"weight shape {W.shape} does not match delta shape {delta.shape} "
            f"(base {delta.base_name!r})"
        )


def materialize(delta: LoraDelta) -> np.ndarray:
    """Dense alpha * U @ V in float64."""
    return delta.alpha * (delta.U.astype(np.float64) @ delta.V.astype(np.float64))


def merge(W: np.ndarray, delta: LoraDelta) -> np.ndarray:
    """Return W + alpha * U @ V without mutating W.

    Arithmetic runs in float64 and the result is cast back to W's dtype.
    """
    W = np.asarray(W)
    _check_dims(W, delta)
    out = W.astype(np.float64) + materialize(delta)
    return out.astype(W.dtype) if W.dtype != np.float64 else out


def unmerge(W_merged: np.ndarray, delta: LoraDelta) -> np.ndarray:
    """Inverse of merge: subtract the materialized update."""
    W_merged = np.asarray(W_merged)
    _check_dims(W_merged, delta)
    out = W_merged.astype(np.float64) - materialize(delta)
    return out.astype(W_merged.dtype) if W_merged.dtype != np.float64 else out


def shift_bound(delta: LoraDelta, kappa: float = 1.0) -> BoundReport:
    """Frobenius norm of the materialized update and its analytic ceilings.

    kappa is a user-supplied Lipschitz constant (the bound holds for *some*
    kappa > 0; no value is estimated here), so kl_bound is parametric.
    """
    if kappa < 0:
        raise ValueError(f"kappa must be >= 0, got {kappa}")
    dense = materialize(delta)
    delta_f = float(np.linalg.norm(dense))
    factor = float(
        abs(delta.alpha)
        * np.linalg.norm(delta.U.astype(np.float64))
        * np.linalg.norm(delta.V.astype(np.float64))
    )
    return BoundReport(
        base_name=delta.base_name,
        delta_frobenius=delta_f,
        factor_bound=factor,
        kappa=float(kappa),
        kl_bound=float(kappa) * delta_f,
    )


def verify_rank(delta: LoraDelta, rel_tol: float = 1e-6) -> bool:
    """True iff the declared rank is feasible and numerically honest.

    Checks r <= min(d1, d2) and that singular values of the materialized
    update beyond index r stay below rel_tol * sigma_max.
    """
    d1, d2 = delta.shape
    if delta.rank > min(d1, d2):
        return False
    sigma = np.linalg.svd(materialize(delta), compute_uv=False)
    if sigma.size == 0 or sigma[0] == 0.0:
        return True
    return bool(np.all(sigma[delta.rank:] < rel_tol * sigma[0]))
