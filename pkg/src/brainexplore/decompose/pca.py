from __future__ import annotations

from typing import Sequence

import numpy as np

from ..core import Decomposition


def _check_threshold(t: float) -> float:
    t = float(t)
    if not 0.0 < t <= 1.0:
        raise ValueError(f"variance threshold must lie in (0, 1], got {t}")
    return t


def centered_svd(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Mean, left vectors, singular values and right vectors of the centered data.

    Singular values below the numerical-rank tolerance are set to zero.
    Right vectors are sign-fixed so each row's largest-magnitude entry is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("PCA needs a 2-D matrix with at least two rows")
    if not np.all(np.isfinite(x)):
        raise np.linalg.LinAlgError("SVD input contains non-finite values")
    mean = x.mean(axis=0)
    u, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    tol = s.max(initial=0.0) * max(x.shape) * np.finfo(np.float64).eps
    s = np.where(s > tol, s, 0.0)
    flip = np.sign(vt[np.arange(vt.shape[0]), np.abs(vt).argmax(axis=1)])
    flip[flip == 0] = 1.0
    return mean, u * flip, s, vt * flip[:, None]


def explained_variance_ratio(singular_values: np.ndarray) -> np.ndarray:
    var = np.asarray(singular_values, dtype=np.float64) ** 2
    total = var.sum()
    if total == 0.0:
        raise ValueError("input has zero variance")
    return var / total


def k_for_thresholds(singular_values: np.ndarray, thresholds: Sequence[float]) -> list[int]:
    ratio = explained_variance_ratio(singular_values)
    cum = np.cumsum(ratio)
    rank = int(np.count_nonzero(singular_values))
    out = []
    for t in thresholds:
        t = _check_threshold(t)
        # Small slack so threshold 1.0 lands on the numerical rank.
        k = int(np.searchsorted(cum, t - 1e-12) + 1)
        out.append(min(k, rank))
    return out


def variance_matched_K(x: np.ndarray, thresholds: Sequence[float]) -> list[int]:
    """Smallest component count reaching each cumulative explained-variance threshold."""
    _, _, s, _ = centered_svd(x)
    return k_for_thresholds(s, thresholds)


def fit_pca(x: np.ndarray, thresholds: Sequence[float], roi: str = "roi",
            provenance: Sequence[str] = ("measured",)) -> list[Decomposition]:
    mean, _, s, vt = centered_svd(x)
    ratio = explained_variance_ratio(s)
    out = []
    for t, k in zip(thresholds, k_for_thresholds(s, thresholds)):
        base = vt[:k]
        comps = np.empty((2 * k, base.shape[1]))
        comps[0::2] = base
        comps[1::2] = -base
        out.append(Decomposition(
            "pca", roi, comps,
            hyperparams={"variance_threshold": float(t), "k": k},
            provenance=tuple(provenance),
            state={"mean": mean},
            info={"explained_variance": float(ratio[:k].sum()),
                  "explained_variance_ratio": [float(r) for r in ratio[:k]]},
        ))
    return out
