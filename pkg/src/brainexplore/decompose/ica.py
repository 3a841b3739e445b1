"""FastICA with PCA whitening and symmetric decorrelation (logcosh contrast)."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..core import Decomposition
from .pca import centered_svd

log = logging.getLogger(__name__)


@dataclass
class FastICAResult:
    mean: np.ndarray
    unmixing: np.ndarray  # K x V, sources = (x - mean) @ unmixing.T
    mixing: np.ndarray  # V x K
    converged: bool
    n_iter: int


def _sym_decorrelation(w: np.ndarray) -> np.ndarray:
    """``(W W^T)^{-1/2} W``."""
    s, u = np.linalg.eigh(w @ w.T)
    s = np.clip(s, np.finfo(w.dtype).tiny, None)
    return (u * (1.0 / np.sqrt(s))) @ u.T @ w


def fastica(x: np.ndarray, k: int, seed: int = 0, tol: float = 1e-5, max_iter: int = 500,
            alpha: float = 1.0) -> FastICAResult:
    x = np.asarray(x, dtype=np.float64)
    n, v = x.shape
    if not 1 <= k <= min(n, v):
        raise ValueError(f"k={k} must lie in [1, min(N, V)={min(n, v)}]")
    if n <= k:
        raise ValueError("fastica needs more samples than components")
    mean, u, s, vt = centered_svd(x)
    if s[k - 1] == 0.0:
        raise ValueError(f"data rank is below k={k}")
    # whitened data z has identity covariance
    whitening = vt[:k] * (np.sqrt(n) / s[:k])[:, None]  # K x V
    z = u[:, :k] * np.sqrt(n)

    rng = np.random.default_rng(seed)
    w = _sym_decorrelation(rng.standard_normal((k, k)))
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        wz = z @ w.T  # N x K
        g = np.tanh(alpha * wz)
        g_prime = alpha * (1.0 - g * g)
        w_new = _sym_decorrelation((g.T @ z) / n - g_prime.mean(axis=0)[:, None] * w)
        lim = np.max(np.abs(np.abs(np.einsum("ij,ij->i", w_new, w)) - 1.0))
        w = w_new
        if lim < tol:
            converged = True
            break

    unmixing = w @ whitening
    sources = (x - mean) @ unmixing.T
    # deterministic sign: positive skew
    skew = np.mean(sources ** 3, axis=0)
    flip = np.where(skew < 0, -1.0, 1.0)
    unmixing = unmixing * flip[:, None]
    mixing = np.linalg.pinv(unmixing)
    return FastICAResult(mean, unmixing, mixing, converged, it)


def fit_ica(x: np.ndarray, k: int, seed: int = 0, roi: str = "roi",
            provenance: Sequence[str] = ("measured",), tol: float = 1e-5, max_iter: int = 500,
            hyperparams: dict | None = None) -> Decomposition:
    res = fastica(x, k, seed=seed, tol=tol, max_iter=max_iter)
    if not res.converged:
        log.warning("fastica (roi=%s, k=%d, seed=%d) did not converge in %d iterations",
                    roi, k, seed, max_iter)
    base = res.mixing.T
    comps = np.empty((2 * k, base.shape[1]))
    comps[0::2] = base
    comps[1::2] = -base
    hp = {"k": k, "seed": seed}
    hp.update(hyperparams or {})
    return Decomposition(
        "ica", roi, comps, hyperparams=hp, provenance=tuple(provenance),
        state={"mean": res.mean, "unmixing": res.unmixing},
        info={"converged": res.converged, "n_iter": res.n_iter},
    )
