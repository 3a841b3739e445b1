from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..core import Decomposition

log = logging.getLogger(__name__)

_EPS = 1e-12


@dataclass
class NMFResult:
    coefficients: np.ndarray  # N x K
    components: np.ndarray  # K x V
    converged: bool
    n_iter: int
    relative_error: float
    objective_trace: list[float] = field(default_factory=list)


def _objective(x: np.ndarray, h: np.ndarray, w: np.ndarray) -> float:
    r = x - h @ w
    return 0.5 * float(np.einsum("ij,ij->", r, r))


def nmf_multiplicative(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 500,
                       tol: float = 1e-4, check_every: int = 10) -> NMFResult:
    """Frobenius NMF ``x ~ h @ w`` by Lee-Seung multiplicative updates.

    The objective is evaluated every ``check_every`` iterations; the run stops
    once the relative improvement between two checks falls below ``tol``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.min() < 0:
        raise ValueError("nmf input must be nonnegative")
    n, v = x.shape
    if not 1 <= k <= min(n, v):
        raise ValueError(f"k={k} must lie in [1, min(N, V)={min(n, v)}]")
    if not np.any(x > 0):
        raise ValueError("nmf input is all zero")
    rng = np.random.default_rng(seed)
    scale = np.sqrt(x.mean() / k)
    h = scale * rng.random((n, k))
    w = scale * rng.random((k, v))

    trace = [_objective(x, h, w)]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        w *= (h.T @ x) / ((h.T @ h) @ w + _EPS)
        h *= (x @ w.T) / (h @ (w @ w.T) + _EPS)
        if it % check_every == 0 or it == max_iter:
            obj = _objective(x, h, w)
            prev = trace[-1]
            trace.append(obj)
            if prev > 0 and (prev - obj) / prev < tol:
                converged = True
                break
            if obj == 0.0:
                converged = True
                break
    rel = float(np.linalg.norm(x - h @ w) / np.linalg.norm(x))
    return NMFResult(h, w, converged, it, rel, trace)


def fit_nmf(x: np.ndarray, k: int, seed: int = 0, roi: str = "roi",
            provenance: Sequence[str] = ("measured",), max_iter: int = 500,
            tol: float = 1e-4, hyperparams: dict | None = None) -> Decomposition:
    """NMF on ``x`` clipped at zero; components are rescaled to unit L2 norm."""
    clipped = np.clip(np.asarray(x, dtype=np.float64), 0.0, None)
    if not np.any(clipped > 0):
        raise ValueError("nmf input is all zero after clipping negatives")
    res = nmf_multiplicative(clipped, k, seed=seed, max_iter=max_iter, tol=tol)
    if not res.converged:
        log.warning("nmf (roi=%s, k=%d, seed=%d) stopped at the iteration cap", roi, k, seed)
    norms = np.linalg.norm(res.components, axis=1)
    alive = norms > 0
    comps = res.components[alive] / norms[alive, None]
    hp = {"k": k, "seed": seed}
    hp.update(hyperparams or {})
    return Decomposition(
        "nmf", roi, comps, hyperparams=hp, provenance=tuple(provenance),
        info={"converged": res.converged, "n_iter": res.n_iter,
              "relative_error": res.relative_error,
              "objective_trace": res.objective_trace,
              "dropped_components": int((~alive).sum())},
    )
