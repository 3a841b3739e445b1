"""Per-ROI decompositions: voxel basis, PCA, NMF, ICA and sparse autoencoders."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..core import Decomposition, Normalization
from .ica import fastica, fit_ica
from .nmf import fit_nmf, nmf_multiplicative
from .pca import centered_svd, fit_pca, variance_matched_K
from .sae import SAEConfig, SAETrainingError, active_fraction, fit_sae

__all__ = [
    "FitConfig", "SAEConfig", "SAETrainingError", "active_fraction", "centered_svd", "fastica",
    "fit_ica", "fit_method", "fit_nmf", "fit_pca", "fit_sae", "fit_voxels", "nmf_multiplicative",
    "variance_matched_K",
]

NORMALIZE_CHOICES = ("none", "zscore_per_voxel")


@dataclass(frozen=True)
class FitConfig:
    method: str
    variance_thresholds: tuple[float, ...] = (0.9, 0.95, 0.98)
    seeds: tuple[int, ...] = (0,)
    sae: SAEConfig = field(default_factory=SAEConfig)
    normalize_input: str = "zscore_per_voxel"
    train_pools: tuple[str, ...] = ("measured", "predicted")

    def __post_init__(self):
        if self.method not in ("voxels", "pca", "nmf", "ica", "sae"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.normalize_input not in NORMALIZE_CHOICES:
            raise ValueError(f"normalize_input must be one of {NORMALIZE_CHOICES}")
        for t in self.variance_thresholds:
            if not 0 < t <= 1:
                raise ValueError(f"variance threshold {t} outside (0, 1]")
        if "measured" not in self.train_pools:
            raise ValueError("training always includes the measured pool")


def fit_voxels(n_voxels: int, roi: str = "roi", provenance: Sequence[str] = ("measured",)) -> Decomposition:
    """One-hot voxel basis, each voxel duplicated as (+e_i, -e_i)."""
    if n_voxels < 1:
        raise ValueError("need at least one voxel")
    comps = np.zeros((2 * n_voxels, n_voxels))
    idx = np.arange(n_voxels)
    comps[2 * idx, idx] = 1.0
    comps[2 * idx + 1, idx] = -1.0
    return Decomposition("voxels", roi, comps, provenance=tuple(provenance))


def fit_method(cfg: FitConfig, x_measured: np.ndarray, x_predicted: np.ndarray | None = None,
               roi: str = "roi") -> list[Decomposition]:
    """Fit every (threshold, seed) variant of ``cfg.method`` on one ROI.

    Normalization statistics come from the measured rows and are applied to both
    pools; PCA/NMF/ICA train on the stacked rows, the SAE keeps pools separate.
    """
    xm = np.asarray(x_measured, dtype=np.float64)
    use_pred = x_predicted is not None and "predicted" in cfg.train_pools and len(x_predicted) > 0
    xp = np.asarray(x_predicted, dtype=np.float64) if use_pred else None
    provenance = ("measured", "predicted") if use_pred else ("measured",)
    norm = Normalization.zscore(xm) if cfg.normalize_input == "zscore_per_voxel" else None
    if norm is not None:
        xm = norm.apply(xm)
        xp = norm.apply(xp) if use_pred else None
    stacked = np.vstack([xm, xp]) if use_pred else xm

    if cfg.method == "voxels":
        out = [fit_voxels(xm.shape[1], roi, provenance)]
    elif cfg.method == "pca":
        out = fit_pca(stacked, cfg.variance_thresholds, roi, provenance)
    elif cfg.method == "sae":
        out = [fit_sae(xm, xp, cfg.sae, seed=s, roi=roi) for s in cfg.seeds]
    else:
        ks = variance_matched_K(stacked, cfg.variance_thresholds)
        fit = fit_ica if cfg.method == "ica" else fit_nmf
        out = []
        for t, k in zip(cfg.variance_thresholds, ks):
            for s in cfg.seeds:
                out.append(fit(stacked, k, seed=s, roi=roi, provenance=provenance,
                               hyperparams={"variance_threshold": float(t)}))
    if norm is None:
        return out
    return [dataclasses.replace(d, normalization=norm) for d in out]
