"""Domain data model: voxel spaces, response pools, decompositions, pattern ids."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import nnls

from . import storage


class PoolKind(str, Enum):
    MEASURED = "measured"
    PREDICTED = "predicted"


METHODS = ("voxels", "pca", "nmf", "ica", "sae")
# Methods whose components are emitted as (+c, -c) row pairs.
SIGNED_METHODS = frozenset({"voxels", "pca", "ica"})


class UnknownROIError(KeyError):
    pass


class NNLSConvergenceWarning(RuntimeWarning):
    pass


def _frozen(arr: Any, dtype=np.float64) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class VoxelSpace:
    subject_id: str
    total_voxels: int
    rois: Mapping[str, tuple[int, ...]]

    def __post_init__(self):
        if self.total_voxels < 1:
            raise ValueError("total_voxels must be positive")
        seen: set[int] = set()
        rois = {}
        for name, idx in self.rois.items():
            idx = tuple(int(i) for i in idx)
            if not idx:
                raise ValueError(f"ROI {name!r} is empty")
            if any(b <= a for a, b in zip(idx, idx[1:])):
                raise ValueError(f"ROI {name!r} indices must be strictly increasing")
            if idx[0] < 0 or idx[-1] >= self.total_voxels:
                raise ValueError(f"ROI {name!r} indices out of range [0, {self.total_voxels})")
            if seen.intersection(idx):
                raise ValueError(f"ROI {name!r} overlaps another ROI")
            seen.update(idx)
            rois[name] = idx
        object.__setattr__(self, "rois", rois)

    @property
    def roi_names(self) -> list[str]:
        return list(self.rois)

    def indices(self, roi: str) -> np.ndarray:
        try:
            return np.asarray(self.rois[roi], dtype=np.int64)
        except KeyError:
            raise UnknownROIError(f"unknown ROI {roi!r}") from None

    def to_json(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "total_voxels": self.total_voxels,
            "rois": {k: list(v) for k, v in self.rois.items()},
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "VoxelSpace":
        return cls(obj["subject_id"], int(obj["total_voxels"]), {k: tuple(v) for k, v in obj["rois"].items()})


@dataclass(frozen=True)
class ResponsePool:
    kind: PoolKind
    stimulus_ids: tuple[str, ...]
    responses: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "kind", PoolKind(self.kind))
        ids = tuple(str(s) for s in self.stimulus_ids)
        if not ids:
            raise ValueError("a response pool needs at least one stimulus")
        if len(set(ids)) != len(ids):
            raise ValueError("stimulus ids must be unique")
        resp = _frozen(self.responses)
        if resp.ndim != 2 or resp.shape[0] != len(ids):
            raise ValueError(f"responses shape {resp.shape} does not match {len(ids)} stimuli")
        object.__setattr__(self, "stimulus_ids", ids)
        object.__setattr__(self, "responses", resp)

    def __len__(self) -> int:
        return len(self.stimulus_ids)

    def subset(self, ids: Iterable[str]) -> "ResponsePool":
        pos = {s: i for i, s in enumerate(self.stimulus_ids)}
        ids = list(ids)
        return ResponsePool(self.kind, ids, self.responses[[pos[s] for s in ids]])

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        storage.save_matrix(d / "responses.bxm", self.responses)
        storage.save_json(d / "pool.json", {"kind": self.kind.value, "stimulus_ids": list(self.stimulus_ids)})

    @classmethod
    def load(cls, directory: str | Path) -> "ResponsePool":
        d = Path(directory)
        meta = storage.load_json(d / "pool.json")
        return cls(PoolKind(meta["kind"]), meta["stimulus_ids"], storage.load_matrix(d / "responses.bxm"))


@dataclass(frozen=True, order=True)
class PatternId:
    method: str
    roi: str
    fingerprint: str
    index: int
    sign: str = ""

    def __post_init__(self):
        if self.sign not in ("", "+", "-"):
            raise ValueError(f"bad sign flag {self.sign!r}")
        if self.sign and self.method not in SIGNED_METHODS:
            raise ValueError(f"method {self.method!r} has no sign duplication")

    def __str__(self) -> str:
        return f"{self.method}/{self.roi}/{self.fingerprint}/{self.index}{self.sign}"

    @classmethod
    def parse(cls, text: str) -> "PatternId":
        method, roi, fingerprint, tail = text.split("/")
        sign = tail[-1] if tail[-1] in "+-" else ""
        return cls(method, roi, fingerprint, int(tail[: len(tail) - len(sign)]), sign)

    def to_json(self) -> dict:
        return {"method": self.method, "roi": self.roi, "fingerprint": self.fingerprint,
                "index": self.index, "sign": self.sign}


def save_pattern_registry(path: str | Path, patterns: Sequence[PatternId]) -> None:
    storage.save_json(path, {"patterns": [p.to_json() for p in patterns]})


def load_pattern_registry(path: str | Path) -> list[PatternId]:
    return [PatternId(**p) for p in storage.load_json(path)["patterns"]]


def save_voxel_space(path: str | Path, space: VoxelSpace) -> None:
    storage.save_json(path, space.to_json())


def load_voxel_space(path: str | Path) -> VoxelSpace:
    return VoxelSpace.from_json(storage.load_json(path))


@dataclass(frozen=True)
class Normalization:
    """Per-voxel affine map ``(x - mean) / scale``."""

    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _frozen(self.mean))
        object.__setattr__(self, "scale", _frozen(self.scale))

    @classmethod
    def zscore(cls, x: np.ndarray) -> "Normalization":
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        std[std < 1e-12] = 1.0
        return cls(mean, std)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.scale


def fingerprint(hyperparams: Mapping[str, Any]) -> str:
    parts = []
    for key in sorted(hyperparams):
        val = hyperparams[key]
        if isinstance(val, float):
            val = f"{val:g}"
        parts.append(f"{key}={val}")
    return ",".join(parts) or "default"


@dataclass(frozen=True)
class Decomposition:
    """A component matrix (patterns x ROI voxels) plus what is needed to project onto it.

    ``state`` holds method-specific arrays (training mean, ICA unmixing matrix,
    SAE encoder weights); ``info`` holds JSON-able diagnostics such as
    convergence flags and loss histories.
    """

    method: str
    roi: str
    components: np.ndarray
    hyperparams: Mapping[str, Any] = field(default_factory=dict)
    provenance: tuple[str, ...] = ("measured",)
    state: Mapping[str, np.ndarray] = field(default_factory=dict)
    normalization: Normalization | None = None
    info: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        comps = _frozen(self.components)
        if comps.ndim != 2 or comps.shape[0] < 1:
            raise ValueError("components must be a non-empty K x V matrix")
        if not np.all(np.any(comps != 0, axis=1)):
            raise ValueError("component rows must not be all-zero")
        if self.method == "nmf" and comps.min() < 0:
            raise ValueError("nmf components must be nonnegative")
        if self.method in SIGNED_METHODS:
            if comps.shape[0] % 2 or not np.array_equal(comps[0::2], -comps[1::2]):
                raise ValueError(f"{self.method} components must come in exact (+, -) pairs")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "state", {k: _frozen(v) for k, v in self.state.items()})
        object.__setattr__(self, "provenance", tuple(self.provenance))
        object.__setattr__(self, "hyperparams", dict(self.hyperparams))
        object.__setattr__(self, "info", dict(self.info))

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    @property
    def n_voxels(self) -> int:
        return self.components.shape[1]

    @property
    def fingerprint(self) -> str:
        hp = dict(self.hyperparams)
        hp["train"] = "+".join(self.provenance)
        return fingerprint(hp)

    def pattern_ids(self) -> list[PatternId]:
        fp = self.fingerprint
        if self.method in SIGNED_METHODS:
            return [PatternId(self.method, self.roi, fp, i // 2, "+-"[i % 2]) for i in range(self.n_components)]
        return [PatternId(self.method, self.roi, fp, i) for i in range(self.n_components)]

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        storage.save_matrix(d / "components.bxm", self.components)
        for name, arr in sorted(self.state.items()):
            storage.save_matrix(d / f"{name}.bxm", np.atleast_2d(arr))
        norm = None
        if self.normalization is not None:
            storage.save_matrix(d / "norm_mean.bxm", self.normalization.mean[None, :])
            storage.save_matrix(d / "norm_scale.bxm", self.normalization.scale[None, :])
            norm = "zscore_per_voxel"
        storage.save_json(d / "meta.json", {
            "method": self.method,
            "roi": self.roi,
            "hyperparams": dict(self.hyperparams),
            "provenance": list(self.provenance),
            "state": {k: list(np.shape(v)) for k, v in sorted(self.state.items())},
            "normalization": norm,
            "info": dict(self.info),
        })

    @classmethod
    def load(cls, directory: str | Path) -> "Decomposition":
        d = Path(directory)
        meta = storage.load_json(d / "meta.json")
        state = {k: storage.load_matrix(d / f"{k}.bxm").reshape(shape) for k, shape in meta["state"].items()}
        norm = None
        if meta["normalization"]:
            norm = Normalization(storage.load_matrix(d / "norm_mean.bxm")[0],
                                 storage.load_matrix(d / "norm_scale.bxm")[0])
        return cls(meta["method"], meta["roi"], storage.load_matrix(d / "components.bxm"),
                   meta["hyperparams"], tuple(meta["provenance"]), state, norm, meta["info"])


def restrict_to_roi(pool: ResponsePool | np.ndarray, space: VoxelSpace, roi: str) -> np.ndarray:
    """Columns of ``pool`` belonging to ``roi``, in stored index order (read-only)."""
    responses = pool.responses if isinstance(pool, ResponsePool) else np.asarray(pool)
    idx = space.indices(roi)
    if responses.shape[1] != space.total_voxels:
        raise ValueError(f"pool width {responses.shape[1]} does not match voxel space width {space.total_voxels}")
    out = responses[:, idx]
    out.setflags(write=False)
    return out


def _interleave_signed(base: np.ndarray) -> np.ndarray:
    out = np.empty((base.shape[0], 2 * base.shape[1]), dtype=base.dtype)
    out[:, 0::2] = base
    out[:, 1::2] = -base
    return out


def nnls_rows(components: np.ndarray, x: np.ndarray, maxiter: int | None = None) -> tuple[np.ndarray, int]:
    """Solve ``min ||h @ components - x_i||`` with ``h >= 0`` for every row of ``x``.

    Returns the coefficient matrix and the number of rows whose solver hit the
    iteration cap; those rows fall back to a clipped least-squares solution.
    """
    a = np.asarray(components, dtype=np.float64).T
    k = a.shape[1]
    out = np.zeros((x.shape[0], k))
    failures = 0
    for i, row in enumerate(x):
        try:
            out[i], _ = nnls(a, row, maxiter=maxiter)
        except RuntimeError:
            failures += 1
            out[i] = np.clip(np.linalg.lstsq(a, row, rcond=None)[0], 0, None)
    return out, failures


def project_coefficients(decomp: Decomposition, responses: np.ndarray,
                         pool_kind: PoolKind | str = PoolKind.MEASURED,
                         nnls_maxiter: int | None = None) -> np.ndarray:
    """Coefficients (N x K) of each response row on the decomposition's patterns."""
    x = np.asarray(responses, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != decomp.n_voxels:
        raise ValueError(f"responses shape {x.shape} does not match {decomp.n_voxels} ROI voxels")
    if decomp.normalization is not None:
        x = decomp.normalization.apply(x)
    method = decomp.method
    comps = decomp.components
    if method == "voxels":
        return _interleave_signed(x @ comps[0::2].T)
    if method == "pca":
        return _interleave_signed((x - decomp.state["mean"]) @ comps[0::2].T)
    if method == "ica":
        return _interleave_signed((x - decomp.state["mean"]) @ decomp.state["unmixing"].T)
    if method == "nmf":
        coeffs, failures = nnls_rows(comps, np.clip(x, 0, None), maxiter=nnls_maxiter)
        if failures:
            warnings.warn(f"nnls hit its iteration cap on {failures} of {len(x)} rows; "
                          "returned clipped least-squares for those rows", NNLSConvergenceWarning, stacklevel=2)
        return coeffs
    if method == "sae":
        kind = PoolKind(pool_kind).value
        key = f"enc_weight_{kind}" if f"enc_weight_{kind}" in decomp.state else "enc_weight_measured"
        weight = decomp.state[key]
        bias = decomp.state[key.replace("weight", "bias")]
        return np.maximum(x @ weight.T + bias, 0.0)
    raise ValueError(f"unknown method {method!r}")


def pearson_correlation(a: Sequence[float], b: Sequence[float]) -> float:
    """Pearson r; 0.0 when either input is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size < 2:
        raise ValueError("need at least two samples")
    if np.ptp(a) == 0.0 or np.ptp(b) == 0.0:
        return 0.0
    da = a - a.mean()
    db = b - b.mean()
    na = math.sqrt(float(da @ da))
    nb = math.sqrt(float(db @ db))
    return float(np.clip((da @ db) / (na * nb), -1.0, 1.0))
