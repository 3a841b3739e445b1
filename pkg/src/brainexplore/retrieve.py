"""Top-activating stimuli per pattern, explanation image sets, and consistency triage."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import PatternId, PoolKind

SAE_CUTOFF = 0.01
DEFAULT_FRACTION = 0.002
N_EXPLAIN_MEASURED = 6
N_EXPLAIN_PREDICTED = 10


@dataclass(frozen=True)
class TopSet:
    pattern: PatternId
    pool_kind: PoolKind
    stimulus_ids: tuple[str, ...]
    coefficients: tuple[float, ...]
    requested: int

    def __post_init__(self):
        object.__setattr__(self, "pool_kind", PoolKind(self.pool_kind))

    @property
    def empty(self) -> bool:
        return not self.stimulus_ids

    @property
    def short(self) -> bool:
        """Fewer survivors than requested (flagged, not fatal)."""
        return len(self.stimulus_ids) < self.requested

    def __len__(self) -> int:
        return len(self.stimulus_ids)

    def to_json(self) -> dict:
        return {"pattern": str(self.pattern), "pool": self.pool_kind.value, "ids": list(self.stimulus_ids),
                "coeffs": [float(c) for c in self.coefficients], "requested": self.requested}

    @classmethod
    def from_json(cls, obj: Mapping) -> "TopSet":
        return cls(PatternId.parse(obj["pattern"]), PoolKind(obj["pool"]), tuple(obj["ids"]),
                   tuple(float(c) for c in obj["coeffs"]), int(obj.get("requested", len(obj["ids"]))))


def requested_count(pool_size: int, fraction: float | None = None, count: int | None = None) -> int:
    if (fraction is None) == (count is None):
        raise ValueError("give exactly one of fraction or count")
    if count is not None:
        if count < 1:
            raise ValueError("count must be >= 1")
        return int(count)
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    return max(1, int(math.floor(fraction * pool_size + 0.5)))


def activation_cutoff(method: str) -> float:
    return SAE_CUTOFF if method == "sae" else 0.0


def passes_cutoff(coeffs: np.ndarray, method: str) -> np.ndarray:
    c = np.asarray(coeffs)
    return c >= SAE_CUTOFF if method == "sae" else c > 0.0


class RankIndex:
    """Precomputed stimulus-id order for one pool, so ties break by id without string sorts."""

    def __init__(self, stimulus_ids: Sequence[str]):
        self.stimulus_ids = tuple(stimulus_ids)
        order = sorted(range(len(self.stimulus_ids)), key=self.stimulus_ids.__getitem__)
        self.id_rank = np.empty(len(order), dtype=np.int64)
        self.id_rank[order] = np.arange(len(order))

    def top(self, column: np.ndarray, k: int, method: str) -> np.ndarray:
        """Row positions of the top ``k`` coefficients passing the cutoff, best first."""
        col = np.asarray(column, dtype=np.float64)
        ok = np.flatnonzero(passes_cutoff(col, method))
        if ok.size == 0:
            return ok
        vals = col[ok]
        if ok.size > k:
            kth = np.partition(vals, ok.size - k)[ok.size - k]
            keep = vals >= kth
            ok, vals = ok[keep], vals[keep]
        order = np.lexsort((self.id_rank[ok], -vals))
        return ok[order[:k]]


def top_activating(coeff_column: Sequence[float], stimulus_ids: Sequence[str] | RankIndex, pattern: PatternId,
                   pool_kind: PoolKind | str, fraction: float | None = None, count: int | None = None,
                   method: str | None = None) -> TopSet:
    """Highest-coefficient stimuli for one pattern, excluding non-activating responses.

    Cutoff: SAE codes below 0.01 and non-SAE coefficients <= 0 are dropped.
    Ties break by stimulus id ascending.
    """
    index = stimulus_ids if isinstance(stimulus_ids, RankIndex) else RankIndex(stimulus_ids)
    col = np.asarray(coeff_column, dtype=np.float64)
    if col.shape != (len(index.stimulus_ids),):
        raise ValueError("coefficient column and stimulus ids differ in length")
    k = requested_count(len(col), fraction, count)
    rows = index.top(col, k, method or pattern.method)
    return TopSet(pattern, PoolKind(pool_kind), tuple(index.stimulus_ids[i] for i in rows),
                  tuple(float(col[i]) for i in rows), k)


@dataclass(frozen=True)
class ExplanationSet:
    pattern: PatternId
    stimulus_ids: tuple[str, ...]
    n_measured: int
    n_predicted: int
    short: bool


def explanation_image_set(pattern: PatternId, measured: TopSet | None, predicted: TopSet | None,
                          n_measured: int = N_EXPLAIN_MEASURED,
                          n_predicted: int = N_EXPLAIN_PREDICTED) -> ExplanationSet:
    """Six measured plus ten predicted top images, in activation order.

    A stimulus present in both pools keeps both slots.
    """
    m = measured.stimulus_ids[:n_measured] if measured is not None else ()
    p = predicted.stimulus_ids[:n_predicted] if predicted is not None else ()
    if not m and not p:
        raise ValueError(f"pattern {pattern} has no activating stimuli in either pool")
    return ExplanationSet(pattern, tuple(m) + tuple(p), len(m), len(p),
                          len(m) < n_measured or len(p) < n_predicted)


def consistency_score(embeddings: Sequence[Sequence[float]] | np.ndarray) -> float:
    """Mean pairwise cosine similarity (i < j) of unit-norm embeddings."""
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] < 2:
        raise ValueError("need at least two embeddings")
    gram = e @ e.T
    iu = np.triu_indices(e.shape[0], k=1)
    return float(gram[iu].mean())


def select_candidates(scores: Mapping[PatternId, float], top_k: int = 40) -> list[PatternId]:
    """Top ``top_k`` patterns by consistency within every (roi, method) group."""
    groups: dict[tuple[str, str], list[PatternId]] = defaultdict(list)
    for pid, s in scores.items():
        if s is not None and math.isfinite(s):
            groups[(pid.roi, pid.method)].append(pid)
    out = []
    for key in sorted(groups):
        ranked = sorted(groups[key], key=lambda p: (-scores[p], p))
        out.extend(ranked[:top_k])
    return out


def write_topsets(path: str | Path, topsets: Iterable[TopSet]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for ts in topsets:
            fh.write(json.dumps(ts.to_json(), sort_keys=True) + "\n")


def read_topsets(path: str | Path) -> list[TopSet]:
    with Path(path).open(encoding="utf-8") as fh:
        return [TopSet.from_json(json.loads(line)) for line in fh if line.strip()]
