"""Pattern-hypothesis alignment scores, best-pair search, dedup and interpretability metrics.

Scores for a pool are the fraction of a pattern's top-activating stimuli
labeled with the hypothesis, boosted for rare hypotheses by
``min(2, max(1, p0 / p_h))`` and clipped to 1. The final score averages the
pools that are present.

Pairs are always chosen on the ranking half and reported on the evaluation
half; every table carries its split tag and the search helpers refuse tables
with the wrong tag.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import sparse

from . import storage
from .core import Decomposition, PatternId, PoolKind, ResponsePool, VoxelSpace, project_coefficients, restrict_to_roi
from .label import LabelMatrix
from .retrieve import DEFAULT_FRACTION, RankIndex, TopSet, requested_count

log = logging.getLogger(__name__)

RANKING = "ranking"
EVALUATION = "evaluation"
SPLITS = (RANKING, EVALUATION)
DEFAULT_P0 = 0.05
MAX_FACTOR = 2.0
POOLS = (PoolKind.MEASURED.value, PoolKind.PREDICTED.value)


class SplitDisciplineError(ValueError):
    """A table from the wrong split half was passed to a search or metric."""


# ---------------------------------------------------------------- splitting

@dataclass(frozen=True)
class SplitAssignment:
    seed: int
    halves: Mapping[str, Mapping[str, tuple[str, ...]]]  # pool -> split -> ids

    def ids(self, pool: str, split: str) -> tuple[str, ...]:
        return self.halves[pool][split]

    def to_json(self) -> dict:
        return {"seed": self.seed, "halves": {p: {s: list(v) for s, v in h.items()} for p, h in self.halves.items()}}

    @classmethod
    def from_json(cls, obj: Mapping) -> "SplitAssignment":
        return cls(int(obj["seed"]), {p: {s: tuple(v) for s, v in h.items()} for p, h in obj["halves"].items()})


def split_pools(pools: Mapping[str, Sequence[str]], seed: int) -> SplitAssignment:
    """Seeded shuffle of each pool into a ranking half and an evaluation half.

    The ranking half gets the extra stimulus when the pool size is odd. Each
    pool draws from its own stream so adding a pool leaves the others unchanged.
    """
    halves = {}
    for name, ids in sorted(pools.items()):
        ids = tuple(ids)
        if len(ids) < 2:
            raise ValueError(f"pool {name!r} needs at least two stimuli to split")
        if len(set(ids)) != len(ids):
            raise ValueError(f"pool {name!r} has duplicate stimulus ids")
        key = POOLS.index(name) if name in POOLS else len(POOLS) + sum(map(ord, name))
        perm = np.random.default_rng([seed, key]).permutation(len(ids))
        cut = (len(ids) + 1) // 2
        halves[name] = {RANKING: tuple(ids[i] for i in perm[:cut]),
                        EVALUATION: tuple(ids[i] for i in perm[cut:])}
    return SplitAssignment(seed, halves)


# ---------------------------------------------------------------- score arithmetic

def raw_alignment(top_set: TopSet | Sequence[str], hypothesis: int, labels: LabelMatrix) -> float:
    """Fraction of the top set labeled positive for ``hypothesis``; NaN when the set is empty."""
    ids = top_set.stimulus_ids if isinstance(top_set, TopSet) else tuple(top_set)
    if not ids:
        return math.nan
    return sum(labels.is_positive(s, hypothesis) for s in ids) / len(ids)


def normalization_factor(p_h, p0: float = DEFAULT_P0):
    p = np.asarray(p_h, dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p_h must lie in [0, 1]")
    with np.errstate(divide="ignore", over="ignore"):
        factor = np.where(p > 0, np.clip(p0 / np.where(p > 0, p, 1.0), 1.0, MAX_FACTOR), MAX_FACTOR)
    return float(factor) if factor.ndim == 0 else factor


def normalize(raw, p_h, p0: float = DEFAULT_P0):
    """Rarity-boosted score ``min(1, raw * clamp(p0 / p_h, 1, 2))``; NaN stays NaN."""
    out = np.minimum(1.0, np.asarray(raw, dtype=np.float64) * normalization_factor(p_h, p0))
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------- score table

@dataclass(frozen=True)
class ScoreEntry:
    pattern: PatternId
    hypothesis: int
    raw_measured: float
    raw_predicted: float
    normalized_measured: float
    normalized_predicted: float
    final: float
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class ScoreTable:
    """Dense P x H scores for one split half.

    Stored as integer positive counts per pool, top-set sizes and per-pool
    hypothesis frequencies; raw, normalized and final scores are derived, so
    a saved table reloads to bit-identical scores. Rows are NaN where the
    pattern had no surviving top stimuli in that pool.
    """

    patterns: tuple[PatternId, ...]
    n_hypotheses: int
    split: str
    counts: Mapping[str, np.ndarray]
    top_sizes: Mapping[str, np.ndarray]
    frequencies: Mapping[str, np.ndarray]
    dictionary_hash: str = ""
    p0: float = DEFAULT_P0

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split tag must be one of {SPLITS}")
        if list(self.patterns) != sorted(self.patterns) or len(set(self.patterns)) != len(self.patterns):
            raise ValueError("patterns must be unique and canonically sorted")
        shape = (len(self.patterns), self.n_hypotheses)
        if set(self.counts) != set(self.top_sizes) or set(self.counts) != set(self.frequencies):
            raise ValueError("counts, sizes and frequencies must cover the same pools")
        raw, norm = {}, {}
        for pool in sorted(self.counts):
            c = np.asarray(self.counts[pool], dtype=np.float64).reshape(shape)
            n = np.asarray(self.top_sizes[pool], dtype=np.int64).reshape(len(self.patterns))
            f = np.asarray(self.frequencies[pool], dtype=np.float64).reshape(self.n_hypotheses)
            if np.any(c > n[:, None]) or np.any(c < 0):
                raise ValueError(f"{pool} counts must lie between 0 and the top-set size")
            with np.errstate(invalid="ignore", divide="ignore"):
                r = c / n[:, None]
            r[n == 0] = np.nan
            raw[pool] = r
            norm[pool] = normalize(r, f[None, :], self.p0)
        object.__setattr__(self, "raw", raw)
        object.__setattr__(self, "normalized", norm)
        object.__setattr__(self, "final", _average_pools([norm[p] for p in sorted(norm)], shape))
        object.__setattr__(self, "_row", {p: i for i, p in enumerate(self.patterns)})

    @property
    def pools(self) -> tuple[str, ...]:
        return tuple(sorted(self.counts))

    def row(self, pattern: PatternId) -> int:
        return self._row[pattern]

    def entry(self, pattern: PatternId, hypothesis: int) -> ScoreEntry:
        return pattern_hypothesis_score(self, pattern, hypothesis)

    def with_pools(self, pools: Iterable[str]) -> "ScoreTable":
        """Same table restricted to some retrieval pools (e.g. measured only)."""
        keep = [p for p in pools if p in self.counts]
        if not keep:
            raise ValueError("no requested pool is present")
        return replace(self, counts={p: self.counts[p] for p in keep}, top_sizes={p: self.top_sizes[p] for p in keep},
                       frequencies={p: self.frequencies[p] for p in keep})

    def subset(self, patterns: Iterable[PatternId]) -> "ScoreTable":
        rows = sorted(self._row[p] for p in set(patterns))
        return replace(self, patterns=tuple(self.patterns[r] for r in rows),
                       counts={k: np.asarray(v)[rows] for k, v in self.counts.items()},
                       top_sizes={k: np.asarray(v)[rows] for k, v in self.top_sizes.items()})

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        for pool in self.pools:
            storage.save_matrix(d / f"counts_{pool}.bxm", np.asarray(self.counts[pool], dtype=np.float64))
        storage.save_json(d / "index.json", {
            "split": self.split, "patterns": [str(p) for p in self.patterns], "n_hypotheses": self.n_hypotheses,
            "pools": list(self.pools), "dictionary_hash": self.dictionary_hash, "p0": self.p0,
            "top_sizes": {p: [int(n) for n in self.top_sizes[p]] for p in self.pools},
            "frequencies": {p: [float(f) for f in self.frequencies[p]] for p in self.pools},
        })

    @classmethod
    def load(cls, directory: str | Path) -> "ScoreTable":
        d = Path(directory)
        idx = storage.load_json(d / "index.json")
        pools = idx["pools"]
        shape = (len(idx["patterns"]), idx["n_hypotheses"])
        counts = {p: np.rint(storage.load_matrix(d / f"counts_{p}.bxm")).astype(np.int64).reshape(shape)
                  for p in pools}
        return cls(tuple(PatternId.parse(p) for p in idx["patterns"]), idx["n_hypotheses"], idx["split"], counts,
                   {p: np.asarray(idx["top_sizes"][p], dtype=np.int64) for p in pools},
                   {p: np.asarray(idx["frequencies"][p], dtype=np.float64) for p in pools},
                   idx["dictionary_hash"], idx["p0"])


def _average_pools(arrays: Sequence[np.ndarray], shape) -> np.ndarray:
    if not arrays:
        return np.full(shape, np.nan)
    stack = np.stack(arrays)
    present = ~np.isnan(stack)
    count = present.sum(axis=0)
    total = np.where(present, stack, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), np.nan)


def pattern_hypothesis_score(table: ScoreTable, pattern: PatternId, hypothesis: int) -> ScoreEntry:
    if not 0 <= hypothesis < table.n_hypotheses:
        raise IndexError(f"hypothesis {hypothesis} out of range")
    r = table.row(pattern)
    vals = {p: (float(table.raw[p][r, hypothesis]), float(table.normalized[p][r, hypothesis]))
            for p in table.pools}
    nan = (math.nan, math.nan)
    m = vals.get(POOLS[0], nan)
    p = vals.get(POOLS[1], nan)
    present = [v[1] for v in (m, p) if not math.isnan(v[1])]
    if not present:
        raise ValueError(f"pattern {pattern} has no activating stimuli in any pool")
    flags = tuple(f"missing_{name}" for name, v in zip(POOLS, (m, p)) if math.isnan(v[1]))
    return ScoreEntry(pattern, hypothesis, m[0], p[0], m[1], p[1], sum(present) / len(present), flags)


def count_matrix(topsets: Sequence[TopSet], labels: LabelMatrix) -> tuple[np.ndarray, np.ndarray]:
    """P x H positive counts among aligned top sets, and the set sizes."""
    rows, cols = [], []
    sizes = np.zeros(len(topsets), dtype=np.int64)
    for i, ts in enumerate(topsets):
        sizes[i] = len(ts)
        for sid in ts.stimulus_ids:
            rows.append(i)
            cols.append(labels.row_of(sid))
    ind = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(topsets), labels.shape[0]))
    counts = np.rint(np.asarray((ind @ labels.to_csr()).todense())).astype(np.int64)
    return counts, sizes


def build_score_table(patterns: Sequence[PatternId], topsets: Mapping[str, Sequence[TopSet]],
                      labels: Mapping[str, LabelMatrix], split: str, p0: float = DEFAULT_P0) -> ScoreTable:
    """Score aligned per-pool top sets against per-pool labels."""
    order = sorted(range(len(patterns)), key=lambda i: patterns[i])
    pats = tuple(patterns[i] for i in order)
    hashes = {labels[k].dictionary_hash for k in topsets}
    n_h = {labels[k].n_hypotheses for k in topsets}
    if len(hashes) > 1 or len(n_h) > 1:
        raise ValueError("label matrices were built against different dictionaries")
    counts, sizes, freqs = {}, {}, {}
    for pool, ts in sorted(topsets.items()):
        ts = [ts[i] for i in order]
        if any(t.pattern != p for t, p in zip(ts, pats)):
            raise ValueError(f"{pool} top sets are not aligned with the pattern list")
        counts[pool], sizes[pool] = count_matrix(ts, labels[pool])
        freqs[pool] = labels[pool].frequencies
    return ScoreTable(pats, n_h.pop(), split, counts, sizes, freqs, hashes.pop(), p0)


def concat_tables(tables: Sequence[ScoreTable]) -> ScoreTable:
    """Union of several tables over the same dictionary and split (e.g. SAE with ICA)."""
    if not tables:
        raise ValueError("nothing to concatenate")
    first = tables[0]
    for t in tables[1:]:
        if (t.split, t.n_hypotheses, t.dictionary_hash, t.pools, t.p0) != (
                first.split, first.n_hypotheses, first.dictionary_hash, first.pools, first.p0):
            raise ValueError("tables differ in split, dictionary or pools")
        if any(not np.array_equal(t.frequencies[p], first.frequencies[p]) for p in first.pools):
            raise ValueError("tables were scored against different label matrices")
    seen: dict[PatternId, tuple[int, int]] = {}
    for ti, t in enumerate(tables):
        for ri, p in enumerate(t.patterns):
            seen.setdefault(p, (ti, ri))
    pats = sorted(seen)
    n_h = first.n_hypotheses

    def gather(pool):
        if not pats:
            return np.zeros((0, n_h), dtype=np.int64), np.zeros(0, dtype=np.int64)
        c = np.stack([np.asarray(tables[ti].counts[pool])[ri] for ti, ri in map(seen.get, pats)])
        n = np.array([np.asarray(tables[ti].top_sizes[pool])[ri] for ti, ri in map(seen.get, pats)], dtype=np.int64)
        return c, n

    parts = {p: gather(p) for p in first.pools}
    return ScoreTable(tuple(pats), n_h, first.split, {p: v[0] for p, v in parts.items()},
                      {p: v[1] for p, v in parts.items()}, dict(first.frequencies), first.dictionary_hash, first.p0)


# ---------------------------------------------------------------- end-to-end scoring of decompositions

@dataclass(frozen=True)
class ScoredRun:
    """Ranking and evaluation tables for one set of decompositions."""

    ranking: ScoreTable
    evaluation: ScoreTable
    topsets: Mapping[str, Mapping[str, Sequence[TopSet]]] = field(default_factory=dict)  # split -> pool -> sets

    def with_pools(self, pools: Iterable[str]) -> "ScoredRun":
        pools = tuple(pools)
        return ScoredRun(self.ranking.with_pools(pools), self.evaluation.with_pools(pools))

    def subset(self, patterns: Iterable[PatternId]) -> "ScoredRun":
        patterns = set(patterns)
        return ScoredRun(self.ranking.subset(patterns), self.evaluation.subset(patterns))


def pool_topsets(decomps: Sequence[Decomposition], pool: ResponsePool, space: VoxelSpace,
                 split: SplitAssignment, fraction: float = DEFAULT_FRACTION,
                 coefficients: Mapping[int, np.ndarray] | None = None) -> dict[str, list[TopSet]]:
    """Top sets for every pattern of ``decomps`` in each half of one pool."""
    kind = pool.kind.value
    row_of = {s: i for i, s in enumerate(pool.stimulus_ids)}
    out: dict[str, list[TopSet]] = {}
    half_rows = {}
    for half in SPLITS:
        ids = split.ids(kind, half)
        half_rows[half] = (np.array([row_of[s] for s in ids], dtype=np.int64), RankIndex(ids))
        out[half] = []
    for di, d in enumerate(decomps):
        coeffs = coefficients[di] if coefficients is not None else project_coefficients(
            d, restrict_to_roi(pool, space, d.roi), pool.kind)
        pids = d.pattern_ids()
        for half, (rows, index) in half_rows.items():
            sub = coeffs[rows]
            k = requested_count(len(rows), fraction)
            for j, pid in enumerate(pids):
                sel = index.top(sub[:, j], k, d.method)
                out[half].append(TopSet(pid, pool.kind, tuple(index.stimulus_ids[i] for i in sel),
                                        tuple(float(sub[i, j]) for i in sel), k))
    return out


def score_decompositions(decomps: Sequence[Decomposition], pools: Mapping[str, ResponsePool], space: VoxelSpace,
                         split: SplitAssignment, labels: Mapping[str, LabelMatrix],
                         fraction: float = DEFAULT_FRACTION, p0: float = DEFAULT_P0) -> ScoredRun:
    if not decomps:
        raise ValueError("no decompositions to score")
    patterns = [p for d in decomps for p in d.pattern_ids()]
    if len(set(patterns)) != len(patterns):
        raise ValueError("duplicate pattern ids across decompositions")
    per_pool = {name: pool_topsets(decomps, pool, space, split, fraction) for name, pool in sorted(pools.items())}
    tables = {half: build_score_table(patterns, {k: v[half] for k, v in per_pool.items()}, labels, half, p0)
              for half in SPLITS}
    topsets = {half: {k: v[half] for k, v in per_pool.items()} for half in SPLITS}
    return ScoredRun(tables[RANKING], tables[EVALUATION], topsets)


# ---------------------------------------------------------------- search

def _check_split(ranking: ScoreTable, evaluation: ScoreTable) -> None:
    if ranking.split != RANKING:
        raise SplitDisciplineError(f"pair selection needs a ranking-half table, got {ranking.split!r}")
    if evaluation.split != EVALUATION:
        raise SplitDisciplineError(f"reported scores need an evaluation-half table, got {evaluation.split!r}")
    if ranking.patterns != evaluation.patterns or ranking.n_hypotheses != evaluation.n_hypotheses:
        raise ValueError("ranking and evaluation tables cover different patterns or hypotheses")


def _argmax_first(values: np.ndarray) -> int | None:
    v = np.where(np.isnan(values), -np.inf, values)
    if v.size == 0 or not np.isfinite(v).any():
        return None
    return int(np.argmax(v))


def best_hypothesis(ranking: ScoreTable, evaluation: ScoreTable, pattern: PatternId) -> tuple[int, float]:
    """Highest-scoring hypothesis for a pattern on the ranking half, with its evaluation score."""
    _check_split(ranking, evaluation)
    r = ranking.row(pattern)
    h = _argmax_first(ranking.final[r])
    if h is None:
        raise ValueError(f"pattern {pattern} has no scores")
    return h, float(evaluation.final[r, h])


def best_pattern(ranking: ScoreTable, evaluation: ScoreTable, hypothesis: int, scope: str = "all",
                 roi: str | None = None) -> tuple[PatternId, float]:
    """Pattern that best explains ``hypothesis`` on the ranking half, scored on the evaluation half.

    ``scope="roi"`` restricts the search to one ROI. Ties go to the lowest pattern id.
    """
    _check_split(ranking, evaluation)
    if scope == "roi":
        if roi is None:
            raise ValueError("scope 'roi' needs an ROI name")
        rows = np.array([i for i, p in enumerate(ranking.patterns) if p.roi == roi], dtype=np.int64)
    elif scope == "all":
        rows = np.arange(len(ranking.patterns))
    else:
        raise ValueError(f"unknown scope {scope!r}")
    if rows.size == 0:
        raise ValueError("empty search scope")
    i = _argmax_first(ranking.final[rows, hypothesis])
    if i is None:
        raise ValueError(f"no pattern in scope has a score for hypothesis {hypothesis}")
    r = int(rows[i])
    return ranking.patterns[r], float(evaluation.final[r, hypothesis])


def assignments(ranking: ScoreTable, evaluation: ScoreTable) -> list[tuple[PatternId, int, float]]:
    """Each scoreable pattern with its ranking-half best hypothesis and evaluation score."""
    _check_split(ranking, evaluation)
    out = []
    for r, p in enumerate(ranking.patterns):
        h = _argmax_first(ranking.final[r])
        if h is not None:
            out.append((p, h, float(evaluation.final[r, h])))
    return out


# ---------------------------------------------------------------- dedup and metrics

def component_vectors(decomps: Iterable[Decomposition]) -> dict[PatternId, np.ndarray]:
    return {pid: d.components[i] for d in decomps for i, pid in enumerate(d.pattern_ids())}


def dedup_patterns(scored: Sequence[tuple[PatternId, float]], components: Mapping[PatternId, np.ndarray],
                   corr_threshold: float = 0.5) -> list[PatternId]:
    """Greedy keep-best: walk patterns by score (then id), keep one unless it
    correlates with an already-kept pattern of the same ROI with ``|r| > corr_threshold``.
    """
    kept: list[PatternId] = []
    kept_std: dict[str, list[np.ndarray]] = {}
    for pid, _ in sorted(scored, key=lambda t: (-t[1], t[0])):
        v = np.asarray(components[pid], dtype=np.float64)
        c = v - v.mean()
        n = float(np.sqrt(c @ c))
        z = c / n if n > 0 and np.ptp(v) > 0 else np.zeros_like(c)
        prev = kept_std.setdefault(pid.roi, [])
        if prev:
            mat = np.vstack(prev)
            if mat.shape[1] != z.shape[0]:
                raise ValueError(f"patterns in ROI {pid.roi} have different widths")
            if np.any(np.abs(np.clip(mat @ z, -1.0, 1.0)) > corr_threshold):
                continue
        prev.append(z)
        kept.append(pid)
    return kept


def metric_interpretable_hypotheses(ranking: ScoreTable, evaluation: ScoreTable, threshold: float = 0.5,
                                    hypotheses: Sequence[int] | None = None) -> float:
    """Fraction of hypotheses explained by at least one pattern.

    A pattern explains the hypothesis it scores best on in the ranking half,
    when its evaluation-half score for that hypothesis is above ``threshold``
    (strict). ``hypotheses`` restricts the denominator (default: the whole
    dictionary).
    """
    targets = range(ranking.n_hypotheses) if hypotheses is None else hypotheses
    targets = sorted(set(int(h) for h in targets))
    if not targets:
        raise ValueError("empty hypothesis set")
    explained = {h for _, h, s in assignments(ranking, evaluation) if s > threshold}
    return sum(h in explained for h in targets) / len(targets)


def explained_hypotheses(ranking: ScoreTable, evaluation: ScoreTable, threshold: float = 0.5) -> dict[int, list]:
    """Hypothesis id -> qualifying (pattern, evaluation score) pairs."""
    out: dict[int, list] = {}
    for p, h, s in assignments(ranking, evaluation):
        if s > threshold:
            out.setdefault(h, []).append((p, s))
    return out


def metric_interpretable_patterns(ranking: ScoreTable, evaluation: ScoreTable,
                                  components: Mapping[PatternId, np.ndarray], threshold: float = 0.5,
                                  corr_threshold: float = 0.5) -> int:
    """Deduplicated count of patterns whose best hypothesis clears ``threshold`` on the evaluation half."""
    qualifying = [(p, s) for p, _, s in assignments(ranking, evaluation) if s > threshold]
    return len(dedup_patterns(qualifying, components, corr_threshold))


def pairwise_complementarity(method_runs: Mapping[str, Sequence[ScoredRun]], threshold: float = 0.5,
                             hypotheses: Sequence[int] | None = None) -> tuple[list[str], np.ndarray]:
    """Gain in explained hypotheses (percentage points) from pooling two methods.

    Off-diagonal: first runs of both methods pooled, minus the better of the two
    alone. Diagonal: all runs of one method pooled, minus its first run.
    """
    names = sorted(method_runs)
    if not names or any(not method_runs[n] for n in names):
        raise ValueError("every method needs at least one run")
    hashes = {r.ranking.dictionary_hash for n in names for r in method_runs[n]}
    if len(hashes) > 1:
        raise ValueError("method tables were scored against different dictionaries")

    def metric(runs: Sequence[ScoredRun]) -> float:
        rk = concat_tables([r.ranking for r in runs])
        ev = concat_tables([r.evaluation for r in runs])
        return 100.0 * metric_interpretable_hypotheses(rk, ev, threshold, hypotheses)

    single = {n: metric(method_runs[n][:1]) for n in names}
    gain = np.zeros((len(names), len(names)))
    for i, a in enumerate(names):
        gain[i, i] = metric(method_runs[a]) - single[a]
        for j in range(i + 1, len(names)):
            b = names[j]
            g = metric([method_runs[a][0], method_runs[b][0]]) - max(single[a], single[b])
            gain[i, j] = gain[j, i] = g
    return names, gain
