"""In-memory end-to-end run: decompose, retrieve, explain, label, score."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import Decomposition, PatternId, PoolKind, ResponsePool, VoxelSpace, project_coefficients, restrict_to_roi
from .decompose import FitConfig, fit_method
from .explain import ExplainResult, HypothesisDictionary, build_dictionary, run_explain_stage
from .explain.annotators import AnnotatorSuite
from .label import DEFAULT_SHORTLIST, LabelMatrix, build_label_matrix
from .retrieve import (DEFAULT_FRACTION, N_EXPLAIN_MEASURED, N_EXPLAIN_PREDICTED, RankIndex, TopSet,
                       consistency_score, explanation_image_set, select_candidates)
from .score import (DEFAULT_P0, RANKING, ScoredRun, SplitAssignment, score_decompositions, split_pools)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    methods: tuple[FitConfig, ...] = (FitConfig("ica", variance_thresholds=(0.98,)), FitConfig("sae"))
    split_seed: int = 0
    retrieval_fraction: float = DEFAULT_FRACTION
    candidates_per_group: int = 40
    merge_threshold: float = 0.9
    shortlist_k: int = DEFAULT_SHORTLIST
    p0: float = DEFAULT_P0
    in_flight: int = 1


@dataclass
class PipelineResult:
    decompositions: list[Decomposition]
    split: SplitAssignment
    candidates: list[PatternId]
    explain: ExplainResult
    dictionary: HypothesisDictionary
    labels: dict[str, LabelMatrix]
    scored: ScoredRun
    consistency: dict[PatternId, float] = field(default_factory=dict)


def decompose_all(configs: Sequence[FitConfig], pools: Mapping[str, ResponsePool], space: VoxelSpace,
                  rois: Sequence[str] | None = None) -> list[Decomposition]:
    measured = pools[PoolKind.MEASURED.value]
    predicted = pools.get(PoolKind.PREDICTED.value)
    out = []
    for roi in rois or space.roi_names:
        xm = restrict_to_roi(measured, space, roi)
        xp = restrict_to_roi(predicted, space, roi) if predicted is not None else None
        for cfg in configs:
            log.info("fitting %s on %s", cfg.method, roi)
            out.extend(fit_method(cfg, xm, xp, roi))
    return out


def explanation_sets(decomps: Sequence[Decomposition], pools: Mapping[str, ResponsePool], space: VoxelSpace,
                     split: SplitAssignment) -> dict[PatternId, tuple[str, ...]]:
    """Ranking-half explanation images (6 measured + 10 predicted) for every pattern with any activation."""
    counts = {PoolKind.MEASURED.value: N_EXPLAIN_MEASURED, PoolKind.PREDICTED.value: N_EXPLAIN_PREDICTED}
    tops: dict[str, dict[PatternId, TopSet]] = {}
    for name, pool in pools.items():
        ids = split.ids(name, RANKING)
        row_of = {s: i for i, s in enumerate(pool.stimulus_ids)}
        rows = np.array([row_of[s] for s in ids], dtype=np.int64)
        index = RankIndex(ids)
        tops[name] = {}
        for d in decomps:
            coeffs = project_coefficients(d, restrict_to_roi(pool, space, d.roi)[rows], pool.kind)
            for j, pid in enumerate(d.pattern_ids()):
                sel = index.top(coeffs[:, j], counts[name], d.method)
                tops[name][pid] = TopSet(pid, pool.kind, tuple(ids[i] for i in sel),
                                         tuple(float(coeffs[i, j]) for i in sel), counts[name])
    out = {}
    for d in decomps:
        for pid in d.pattern_ids():
            m = tops.get(PoolKind.MEASURED.value, {}).get(pid)
            p = tops.get(PoolKind.PREDICTED.value, {}).get(pid)
            if (m is None or m.empty) and (p is None or p.empty):
                log.debug("pattern %s never activates; skipped", pid)
                continue
            out[pid] = explanation_image_set(pid, m, p).stimulus_ids
    return out


def consistency_scores(image_sets: Mapping[PatternId, Sequence[str]], suite: AnnotatorSuite) -> dict[PatternId, float]:
    cache: dict[str, np.ndarray] = {}

    def emb(ref):
        if ref not in cache:
            cache[ref] = suite.embed_image(ref)
        return cache[ref]

    return {pid: consistency_score([emb(r) for r in refs]) for pid, refs in image_sets.items() if len(refs) >= 2}


def run_pipeline(pools: Mapping[str, ResponsePool], space: VoxelSpace, suite: AnnotatorSuite,
                 config: PipelineConfig = PipelineConfig(),
                 decompositions: Sequence[Decomposition] | None = None) -> PipelineResult:
    """Whole flow on in-memory pools; pass ``decompositions`` to skip fitting."""
    decomps = list(decompositions) if decompositions is not None else decompose_all(config.methods, pools, space)
    split = split_pools({k: p.stimulus_ids for k, p in pools.items()}, config.split_seed)
    sets = explanation_sets(decomps, pools, space, split)
    cons = consistency_scores(sets, suite)
    candidates = select_candidates(cons, config.candidates_per_group)
    explained = run_explain_stage({p: sets[p] for p in candidates}, suite, config.in_flight)
    dictionary = build_dictionary([r.text for r in explained.pool], suite.embed_text, config.merge_threshold)
    labels = {k: build_label_matrix(p.stimulus_ids, dictionary, suite, k, config.shortlist_k, config.in_flight)
              for k, p in sorted(pools.items())}
    scored = score_decompositions(decomps, pools, space, split, labels, config.retrieval_fraction, config.p0)
    return PipelineResult(decomps, split, candidates, explained, dictionary, labels, scored, cons)


def rescore(result: PipelineResult, decomps: Sequence[Decomposition], pools: Mapping[str, ResponsePool],
            space: VoxelSpace, config: PipelineConfig = PipelineConfig()) -> ScoredRun:
    """Score other decompositions against an existing run's split, dictionary and labels."""
    return score_decompositions(decomps, pools, space, result.split, result.labels,
                                config.retrieval_fraction, config.p0)


def concept_hypotheses(dictionary: HypothesisDictionary, concept_of, n_concepts: int) -> dict[int, int]:
    """Planted concept index -> first dictionary entry naming it."""
    out: dict[int, int] = {}
    for h, text in enumerate(dictionary.texts):
        c = concept_of(text)
        if c is not None and c not in out:
            out[c] = h
    return {c: out[c] for c in sorted(out) if c < n_concepts}
