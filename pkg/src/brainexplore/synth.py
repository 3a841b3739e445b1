"""Synthetic ground-truth world: planted concepts, voxel signatures, responses, oracle annotators."""

from __future__ import annotations

import dataclasses
import hashlib
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import (Decomposition, PatternId, PoolKind, ResponsePool, VoxelSpace,
                   project_coefficients, restrict_to_roi)
from .explain.annotators import unit

CONCEPT_WORDS = (
    "surfboard", "kitchen", "giraffe", "staircase", "umbrella", "bicycle", "waterfall", "violin",
    "pizza", "lighthouse", "tennis racket", "snowfield", "bookshelf", "sailboat", "cactus",
    "traffic light", "keyboard", "horse", "bridge", "candle", "ladder", "teapot", "windmill",
    "parrot", "skateboard", "fountain", "tractor", "chessboard", "hammock", "lantern", "robot",
    "volcano", "zebra", "trumpet", "igloo", "kayak", "mailbox", "pumpkin", "rocket", "telescope",
)

DISTRACTORS = (
    "natural lighting", "a casual snapshot", "everyday objects", "muted colors", "a busy composition",
    "centered framing", "soft focus", "outdoor daylight", "a cluttered background", "medium distance shot",
)

PARAPHRASES = ("{}", "a photo of {}", "images showing {}", "{} in view")
_PARAPHRASE_RES = [re.compile("^" + re.escape(t).replace(r"\{\}", "(.+)") + "$") for t in PARAPHRASES[1:]]


@dataclass(frozen=True)
class WorldSpec:
    seed: int = 0
    n_voxels: int = 2000
    n_concepts: int = 20
    rois: int | tuple[str, ...] = 5
    n_measured: int = 5000
    n_predicted: int = 20000
    sigma_measured: float = 0.1
    sigma_predicted: float = 0.05
    prevalences: tuple[float, ...] | None = None
    prevalence_range: tuple[float, float] = (0.06, 0.14)
    concept_variance: float = 25.0
    overlap: float = 0.1
    subject_id: str = "synthetic"

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("rois", "prevalences", "prevalence_range"):
            if isinstance(d[k], tuple):
                d[k] = list(d[k])
        return d

    @classmethod
    def from_json(cls, obj: Mapping) -> "WorldSpec":
        obj = dict(obj)
        for k in ("rois", "prevalences", "prevalence_range"):
            if isinstance(obj.get(k), list):
                obj[k] = tuple(obj[k])
        return cls(**obj)


@dataclass(frozen=True)
class ConceptWorld:
    spec: WorldSpec
    space: VoxelSpace
    concepts: tuple[str, ...]
    concept_roi: tuple[str, ...]
    signatures: np.ndarray  # C x V, unit rows supported inside one ROI
    amplitudes: np.ndarray  # C
    prevalences: np.ndarray  # C
    stimulus_ids: tuple[str, ...]
    labels: np.ndarray  # N x C bool
    pool_ids: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.stimulus_ids)})
        object.__setattr__(self, "_concept_index", {c: i for i, c in enumerate(self.concepts)})

    @property
    def n_concepts(self) -> int:
        return len(self.concepts)

    def stimulus_index(self, stimulus_id: str) -> int:
        return self._index[stimulus_id]

    def stimulus_concepts(self, stimulus_id: str) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.labels[self._index[stimulus_id]])]

    def concept_of(self, text: str) -> int | None:
        """Planted concept named by ``text`` (canonical name or a paraphrase), else None."""
        t = " ".join(text.strip().lower().split())
        if t in self._concept_index:
            return self._concept_index[t]
        for rx in _PARAPHRASE_RES:
            m = rx.match(t)
            if m and m.group(1) in self._concept_index:
                return self._concept_index[m.group(1)]
        return None

    def image_embedding(self, stimulus_id: str) -> np.ndarray:
        vec = np.zeros(self.embedding_dim)
        cs = self.stimulus_concepts(stimulus_id)
        if cs:
            vec[cs] = 1.0
        else:
            vec[self.n_concepts] = 1.0
        return vec / np.linalg.norm(vec)

    @property
    def embedding_dim(self) -> int:
        # concepts, one background axis, 32 axes for free text
        return self.n_concepts + 1 + 32


def _concept_names(n: int) -> tuple[str, ...]:
    if n <= len(CONCEPT_WORDS):
        return CONCEPT_WORDS[:n]
    return tuple(f"concept {i:03d}" for i in range(n))


def _roi_names(rois: int | Sequence[str]) -> tuple[str, ...]:
    if isinstance(rois, int):
        if rois < 1:
            raise ValueError("need at least one ROI")
        return tuple(f"roi{i}" for i in range(rois))
    return tuple(rois)


def world_from_spec(spec: WorldSpec) -> ConceptWorld:
    names = _roi_names(spec.rois)
    v, c = spec.n_voxels, spec.n_concepts
    if c < 1:
        raise ValueError("need at least one concept")
    if c > v / 4:
        raise ValueError(f"infeasible orthogonality request: {c} concepts need V >= {4 * c} voxels")
    if len(names) > v:
        raise ValueError("more ROIs than voxels")
    rng = np.random.default_rng([spec.seed, 0])

    perm = rng.permutation(v)
    parts = np.array_split(perm, len(names))
    space = VoxelSpace(spec.subject_id, v, {n: tuple(sorted(int(i) for i in p)) for n, p in zip(names, parts)})

    concept_roi = tuple(names[i % len(names)] for i in range(c))
    signatures = np.zeros((c, v))
    for roi in names:
        members = [i for i in range(c) if concept_roi[i] == roi]
        if not members:
            continue
        idx = space.indices(roi)
        if len(members) > len(idx) / 4:
            raise ValueError(f"infeasible orthogonality request in ROI {roi}")
        for _ in range(20):
            q, _ = np.linalg.qr(rng.standard_normal((len(idx), len(members))))
            block = q.T + spec.overlap * np.array([unit(r) for r in rng.standard_normal((len(members), len(idx)))])
            block /= np.linalg.norm(block, axis=1, keepdims=True)
            gram = block @ block.T
            np.fill_diagonal(gram, 0.0)
            if np.abs(gram).max(initial=0.0) <= 0.1:
                break
        else:
            raise ValueError(f"could not reach |cos| <= 0.1 in ROI {roi}")
        signatures[np.ix_(members, idx)] = block

    if spec.prevalences is not None:
        prev = np.asarray(spec.prevalences, dtype=np.float64)
        if prev.shape != (c,):
            raise ValueError(f"expected {c} prevalences")
    else:
        lo, hi = spec.prevalence_range
        prev = rng.uniform(lo, hi, size=c)
    if np.any((prev <= 0) | (prev >= 1)):
        raise ValueError("prevalences must lie in (0, 1)")
    amplitudes = np.sqrt(spec.concept_variance / (prev * (1 - prev)))

    ids_m = tuple(f"m{i:06d}" for i in range(spec.n_measured))
    ids_p = tuple(f"p{i:06d}" for i in range(spec.n_predicted))
    n = spec.n_measured + spec.n_predicted
    labels = rng.random((n, c)) < prev

    return ConceptWorld(spec, space, _concept_names(c), concept_roi, signatures, amplitudes, prev,
                        ids_m + ids_p, labels, {"measured": ids_m, "predicted": ids_p})


def gen_world(seed: int = 0, n_voxels: int = 2000, n_concepts: int = 20, rois: int | Sequence[str] = 5,
              prevalences: Sequence[float] | None = None, **kwargs) -> ConceptWorld:
    if prevalences is not None:
        prevalences = tuple(float(p) for p in prevalences)
    if not isinstance(rois, int):
        rois = tuple(rois)
    return world_from_spec(WorldSpec(seed=seed, n_voxels=n_voxels, n_concepts=n_concepts, rois=rois,
                                     prevalences=prevalences, **kwargs))


def gen_responses(world: ConceptWorld, stimulus_ids: Iterable[str] | None = None,
                  pool_kind: PoolKind | str = PoolKind.MEASURED, noise: float | None = None,
                  chunk: int = 4096) -> ResponsePool:
    """Noisy responses: sum of (label * amplitude * signature) plus gaussian noise."""
    kind = PoolKind(pool_kind)
    if stimulus_ids is None:
        stimulus_ids = world.pool_ids[kind.value]
    ids = list(stimulus_ids)
    if noise is None:
        noise = world.spec.sigma_measured if kind is PoolKind.MEASURED else world.spec.sigma_predicted
    rows = np.array([world.stimulus_index(s) for s in ids], dtype=np.int64)
    loadings = world.amplitudes[:, None] * world.signatures
    rng = np.random.default_rng([world.spec.seed, 1 if kind is PoolKind.MEASURED else 2])
    out = np.empty((len(ids), world.space.total_voxels))
    for start in range(0, len(ids), chunk):
        sl = slice(start, start + chunk)
        out[sl] = world.labels[rows[sl]].astype(np.float64) @ loadings
        if noise > 0:
            out[sl] += noise * rng.standard_normal(out[sl].shape)
    return ResponsePool(kind, ids, out)


def _hash_unit(*parts: object) -> float:
    h = hashlib.blake2b("\x1f".join(map(str, parts)).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(h, "little") / 2.0 ** 64


def _hash_rng(*parts: object) -> np.random.Generator:
    h = hashlib.blake2b("\x1f".join(map(str, parts)).encode("utf-8"), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(h, "little"))


class OracleSuite:
    """Annotator suite answering from the world's ground truth."""

    def __init__(self, world: ConceptWorld, flip_noise: float = 0.0, jitter: float = 0.0, seed: int = 0):
        if not 0.0 <= flip_noise < 0.5:
            raise ValueError("flip_noise must lie in [0, 0.5)")
        self.world = world
        self.flip_noise = flip_noise
        self.jitter = jitter
        self.seed = seed
        self.calls: dict[str, int] = {"caption": 0, "hypotheses": 0, "label": 0, "embed_text": 0, "embed_image": 0}

    def caption(self, image_ref: str) -> str:
        self.calls["caption"] += 1
        names = [self.world.concepts[c] for c in self.world.stimulus_concepts(image_ref)]
        if not names:
            return "A picture with nothing notable."
        return "A picture with " + "; ".join(names) + "."

    def _caption_concepts(self, caption: str) -> set[int]:
        body = caption.strip().removeprefix("A picture with ").removesuffix(".")
        return {c for c in (self.world.concept_of(p) for p in body.split(";")) if c is not None}

    def hypotheses(self, captions: Sequence[str]) -> list[str]:
        self.calls["hypotheses"] += 1
        counts: dict[int, int] = {}
        for cap in captions:
            for c in self._caption_concepts(cap):
                counts[c] = counts.get(c, 0) + 1
        shared = sorted((c for c, k in counts.items() if 2 * k >= len(captions)), key=lambda c: (-counts[c], c))
        out = [self.world.concepts[c] for c in shared]
        if len(out) < 3:
            rng = _hash_rng(self.seed, "distract", *captions)
            extra = rng.choice(len(DISTRACTORS), size=3 - len(out), replace=False)
            out.extend(DISTRACTORS[i] for i in sorted(extra))
        return out

    def truth(self, image_ref: str, hypothesis: str) -> bool:
        c = self.world.concept_of(hypothesis)
        return c is not None and bool(self.world.labels[self.world.stimulus_index(image_ref), c])

    def label(self, image_ref: str, hypothesis: str, variant: str) -> int:
        self.calls["label"] += 1
        bit = self.truth(image_ref, hypothesis)
        if self.flip_noise and _hash_unit(self.seed, image_ref, hypothesis, variant) < self.flip_noise:
            bit = not bit
        return int(bit)

    def embed_text(self, text: str) -> np.ndarray:
        self.calls["embed_text"] += 1
        w = self.world
        vec = np.zeros(w.embedding_dim)
        c = w.concept_of(text)
        rng = _hash_rng(self.seed, "text", text)
        if c is not None:
            vec[c] = 1.0
        else:
            vec[w.n_concepts + 1:] = rng.standard_normal(w.embedding_dim - w.n_concepts - 1)
            vec /= np.linalg.norm(vec)
        if self.jitter:
            vec = vec + self.jitter * rng.standard_normal(vec.shape)
        return unit(vec)

    def embed_image(self, image_ref: str) -> np.ndarray:
        self.calls["embed_image"] += 1
        vec = self.world.image_embedding(image_ref)
        if self.jitter:
            vec = vec + self.jitter * _hash_rng(self.seed, "image", image_ref).standard_normal(vec.shape)
        return unit(vec)


def oracle_annotators(world: ConceptWorld, flip_noise: float = 0.0, jitter: float = 0.0, seed: int = 0) -> OracleSuite:
    return OracleSuite(world, flip_noise=flip_noise, jitter=jitter, seed=seed)


@dataclass(frozen=True)
class BruteForceResult:
    pattern: PatternId
    score: float
    scores: Mapping[PatternId, tuple[float, float]]  # pattern -> (ranking score, evaluation score)


def _brute_top(coeffs: Sequence[float], ids: Sequence[str], k: int, method: str) -> list[str]:
    keep = [(float(c), s) for c, s in zip(coeffs, ids) if (c >= 0.01 if method == "sae" else c > 0)]
    keep.sort(key=lambda t: (-t[0], t[1]))
    return [s for _, s in keep[:k]]


def brute_force_best_pattern(world: ConceptWorld, decompositions: Sequence[Decomposition], hypothesis: str,
                             pools: Mapping[str, ResponsePool], halves: Mapping[str, Mapping[str, Sequence[str]]],
                             fraction: float = 0.002, p0: float = 0.05, scope: str = "all",
                             roi: str | None = None) -> BruteForceResult:
    """Exhaustive recomputation of every pattern's score for one hypothesis.

    Top stimuli come from a full sort, labels from the world's ground truth and
    counts from plain set intersection. ``halves`` maps pool name to
    ``{"ranking": ids, "evaluation": ids}``. The best pattern is chosen on the
    ranking half (ties to the lowest id) and reported with its evaluation score.
    """
    if not decompositions:
        raise ValueError("no decompositions given")
    c = world.concept_of(hypothesis)
    positives = set() if c is None else {world.stimulus_ids[i] for i in np.flatnonzero(world.labels[:, c])}
    scores: dict[PatternId, tuple[float, float]] = {}
    for d in decompositions:
        if scope == "roi" and d.roi != roi:
            continue
        per_half: dict[str, list[list[float]]] = {"ranking": [], "evaluation": []}
        for name, pool in sorted(pools.items()):
            ids_all = pool.stimulus_ids
            p_h = len(positives & set(ids_all)) / len(ids_all)
            factor = 2.0 if p_h == 0 else min(2.0, max(1.0, p0 / p_h))
            coeffs = project_coefficients(d, restrict_to_roi(pool, world.space, d.roi), pool.kind)
            pos = {s: i for i, s in enumerate(ids_all)}
            for half in ("ranking", "evaluation"):
                ids = list(halves[name][half])
                k = max(1, int(np.floor(fraction * len(ids) + 0.5)))
                sub = coeffs[[pos[s] for s in ids]]
                for j in range(d.n_components):
                    top = _brute_top(sub[:, j], ids, k, d.method)
                    val = min(1.0, len(set(top) & positives) / len(top) * factor) if top else None
                    if len(per_half[half]) <= j:
                        per_half[half].append([])
                    if val is not None:
                        per_half[half][j].append(val)
        for j, pid in enumerate(d.pattern_ids()):
            r, e = per_half["ranking"][j], per_half["evaluation"][j]
            scores[pid] = (sum(r) / len(r) if r else float("nan"), sum(e) / len(e) if e else float("nan"))
    if not scores:
        raise ValueError("empty search scope")
    ranked = [p for p in sorted(scores) if not np.isnan(scores[p][0])]
    if not ranked:
        raise ValueError("no pattern has activating stimuli")
    top_score = max(scores[p][0] for p in ranked)
    best = next(p for p in ranked if scores[p][0] == top_score)
    return BruteForceResult(best, scores[best][1], scores)
