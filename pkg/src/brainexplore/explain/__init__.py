"""Hypothesis generation from explanation image sets and the deduplicated hypothesis dictionary."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .. import storage
from ..core import PatternId
from .annotators import (VARIANT_A, VARIANT_B, AnnotatorSuite, BackendError, HttpAnnotatorSuite,
                         ReplayCache, unit)

log = logging.getLogger(__name__)

__all__ = [
    "AnnotatorSuite", "BackendError", "HttpAnnotatorSuite", "HypothesisDictionary", "HypothesisSet",
    "RawHypothesis", "ReplayCache", "VARIANT_A", "VARIANT_B", "build_dictionary", "generate_hypotheses",
    "load_prompts", "load_templates", "run_explain_stage", "unit",
]

MIN_HYPOTHESES, MAX_HYPOTHESES = 3, 12
EXPECTED_RANGE = (5, 10)
DEFAULT_MERGE_THRESHOLD = 0.9
DEFAULT_IN_FLIGHT = 8


def load_prompts() -> dict[str, str]:
    """Prompt texts sent to real backends, keyed by role."""
    base = resources.files(__package__) / "prompts"
    return {name: (base / f"{name}.txt").read_text(encoding="utf-8").strip()
            for name in ("caption", "hypotheses", "label_A", "label_B")}


def load_templates(path: str | Path | None = None) -> tuple[str, ...]:
    """Text-embedding templates, one ``{}`` pattern per line."""
    text = (Path(path).read_text(encoding="utf-8") if path is not None
            else (resources.files(__package__) / "prompts" / "templates.txt").read_text(encoding="utf-8"))
    templates = tuple(line.strip() for line in text.splitlines() if line.strip())
    for t in templates:
        if "{}" not in t:
            raise ValueError(f"template {t!r} lacks a '{{}}' slot")
    return templates or ("{}",)


@dataclass(frozen=True)
class HypothesisSet:
    hypotheses: tuple[str, ...]
    flags: tuple[str, ...] = ()


def generate_hypotheses(captions: Sequence[str], suite: AnnotatorSuite, retries: int = 1) -> HypothesisSet:
    """Ask the hypothesis client what the captions share.

    Blank strings are dropped and the list is cut to 12. Fewer than 3 (or
    anything outside 5..10) is flagged but kept.
    """
    if len(captions) < 2:
        raise ValueError("need at least two captions")
    last: Exception | None = None
    for attempt in range(retries + 1):
        try:
            raw = suite.hypotheses(list(captions))
            break
        except BackendError as exc:
            last = exc
            log.warning("hypothesis call attempt %d failed: %s", attempt + 1, exc)
    else:
        raise BackendError(f"hypothesis generation failed after {retries + 1} attempts") from last
    cleaned = [" ".join(h.split()) for h in raw]
    cleaned = [h for h in cleaned if h]
    flags = []
    if len(cleaned) > MAX_HYPOTHESES:
        flags.append("truncated")
        cleaned = cleaned[:MAX_HYPOTHESES]
    if len(cleaned) < MIN_HYPOTHESES:
        flags.append("under_generated")
    elif not EXPECTED_RANGE[0] <= len(cleaned) <= EXPECTED_RANGE[1]:
        flags.append("outside_expected_range")
    return HypothesisSet(tuple(cleaned), tuple(flags))


@dataclass(frozen=True)
class RawHypothesis:
    text: str
    pattern: PatternId


@dataclass
class ExplainResult:
    pool: list[RawHypothesis]
    failures: dict[PatternId, str] = field(default_factory=dict)
    flags: dict[PatternId, tuple[str, ...]] = field(default_factory=dict)


def run_explain_stage(image_sets: Mapping[PatternId, Sequence[str]], suite: AnnotatorSuite,
                      in_flight: int = DEFAULT_IN_FLIGHT) -> ExplainResult:
    """Caption every candidate's image set and collect hypotheses with provenance.

    Per-pattern failures are recorded and skipped. The pool is ordered by
    pattern id, so it does not depend on processing order.
    """
    if in_flight < 1:
        raise ValueError("in_flight must be >= 1")
    patterns = sorted(image_sets)

    def one(pid: PatternId) -> HypothesisSet:
        captions = [suite.caption(ref) for ref in image_sets[pid]]
        return generate_hypotheses(captions, suite)

    result = ExplainResult([])
    outcomes: dict[PatternId, HypothesisSet | Exception] = {}
    if in_flight == 1:
        for pid in patterns:
            try:
                outcomes[pid] = one(pid)
            except (BackendError, ValueError) as exc:
                outcomes[pid] = exc
    else:
        with ThreadPoolExecutor(max_workers=in_flight) as ex:
            futures = {pid: ex.submit(one, pid) for pid in patterns}
            for pid, fut in futures.items():
                try:
                    outcomes[pid] = fut.result()
                except (BackendError, ValueError) as exc:
                    outcomes[pid] = exc
    for pid in patterns:
        out = outcomes[pid]
        if isinstance(out, Exception):
            log.error("explain failed for %s: %s", pid, out)
            result.failures[pid] = str(out)
            continue
        if out.flags:
            result.flags[pid] = out.flags
        result.pool.extend(RawHypothesis(h, pid) for h in out.hypotheses)
    return result


@dataclass(frozen=True)
class HypothesisDictionary:
    """Deduplicated hypotheses; entry ids are dense row indices of ``embeddings``."""

    texts: tuple[str, ...]
    embeddings: np.ndarray
    merge_log: tuple[int, ...]  # raw hypothesis position -> entry id
    merge_threshold: float = DEFAULT_MERGE_THRESHOLD
    templates: tuple[str, ...] = ("{}",)

    def __len__(self) -> int:
        return len(self.texts)

    def members(self, entry: int, raw: Sequence[str]) -> list[str]:
        return [raw[i] for i, e in enumerate(self.merge_log) if e == entry]

    def content_hash(self) -> str:
        header = storage.canonical_json(self._header())
        return storage.sha256_hex(header.encode("utf-8") + storage.matrix_to_bytes(self.embeddings))

    def _header(self) -> dict:
        return {"texts": list(self.texts), "merge_log": list(self.merge_log),
                "merge_threshold": self.merge_threshold, "templates": list(self.templates)}

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        storage.save_matrix(d / "dictionary_embeddings.bxm", self.embeddings)
        storage.save_json(d / "dictionary.json", self._header())

    @classmethod
    def load(cls, directory: str | Path) -> "HypothesisDictionary":
        d = Path(directory)
        meta = storage.load_json(d / "dictionary.json")
        emb = storage.load_matrix(d / "dictionary_embeddings.bxm").astype(np.float64)
        return cls(tuple(meta["texts"]), emb, tuple(meta["merge_log"]), float(meta["merge_threshold"]),
                   tuple(meta["templates"]))


def build_dictionary(raw_hypotheses: Iterable[str], embed_text: Callable[[str], np.ndarray],
                     merge_threshold: float = DEFAULT_MERGE_THRESHOLD,
                     templates: Sequence[str] = ("{}",)) -> HypothesisDictionary:
    """Greedy first-fit merge in input order.

    Each hypothesis joins the first existing entry whose embedding has cosine
    >= ``merge_threshold`` with its own, otherwise it founds a new entry. The
    entry keeps the founder's text and embedding. Embeddings used for merging
    come from the bare text; ``templates`` are carried along for shortlisting.
    """
    raw = list(raw_hypotheses)
    if not raw:
        raise ValueError("no hypotheses to merge")
    cache: dict[str, np.ndarray] = {}
    entries: list[np.ndarray] = []
    texts: list[str] = []
    merge_log: list[int] = []
    mat = np.zeros((0, 0))
    for h in raw:
        if h not in cache:
            cache[h] = unit(embed_text(h))
        e = cache[h]
        hit = None
        if entries:
            sims = mat @ e
            above = np.flatnonzero(sims >= merge_threshold)
            hit = int(above[0]) if above.size else None
        if hit is None:
            hit = len(entries)
            entries.append(e)
            texts.append(h)
            mat = np.vstack(entries)
        merge_log.append(hit)
    return HypothesisDictionary(tuple(texts), mat, tuple(merge_log), float(merge_threshold), tuple(templates))
