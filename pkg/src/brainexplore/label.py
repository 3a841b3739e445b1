"""Sparse stimulus x hypothesis labels: embedding shortlist, then two-pass verification."""

from __future__ import annotations

import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import sparse

from . import storage
from .core import PoolKind
from .explain import HypothesisDictionary
from .explain.annotators import VARIANT_A, VARIANT_B, AnnotatorSuite, BackendError, unit

log = logging.getLogger(__name__)

LABEL_MAGIC = b"BXLAB1\x00"
DEFAULT_SHORTLIST = 300
_LEN = struct.Struct("<Q")


class LabelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LabelMatrix:
    """Positive (stimulus row, hypothesis id) pairs, canonically sorted, plus frequencies."""

    stimulus_ids: tuple[str, ...]
    n_hypotheses: int
    pairs: np.ndarray  # M x 2, int64, sorted lexicographically, unique
    pool_kind: PoolKind = PoolKind.MEASURED
    dictionary_hash: str = ""
    meta: Mapping = field(default_factory=dict)

    def __post_init__(self):
        p = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if p.size:
            if p.min() < 0 or p[:, 0].max() >= len(self.stimulus_ids) or p[:, 1].max() >= self.n_hypotheses:
                raise ValueError("label pair outside matrix bounds")
            p = np.unique(p, axis=0)
        p.setflags(write=False)
        object.__setattr__(self, "pairs", p)
        object.__setattr__(self, "pool_kind", PoolKind(self.pool_kind))
        object.__setattr__(self, "_row", {s: i for i, s in enumerate(self.stimulus_ids)})

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.stimulus_ids), self.n_hypotheses

    @property
    def n_positive(self) -> int:
        return len(self.pairs)

    @property
    def frequencies(self) -> np.ndarray:
        """p_h: positives per hypothesis over all stimuli in the pool."""
        counts = np.bincount(self.pairs[:, 1], minlength=self.n_hypotheses).astype(np.float64)
        return counts / max(1, len(self.stimulus_ids))

    def row_of(self, stimulus_id: str) -> int:
        return self._row[stimulus_id]

    def to_csr(self) -> sparse.csr_matrix:
        data = np.ones(len(self.pairs), dtype=np.float64)
        return sparse.csr_matrix((data, (self.pairs[:, 0], self.pairs[:, 1])), shape=self.shape)

    def positives(self, stimulus_id: str) -> set[int]:
        r = self._row[stimulus_id]
        lo, hi = np.searchsorted(self.pairs[:, 0], [r, r + 1])
        return {int(h) for h in self.pairs[lo:hi, 1]}

    def is_positive(self, stimulus_id: str, hypothesis: int) -> bool:
        return hypothesis in self.positives(stimulus_id)

    def to_bytes(self) -> bytes:
        header = {
            "shape": list(self.shape), "pool": self.pool_kind.value, "dictionary_hash": self.dictionary_hash,
            "stimulus_ids": list(self.stimulus_ids), "n_pairs": self.n_positive,
            "frequencies": [float(f) for f in self.frequencies], "meta": dict(self.meta),
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        body = self.pairs.astype("<u4").tobytes()
        return LABEL_MAGIC + _LEN.pack(len(hbytes)) + hbytes + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "LabelMatrix":
        if data[:len(LABEL_MAGIC)] != LABEL_MAGIC:
            raise LabelFormatError("bad magic at offset 0")
        off = len(LABEL_MAGIC)
        if len(data) < off + _LEN.size:
            raise LabelFormatError(f"truncated header length at offset {off}")
        (hlen,) = _LEN.unpack_from(data, off)
        off += _LEN.size
        if len(data) < off + hlen:
            raise LabelFormatError(f"truncated header at offset {off}")
        header = json.loads(data[off:off + hlen].decode("utf-8"))
        off += hlen
        n_pairs = int(header["n_pairs"])
        if len(data) != off + 8 * n_pairs:
            raise LabelFormatError(f"pair block at offset {off} has {len(data) - off} bytes, expected {8 * n_pairs}")
        pairs = np.frombuffer(data, dtype="<u4", count=2 * n_pairs, offset=off).astype(np.int64).reshape(-1, 2)
        n_stim, n_hyp = header["shape"]
        if len(header["stimulus_ids"]) != n_stim:
            raise LabelFormatError("stimulus id list does not match shape")
        out = cls(tuple(header["stimulus_ids"]), int(n_hyp), pairs, PoolKind(header["pool"]),
                  header["dictionary_hash"], header.get("meta", {}))
        if out.n_positive != n_pairs or not np.array_equal(out.frequencies, np.asarray(header["frequencies"])):
            raise LabelFormatError("stored frequencies do not match the pair list")
        return out

    def save(self, path: str | Path) -> None:
        storage.write_bytes_atomic(Path(path), self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "LabelMatrix":
        return cls.from_bytes(Path(path).read_bytes())


def template_embeddings(dictionary: HypothesisDictionary, embed_text) -> np.ndarray:
    """T x H x D stack of unit text embeddings, one slice per template."""
    if tuple(dictionary.templates) == ("{}",):
        return dictionary.embeddings[None, :, :]
    return np.stack([np.stack([unit(embed_text(t.format(h))) for h in dictionary.texts])
                     for t in dictionary.templates])


def shortlist_scores(image_embedding: np.ndarray, text_stack: np.ndarray) -> np.ndarray:
    """Max over templates of cosine similarity, per hypothesis."""
    return np.max(text_stack @ np.asarray(image_embedding, dtype=np.float64), axis=0)


def top_k_ids(scores: np.ndarray, k: int) -> np.ndarray:
    """Ids of the ``k`` largest scores; ties go to the lower hypothesis id."""
    order = np.lexsort((np.arange(len(scores)), -scores))
    return order[:k]


def shortlist(image_embedding: np.ndarray, dictionary: HypothesisDictionary, k: int = DEFAULT_SHORTLIST,
              text_stack: np.ndarray | None = None, embed_text=None) -> np.ndarray:
    if k < 1:
        raise ValueError("k must be >= 1")
    if text_stack is None:
        text_stack = template_embeddings(dictionary, embed_text)
    return top_k_ids(shortlist_scores(image_embedding, text_stack), k)


def verify(stimulus_id: str, hypothesis: str, suite: AnnotatorSuite) -> bool:
    """Positive only if variant A and then variant B both say 1.

    A failed call counts as a negative; B is skipped when A says 0.
    """
    try:
        if suite.label(stimulus_id, hypothesis, VARIANT_A) != 1:
            return False
        return suite.label(stimulus_id, hypothesis, VARIANT_B) == 1
    except BackendError as exc:
        log.warning("label call failed for (%s, %r); counted as negative: %s", stimulus_id, hypothesis, exc)
        return False


def build_label_matrix(stimulus_ids: Sequence[str], dictionary: HypothesisDictionary, suite: AnnotatorSuite,
                       pool_kind: PoolKind | str = PoolKind.MEASURED, k: int = DEFAULT_SHORTLIST,
                       in_flight: int = 1) -> LabelMatrix:
    """Shortlist then verify every (stimulus, shortlisted hypothesis) pair.

    Frequencies use the whole pool as denominator. A stimulus whose image
    embedding fails contributes no positives and is logged.
    """
    ids = tuple(stimulus_ids)
    text_stack = template_embeddings(dictionary, suite.embed_text)
    texts = dictionary.texts
    failed: list[str] = []

    def one(row: int) -> list[tuple[int, int]]:
        sid = ids[row]
        try:
            img = suite.embed_image(sid)
        except BackendError as exc:
            log.error("image embedding failed for %s: %s", sid, exc)
            failed.append(sid)
            return []
        cand = shortlist(img, dictionary, k, text_stack)
        return [(row, int(h)) for h in cand if verify(sid, texts[h], suite)]

    if in_flight <= 1:
        found = [one(r) for r in range(len(ids))]
    else:
        with ThreadPoolExecutor(max_workers=in_flight) as ex:
            found = list(ex.map(one, range(len(ids))))
    flat = [p for rows in found for p in rows]
    pairs = np.array(flat, dtype=np.int64).reshape(-1, 2)
    meta = {"shortlist_k": k, "template_aggregation": "max", "templates": list(dictionary.templates),
            "failed_stimuli": sorted(failed)}
    return LabelMatrix(ids, len(dictionary), pairs, PoolKind(pool_kind), dictionary.content_hash(), meta)
