"""Annotator backends: the interface, an HTTP client, and a replayable JSONL cache."""

from __future__ import annotations

import json
import logging
import threading
import time
from pathlib import Path
from typing import Any, Protocol, Sequence, runtime_checkable

import httpx
import numpy as np

from ..storage import sha256_hex

log = logging.getLogger(__name__)

VARIANT_A = "A"
VARIANT_B = "B"


class BackendError(RuntimeError):
    """An annotator call failed after all retries (or is absent from an offline cache)."""


@runtime_checkable
class AnnotatorSuite(Protocol):
    """Captioning, hypothesis generation, binary labeling and embedding.

    Implementations must be deterministic for a fixed backend configuration and
    return L2-normalized embedding vectors.
    """

    def caption(self, image_ref: str) -> str: ...

    def hypotheses(self, captions: Sequence[str]) -> list[str]: ...

    def label(self, image_ref: str, hypothesis: str, variant: str) -> int: ...

    def embed_text(self, text: str) -> np.ndarray: ...

    def embed_image(self, image_ref: str) -> np.ndarray: ...


def unit(vec: Sequence[float]) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0.0:
        raise BackendError("embedding has zero or non-finite norm")
    return v / n


class ReplayCache:
    """Append-only JSONL log of request/response pairs keyed by a request hash."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self._entries: dict[str, Any] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._entries[rec["key"]] = rec["response"]

    @staticmethod
    def key(endpoint: str, payload: dict) -> str:
        return sha256_hex(endpoint + "\n" + json.dumps(payload, sort_keys=True, ensure_ascii=False))

    def get(self, endpoint: str, payload: dict) -> Any | None:
        return self._entries.get(self.key(endpoint, payload))

    def put(self, endpoint: str, payload: dict, response: Any) -> None:
        k = self.key(endpoint, payload)
        with self._lock:
            if k in self._entries:
                return
            self._entries[k] = response
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                rec = {"key": k, "endpoint": endpoint, "request": payload, "response": response}
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")

    def __len__(self) -> int:
        return len(self._entries)


class HttpAnnotatorSuite:
    """Client for the JSON-over-HTTP annotator protocol.

    Endpoints (all POST): ``/caption``, ``/hypotheses``, ``/label``,
    ``/embed_text``, ``/embed_image``. Every exchange is recorded in the replay
    cache; with ``offline=True`` only cached responses are served.
    """

    def __init__(self, base_url: str = "http://localhost:8000", cache_path: str | Path | None = None,
                 timeout: float = 60.0, retries: int = 2, backoff: float = 0.5, offline: bool = False,
                 transport: httpx.BaseTransport | None = None, prompts: dict[str, str] | None = None,
                 headers: dict[str, str] | None = None):
        self.cache = ReplayCache(cache_path)
        self.retries = retries
        self.backoff = backoff
        self.offline = offline
        self.prompts = prompts or {}
        self._client = None if offline and transport is None else httpx.Client(
            base_url=base_url, timeout=timeout, transport=transport, headers=headers)

    def close(self) -> None:
        if self._client is not None:
            self._client.close()

    def _post(self, endpoint: str, payload: dict) -> dict:
        cached = self.cache.get(endpoint, payload)
        if cached is not None:
            return cached
        if self.offline or self._client is None:
            raise BackendError(f"offline replay miss for {endpoint}")
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._client.post(endpoint, json=payload)
                resp.raise_for_status()
                body = resp.json()
                self.cache.put(endpoint, payload, body)
                return body
            except (httpx.HTTPError, ValueError) as exc:
                last = exc
                log.warning("%s attempt %d failed: %s", endpoint, attempt + 1, exc)
                if attempt < self.retries and self.backoff:
                    time.sleep(self.backoff * 2 ** attempt)
        raise BackendError(f"{endpoint} failed after {self.retries + 1} attempts: {last}")

    def _with_prompt(self, name: str, payload: dict) -> dict:
        if name in self.prompts:
            payload = dict(payload, prompt=self.prompts[name])
        return payload

    def caption(self, image_ref: str) -> str:
        return str(self._post("/caption", self._with_prompt("caption", {"image_ref": image_ref}))["caption"])

    def hypotheses(self, captions: Sequence[str]) -> list[str]:
        body = self._post("/hypotheses", self._with_prompt("hypotheses", {"captions": list(captions)}))
        return [str(h) for h in body["hypotheses"]]

    def label(self, image_ref: str, hypothesis: str, variant: str) -> int:
        payload = {"image_ref": image_ref, "hypothesis": hypothesis, "variant": variant}
        body = self._post("/label", self._with_prompt(f"label_{variant}", payload))
        lab = int(body["label"])
        if lab not in (0, 1):
            raise BackendError(f"label must be 0 or 1, got {lab}")
        return lab

    def embed_text(self, text: str) -> np.ndarray:
        return unit(self._post("/embed_text", {"text": text})["vector"])

    def embed_image(self, image_ref: str) -> np.ndarray:
        return unit(self._post("/embed_image", {"image_ref": image_ref})["vector"])
