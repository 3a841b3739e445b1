"""Run manifest: a UTF-8 JSON file describing data, methods, annotators and scoring settings."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from . import storage
from .decompose import FitConfig, SAEConfig
from .synth import WorldSpec

SCHEMA_VERSION = 1

DEFAULTS: dict[str, Any] = {
    "rois": None,
    "methods": [
        {"method": "ica", "variance_thresholds": [0.98], "seeds": [0]},
        {"method": "sae", "seeds": [0]},
    ],
    "annotator": {"backend": "oracle", "flip_noise": 0.0, "jitter": 0.0, "seed": 0},
    "split_seed": 0,
    "retrieval": {"fraction": 0.002, "candidates_per_group": 40},
    "dictionary": {"merge_threshold": 0.9, "templates": None},
    "label": {"shortlist_k": 300},
    "score": {"p0": 0.05, "thresholds": [0.5, 0.8], "corr_threshold": 0.5},
    "report": {"scope": "roi"},
}

_SECTIONS = {"schema", "output_dir", "data", *DEFAULTS}


class ConfigError(ValueError):
    """The manifest is malformed or internally inconsistent."""


def _merge(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass(frozen=True)
class RunManifest:
    raw: Mapping[str, Any]
    path: Path | None = None

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any], path: Path | None = None) -> "RunManifest":
        if not isinstance(obj, Mapping):
            raise ConfigError("manifest must be a JSON object")
        unknown = set(obj) - _SECTIONS
        if unknown:
            raise ConfigError(f"unknown manifest keys: {sorted(unknown)}")
        if "data" not in obj:
            raise ConfigError("manifest needs a 'data' section")
        m = cls(_merge(DEFAULTS, obj), path)
        m.validate()
        return m

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunManifest":
        p = Path(path)
        try:
            obj = json.loads(p.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"manifest not found: {p}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"manifest is not valid JSON: {exc}") from exc
        return cls.from_dict(obj, p)

    def with_overrides(self, **sections: Any) -> "RunManifest":
        return RunManifest.from_dict(_merge(dict(self.raw), sections), self.path)

    # -------------------------------------------------------------- accessors

    def section(self, name: str) -> Any:
        return self.raw[name]

    @property
    def output_dir(self) -> Path:
        out = self.raw.get("output_dir", "brainexplore_out")
        p = Path(out)
        if not p.is_absolute() and self.path is not None:
            p = self.path.parent / p
        return p

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        if not p.is_absolute() and self.path is not None:
            p = self.path.parent / p
        return p

    @property
    def world_spec(self) -> WorldSpec | None:
        synth = self.raw["data"].get("synth")
        return WorldSpec.from_json(synth) if synth is not None else None

    def fit_configs(self) -> list[FitConfig]:
        out = []
        for m in self.raw["methods"]:
            m = dict(m)
            sae = SAEConfig(**m.pop("sae", {}))
            for key in ("variance_thresholds", "seeds", "train_pools"):
                if key in m:
                    m[key] = tuple(m[key])
            out.append(FitConfig(sae=sae, **m))
        return out

    def content_hash(self) -> str:
        """Hash of everything that shapes results (the output location is excluded)."""
        body = {k: v for k, v in self.raw.items() if k != "output_dir"}
        return storage.sha256_hex(storage.canonical_json(body))

    def section_hash(self, *names: str) -> str:
        return storage.sha256_hex(storage.canonical_json({n: self.raw.get(n) for n in names}))

    # -------------------------------------------------------------- validation

    def validate(self) -> None:
        raw = self.raw
        if raw.get("schema", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ConfigError(f"unsupported manifest schema {raw.get('schema')!r}")
        data = raw["data"]
        if not isinstance(data, Mapping) or (("synth" in data) == ("matrices" in data)):
            raise ConfigError("data must contain exactly one of 'synth' or 'matrices'")
        try:
            if "synth" in data:
                WorldSpec.from_json(data["synth"])
            else:
                for key in ("voxel_space", "measured"):
                    if key not in data["matrices"]:
                        raise ConfigError(f"data.matrices needs '{key}'")
            self.fit_configs()
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid manifest: {exc}") from exc
        if not raw["methods"]:
            raise ConfigError("methods grid is empty")
        ann = raw["annotator"]
        backend = ann.get("backend")
        if backend not in ("oracle", "http"):
            raise ConfigError("annotator.backend must be 'oracle' or 'http'")
        if backend == "oracle" and "synth" not in data:
            raise ConfigError("the oracle annotator needs a synthetic world")
        if backend == "http" and not ann.get("base_url") and not ann.get("offline"):
            raise ConfigError("annotator.base_url is required for the http backend")
        thr = raw["score"]["thresholds"]
        if not thr or any(not 0 <= t < 1 for t in thr):
            raise ConfigError("score.thresholds must be values in [0, 1)")
        if raw["report"]["scope"] not in ("roi", "all"):
            raise ConfigError("report.scope must be 'roi' or 'all'")
        frac = raw["retrieval"]["fraction"]
        if not 0 < frac <= 1:
            raise ConfigError("retrieval.fraction must lie in (0, 1]")
        if not isinstance(raw["split_seed"], int):
            raise ConfigError("split_seed must be an integer")
