"""Stage-per-command pipeline driver.

Every stage writes its artifacts under ``<output_dir>/<stage>/`` together with
a ``stage.json`` stamp holding the schema version, the manifest hash, the hash
of the manifest sections the stage reads and digests of its inputs and
outputs. A stage whose stamp matches the current manifest and inputs is
skipped, so reruns are no-ops.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from . import storage
from .core import (Decomposition, PatternId, PoolKind, ResponsePool, UnknownROIError, VoxelSpace, load_voxel_space,
                   save_voxel_space)
from .explain import (BackendError, HttpAnnotatorSuite, HypothesisDictionary, build_dictionary, load_prompts,
                      load_templates, run_explain_stage)
from .label import LabelMatrix, build_label_matrix
from .manifest import SCHEMA_VERSION, ConfigError, RunManifest
from .pipeline import consistency_scores, decompose_all, explanation_sets
from .report import build_report, write_report
from .retrieve import read_topsets, select_candidates, write_topsets
from .score import SPLITS, ScoredRun, ScoreTable, build_score_table, component_vectors, pool_topsets, split_pools
from .synth import gen_responses, oracle_annotators, world_from_spec

log = logging.getLogger("brainexplore")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_BACKEND = 0, 2, 3, 4
STAGES = ("synth", "decompose", "retrieve", "dict", "label", "score", "report")

# manifest sections each stage reads, and the stages whose outputs it consumes
SECTIONS = {
    "synth": ("data",),
    "decompose": ("rois", "methods"),
    "retrieve": ("split_seed", "retrieval", "annotator"),
    "dict": ("annotator", "dictionary"),
    "label": ("annotator", "dictionary", "label"),
    "score": ("retrieval", "score"),
    "report": ("score", "report"),
}
DEPENDS = {
    "synth": (),
    "decompose": ("synth",),
    "retrieve": ("synth", "decompose"),
    "dict": ("retrieve",),
    "label": ("synth", "dict"),
    "score": ("retrieve", "label"),
    "report": ("synth", "decompose", "dict", "score"),
}


class MissingArtifactError(RuntimeError):
    """A required upstream artifact is absent or stale."""


@dataclass
class Context:
    manifest: RunManifest
    out: Path
    workers: int = 1

    def stage_dir(self, name: str) -> Path:
        return self.out / name


# ---------------------------------------------------------------- stamps

def _digest_dir(d: Path) -> dict[str, str]:
    files = sorted(p for p in d.rglob("*") if p.is_file() and p.name != "stage.json")
    return {str(p.relative_to(d)): storage.sha256_hex(p.read_bytes()) for p in files}


def _read_stamp(d: Path) -> dict | None:
    p = d / "stage.json"
    return storage.load_json(p) if p.exists() else None


def _check_upstream(ctx: Context, name: str) -> dict[str, str]:
    """Digest of every upstream stage's outputs; raises if one is missing or stale."""
    inputs = {}
    for dep in DEPENDS[name]:
        d = ctx.stage_dir(dep)
        stamp = _read_stamp(d)
        if stamp is None:
            raise MissingArtifactError(f"stage '{name}' needs the '{dep}' artifacts in {d}; run --stage {dep} first")
        if stamp.get("config_hash") != ctx.manifest.section_hash(*SECTIONS[dep]):
            raise MissingArtifactError(f"'{dep}' artifacts in {d} are stale for this manifest; rerun --stage {dep}")
        if stamp.get("outputs") != _digest_dir(d):
            raise MissingArtifactError(f"'{dep}' artifacts in {d} were modified after they were written")
        for dep2 in DEPENDS[dep]:
            stamp2 = _read_stamp(ctx.stage_dir(dep2)) or {}
            if stamp["inputs"].get(dep2) != stamp2.get("output_hash"):
                raise MissingArtifactError(f"'{dep}' artifacts are stale relative to '{dep2}'; rerun --stage {dep}")
        inputs[dep] = stamp["output_hash"]
    return inputs


def run_stage(ctx: Context, name: str) -> bool:
    """Run one stage unless it is up to date. Returns True if it ran."""
    inputs = _check_upstream(ctx, name)
    d = ctx.stage_dir(name)
    config_hash = ctx.manifest.section_hash(*SECTIONS[name])
    stamp = _read_stamp(d)
    if (stamp is not None and stamp.get("schema_version") == SCHEMA_VERSION and stamp.get("config_hash") == config_hash
            and stamp.get("inputs") == inputs and stamp.get("outputs") == _digest_dir(d)):
        log.info("stage %s is up to date", name)
        return False
    if d.exists():
        shutil.rmtree(d)
    d.mkdir(parents=True)
    log.info("running stage %s", name)
    STAGE_FUNCS[name](ctx, d)
    outputs = _digest_dir(d)
    storage.save_json(d / "stage.json", {
        "stage": name, "schema_version": SCHEMA_VERSION, "manifest_hash": ctx.manifest.content_hash(),
        "config_hash": config_hash, "inputs": inputs, "outputs": outputs,
        "output_hash": storage.sha256_hex(storage.canonical_json(outputs)),
    })
    return True


# ---------------------------------------------------------------- loaders

def _load_pools(ctx: Context) -> tuple[VoxelSpace, dict[str, ResponsePool]]:
    d = ctx.stage_dir("synth")
    space = load_voxel_space(d / "voxel_space.json")
    pools = {k: ResponsePool.load(d / k) for k in (PoolKind.MEASURED.value, PoolKind.PREDICTED.value)
             if (d / k).exists()}
    return space, pools


def _load_decomps(ctx: Context) -> list[Decomposition]:
    d = ctx.stage_dir("decompose")
    index = storage.load_json(d / "index.json")
    return [Decomposition.load(d / entry["dir"]) for entry in index["decompositions"]]


def _suite(ctx: Context):
    ann = ctx.manifest.section("annotator")
    if ann["backend"] == "oracle":
        world = world_from_spec(ctx.manifest.world_spec)
        return oracle_annotators(world, float(ann.get("flip_noise", 0.0)), float(ann.get("jitter", 0.0)),
                                 int(ann.get("seed", 0)))
    headers = None
    if ann.get("api_key_env"):
        key = os.environ.get(ann["api_key_env"])
        if not key:
            raise ConfigError(f"environment variable {ann['api_key_env']} is not set")
        headers = {"Authorization": f"Bearer {key}"}
    cache = ctx.manifest.resolve(ann["cache_path"]) if ann.get("cache_path") else None
    return HttpAnnotatorSuite(ann.get("base_url", "http://localhost:8000"), cache, float(ann.get("timeout", 60.0)),
                              int(ann.get("retries", 2)), float(ann.get("backoff", 0.5)), bool(ann.get("offline")),
                              prompts=load_prompts(), headers=headers)


def _load_dictionary(ctx: Context) -> HypothesisDictionary:
    return HypothesisDictionary.load(ctx.stage_dir("dict"))


# ---------------------------------------------------------------- stages

def cmd_synth(ctx: Context, d: Path) -> None:
    data = ctx.manifest.section("data")
    if "synth" in data:
        spec = ctx.manifest.world_spec
        world = world_from_spec(spec)
        space = world.space
        pools = {k: gen_responses(world, pool_kind=k) for k in ("measured", "predicted")
                 if world.pool_ids[k]}
        storage.save_json(d / "world.json", spec.to_json())
    else:
        mats = data["matrices"]
        space = load_voxel_space(ctx.manifest.resolve(mats["voxel_space"]))
        pools = {k: ResponsePool.load(ctx.manifest.resolve(mats[k])) for k in ("measured", "predicted") if mats.get(k)}
        for k, pool in pools.items():
            if pool.kind.value != k:
                raise ConfigError(f"data.matrices.{k} holds a {pool.kind.value} pool")
            if pool.responses.shape[1] != space.total_voxels:
                raise ConfigError(f"{k} pool width does not match the voxel space")
    save_voxel_space(d / "voxel_space.json", space)
    for k, pool in pools.items():
        pool.save(d / k)


def cmd_decompose(ctx: Context, d: Path) -> None:
    space, pools = _load_pools(ctx)
    rois = ctx.manifest.section("rois")
    for roi in rois or ():
        try:
            space.indices(roi)
        except UnknownROIError as exc:
            raise ConfigError(f"manifest names an unknown ROI: {roi}") from exc
    decomps = decompose_all(ctx.manifest.fit_configs(), pools, space, rois)
    entries = []
    for i, dec in enumerate(decomps):
        name = f"d{i:04d}"
        dec.save(d / name)
        entries.append({"dir": name, "method": dec.method, "roi": dec.roi, "fingerprint": dec.fingerprint})
    storage.save_json(d / "index.json", {"decompositions": entries})


def cmd_retrieve(ctx: Context, d: Path) -> None:
    space, pools = _load_pools(ctx)
    decomps = _load_decomps(ctx)
    retrieval = ctx.manifest.section("retrieval")
    split = split_pools({k: p.stimulus_ids for k, p in pools.items()}, ctx.manifest.section("split_seed"))
    storage.save_json(d / "split.json", split.to_json())
    sets = explanation_sets(decomps, pools, space, split)
    cons = consistency_scores(sets, _suite(ctx))
    candidates = select_candidates(cons, int(retrieval["candidates_per_group"]))
    storage.save_json(d / "explanation_sets.json", {str(p): list(v) for p, v in sorted(sets.items())})
    storage.save_json(d / "consistency.json", {str(p): v for p, v in sorted(cons.items())})
    storage.save_json(d / "candidates.json", [str(p) for p in candidates])
    for name, pool in sorted(pools.items()):
        per_half = pool_topsets(decomps, pool, space, split, float(retrieval["fraction"]))
        for half, sets_ in per_half.items():
            write_topsets(d / f"topsets_{half}_{name}.jsonl", sets_)


def cmd_dict(ctx: Context, d: Path) -> None:
    r = ctx.stage_dir("retrieve")
    sets = storage.load_json(r / "explanation_sets.json")
    candidates = [PatternId.parse(p) for p in storage.load_json(r / "candidates.json")]
    suite = _suite(ctx)
    result = run_explain_stage({p: sets[str(p)] for p in candidates}, suite, max(1, ctx.workers))
    if not result.pool:
        if result.failures:
            raise BackendError(f"every candidate failed during explanation ({len(result.failures)} patterns)")
        raise MissingArtifactError("no candidate patterns to explain")
    with (d / "raw_hypotheses.jsonl").open("w", encoding="utf-8") as fh:
        for rh in result.pool:
            fh.write(json.dumps({"text": rh.text, "pattern": str(rh.pattern)}, sort_keys=True) + "\n")
    storage.save_json(d / "explain_log.json", {
        "failures": {str(p): v for p, v in sorted(result.failures.items())},
        "flags": {str(p): list(v) for p, v in sorted(result.flags.items())},
    })
    cfg = ctx.manifest.section("dictionary")
    templates = load_templates(ctx.manifest.resolve(cfg["templates"]) if cfg.get("templates") else None)
    dictionary = build_dictionary([rh.text for rh in result.pool], suite.embed_text,
                                  float(cfg["merge_threshold"]), templates)
    dictionary.save(d)


def cmd_label(ctx: Context, d: Path) -> None:
    _, pools = _load_pools(ctx)
    dictionary = _load_dictionary(ctx)
    suite = _suite(ctx)
    k = int(ctx.manifest.section("label")["shortlist_k"])
    for name, pool in sorted(pools.items()):
        build_label_matrix(pool.stimulus_ids, dictionary, suite, name, k, max(1, ctx.workers)).save(
            d / f"labels_{name}.bxl")


def cmd_score(ctx: Context, d: Path) -> None:
    r = ctx.stage_dir("retrieve")
    labels = {p.name[len("labels_"):-len(".bxl")]: LabelMatrix.load(p)
              for p in sorted(ctx.stage_dir("label").glob("labels_*.bxl"))}
    p0 = float(ctx.manifest.section("score")["p0"])
    for half in SPLITS:
        topsets = {pool: read_topsets(r / f"topsets_{half}_{pool}.jsonl") for pool in labels}
        patterns = [t.pattern for t in next(iter(topsets.values()))]
        build_score_table(patterns, topsets, labels, half, p0).save(d / half)


def cmd_report(ctx: Context, d: Path) -> None:
    score_cfg = ctx.manifest.section("score")
    ranking = ScoreTable.load(ctx.stage_dir("score") / "ranking")
    evaluation = ScoreTable.load(ctx.stage_dir("score") / "evaluation")
    decomps = _load_decomps(ctx)
    seeds = {p: int(dec.hyperparams.get("seed", 0)) for dec in decomps for p in dec.pattern_ids()}
    dictionary = _load_dictionary(ctx)
    planted = None
    if ctx.manifest.world_spec is not None:
        world = world_from_spec(ctx.manifest.world_spec)
        planted = {}
        for h, text in enumerate(dictionary.texts):
            c = world.concept_of(text)
            if c is not None:
                planted.setdefault(world.concepts[c], h)
    files = build_report(ScoredRun(ranking, evaluation), dictionary.texts, component_vectors(decomps), seeds,
                         [float(t) for t in score_cfg["thresholds"]], ctx.manifest.section("report")["scope"],
                         float(score_cfg["corr_threshold"]), ctx.manifest.content_hash(), planted)
    write_report(d, files)


STAGE_FUNCS: dict[str, Callable[[Context, Path], None]] = {
    "synth": cmd_synth, "decompose": cmd_decompose, "retrieve": cmd_retrieve, "dict": cmd_dict,
    "label": cmd_label, "score": cmd_score, "report": cmd_report,
}


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="brainexplore", description="Decompose, explain and score fMRI response patterns.")
    ap.add_argument("--manifest", required=True, help="path to the JSON run manifest")
    ap.add_argument("--stage", default="all", choices=("all",) + STAGES, help="stage to run (default: all, in order)")
    ap.add_argument("--workers", type=int, default=1, help="concurrent annotator calls")
    ap.add_argument("--seed", type=int, default=None, help="override the split seed")
    ap.add_argument("--threshold", type=float, choices=(0.5, 0.8), default=None, help="report only this threshold")
    ap.add_argument("--scope", choices=("roi", "all"), default=None, help="best-pattern search scope in reports")
    ap.add_argument("--output-dir", default=None, help="override the manifest's output directory")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        manifest = RunManifest.load(args.manifest)
        overrides = {}
        if args.seed is not None:
            overrides["split_seed"] = args.seed
        if args.threshold is not None:
            overrides["score"] = {"thresholds": [args.threshold]}
        if args.scope is not None:
            overrides["report"] = {"scope": args.scope}
        if args.output_dir is not None:
            overrides["output_dir"] = str(Path(args.output_dir).resolve())
        if overrides:
            manifest = manifest.with_overrides(**overrides)
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        ctx = Context(manifest, manifest.output_dir, args.workers)
        for name in (STAGES if args.stage == "all" else (args.stage,)):
            run_stage(ctx, name)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        log.error("missing artifact: %s", exc)
        return EXIT_MISSING
    except BackendError as exc:
        log.error("backend failure: %s", exc)
        return EXIT_BACKEND
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
