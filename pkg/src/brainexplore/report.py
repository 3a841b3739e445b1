"""Report emitters: markdown summary, per-ROI hypothesis tables, counts and complementarity."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import PatternId
from .score import (ScoredRun, best_pattern, concat_tables, explained_hypotheses, metric_interpretable_hypotheses,
                    metric_interpretable_patterns, pairwise_complementarity)

RETRIEVAL_VIEWS = (("measured", ("measured",)), ("measured+predicted", ("measured", "predicted")))


def method_groups(patterns: Sequence[PatternId]) -> dict[str, list[PatternId]]:
    """Single methods, every pair, and the union of all methods present."""
    by_method: dict[str, list[PatternId]] = defaultdict(list)
    for p in patterns:
        by_method[p.method].append(p)
    names = sorted(by_method)
    groups = {n: by_method[n] for n in names}
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            groups[f"{a}+{b}"] = by_method[a] + by_method[b]
    if len(names) > 2:
        groups["+".join(names)] = [p for n in names for p in by_method[n]]
    return groups


def runs_by_method(scored: ScoredRun, seeds: Mapping[PatternId, int]) -> dict[str, list[ScoredRun]]:
    """Split a scored table into per-(method, seed) runs, ordered by seed."""
    groups: dict[tuple[str, int], list[PatternId]] = defaultdict(list)
    for p in scored.ranking.patterns:
        groups[(p.method, seeds.get(p, 0))].append(p)
    out: dict[str, list[ScoredRun]] = defaultdict(list)
    for (method, _seed), pats in sorted(groups.items()):
        out[method].append(scored.subset(pats))
    return dict(out)


def _fmt(x: float) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else f"{x:.1f}"


def _csv(rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerows(rows)
    return buf.getvalue()


def build_report(scored: ScoredRun, texts: Sequence[str], components: Mapping[PatternId, np.ndarray],
                 seeds: Mapping[PatternId, int], thresholds: Sequence[float], scope: str = "roi",
                 corr_threshold: float = 0.5, manifest_hash: str = "",
                 planted: Mapping[str, int] | None = None) -> dict[str, str]:
    """File name -> text for every report artifact."""
    files: dict[str, str] = {}
    groups = method_groups(scored.ranking.patterns)
    pools = scored.ranking.pools
    views = [(name, ps) for name, ps in RETRIEVAL_VIEWS if set(ps) <= set(pools)]

    metric_rows = [["methods", "threshold", "retrieval", "explained_hypotheses_pct", "interpretable_patterns"]]
    table: dict[tuple[str, float, str], tuple[float, int]] = {}
    for gname, pats in groups.items():
        sub = scored.subset(pats)
        for name, ps in views:
            view = sub.with_pools(ps)
            for t in thresholds:
                pct = 100.0 * metric_interpretable_hypotheses(view.ranking, view.evaluation, t)
                count = metric_interpretable_patterns(view.ranking, view.evaluation, components, t, corr_threshold)
                table[(gname, t, name)] = (pct, count)
                metric_rows.append([gname, f"{t:g}", name, f"{pct:.4f}", count])
    files["metrics.csv"] = _csv(metric_rows)

    md = ["# BrainExplore run summary", "", f"manifest hash: `{manifest_hash}`", "",
          f"dictionary size: {len(texts)}; patterns scored: {len(scored.ranking.patterns)}", "",
          "## Explained hypotheses (%) and interpretable pattern counts", ""]
    header = ["methods"] + [f"{name} @{t:g}" for t in thresholds for name, _ in views]
    md.append("| " + " | ".join(header) + " |")
    md.append("|" + "---|" * len(header))
    for gname in groups:
        cells = [f"{_fmt(table[(gname, t, name)][0])}% / {table[(gname, t, name)][1]}"
                 for t in thresholds for name, _ in views]
        md.append("| " + " | ".join([gname] + cells) + " |")
    md.append("")

    full = scored.with_pools(pools)
    runs = runs_by_method(full, seeds)
    names, gain = pairwise_complementarity(runs, thresholds[0])
    comp_rows = [["method"] + names] + [[a] + [f"{g:.4f}" for g in gain[i]] for i, a in enumerate(names)]
    files["complementarity.csv"] = _csv(comp_rows)
    md += [f"## Pairwise complementarity (percentage points, threshold {thresholds[0]:g})", "",
           "| | " + " | ".join(names) + " |", "|---|" + "---|" * len(names)]
    md += ["| " + a + " | " + " | ".join(f"{g:.1f}" for g in gain[i]) + " |" for i, a in enumerate(names)]
    md.append("")

    if planted:
        ex = explained_hypotheses(full.ranking, full.evaluation, thresholds[0])
        hit = sorted(c for c, h in planted.items() if h in ex)
        md += ["## Planted concepts", "",
               f"{len(hit)} planted concepts found in the dictionary and explained at {thresholds[0]:g}: "
               + ", ".join(hit), ""]

    rois = sorted({p.roi for p in full.ranking.patterns})
    scopes = [(roi, "roi", roi) for roi in rois] if scope == "roi" else [("all", "all", None)]
    for tag, sc, roi in scopes:
        rows = [["hypothesis", "best_pattern", "score"]]
        for h, text in enumerate(texts):
            try:
                pid, s = best_pattern(full.ranking, full.evaluation, h, sc, roi)
            except ValueError:
                continue
            rows.append([text, str(pid), "nan" if math.isnan(s) else f"{s:.6f}"])
        files[f"hypotheses_{tag}.csv"] = _csv(rows)
    md += ["## Files", ""] + [f"- {name}" for name in sorted(files)] + [""]
    files["summary.md"] = "\n".join(md)
    return files


def write_report(directory: str | Path, files: Mapping[str, str]) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (d / name).write_text(text, encoding="utf-8")
