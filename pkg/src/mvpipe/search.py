"""Test-time resolution grid search over (min_pixels, max_pixels).

Each configuration resizes the evaluation manifest, hands a summary to a
scorer and records the score. A scorer that raises (or returns a non-finite
value) leaves a hole in the surface instead of aborting the search.

Scorer subprocess protocol (:class:`CommandScorer`): the command is run as
``<argv...> <min_pixels> <max_pixels> <summary.json>``. Exit status 0 with a
float on the last non-empty stdout line is a score; anything else is a hole.
"""

from __future__ import annotations

import json
import logging
import math
import os
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import CELL, SampleRecord
from .errors import ResizeInfeasible, SearchError
from .resolution import PATCH_SIZE, smart_resize

log = logging.getLogger(__name__)

Config = tuple[int, int]
Scorer = Callable[[Config, dict], float]

DEFAULT_MIN_GRID = tuple(k * CELL for k in (4, 16, 32, 64))
DEFAULT_MAX_GRID = tuple(k * CELL for k in (1280, 2048, 2560, 3072, 4096, 8192))


@dataclass(frozen=True)
class ResolutionGrid:
    min_values: tuple[int, ...] = DEFAULT_MIN_GRID
    max_values: tuple[int, ...] = DEFAULT_MAX_GRID

    def __post_init__(self):
        mins = tuple(sorted(set(int(v) for v in self.min_values)))
        maxs = tuple(sorted(set(int(v) for v in self.max_values)))
        if not mins or not maxs:
            raise SearchError("resolution grid axes must be non-empty")
        if mins[0] < 0 or maxs[0] <= 0:
            raise SearchError("grid pixel values must be positive")
        if mins[-1] > maxs[0]:
            raise SearchError(f"min_pixels {mins[-1]} exceeds max_pixels {maxs[0]}; every pair must be ordered")
        object.__setattr__(self, "min_values", mins)
        object.__setattr__(self, "max_values", maxs)

    def __len__(self) -> int:
        return len(self.min_values) * len(self.max_values)


def enumerate_grid(grid: ResolutionGrid) -> list[Config]:
    """Cartesian product ordered by max_pixels, then min_pixels, ascending."""
    return [(mn, mx) for mx in grid.max_values for mn in grid.min_values]


def summarize_resize(
    manifest: Sequence[SampleRecord], min_pixels: int, max_pixels: int, patch: int = PATCH_SIZE, detail: bool = False
) -> dict:
    """Visual-token statistics for ``manifest`` resized under one configuration.

    The mean is taken over feasible images only; infeasible images are counted
    separately.
    """
    tokens: list[int] = []
    infeasible = 0
    resized = []
    for rec in manifest:
        for i, img in enumerate(rec.images):
            try:
                r = smart_resize(img, min_pixels, max_pixels, patch)
            except ResizeInfeasible:
                infeasible += 1
                if detail:
                    resized.append({"dataset_id": rec.dataset_id, "sample_index": rec.sample_index, "image": i})
                continue
            tokens.append(r.visual_tokens)
            if detail:
                resized.append(
                    {
                        "dataset_id": rec.dataset_id,
                        "sample_index": rec.sample_index,
                        "image": i,
                        "w": r.width,
                        "h": r.height,
                        "visual_tokens": r.visual_tokens,
                    }
                )
    out = {
        "min_pixels": min_pixels,
        "max_pixels": max_pixels,
        "samples": len(manifest),
        "images": len(tokens) + infeasible,
        "infeasible_images": infeasible,
        "total_visual_tokens": sum(tokens),
        "mean_visual_tokens": sum(tokens) / len(tokens) if tokens else 0.0,
    }
    if detail:
        out["resized"] = resized
    return out


@dataclass
class SearchResult:
    grid: ResolutionGrid
    best: Config
    best_score: float
    surface: dict[Config, float]
    holes: dict[Config, str] = field(default_factory=dict)
    summaries: dict[Config, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        configs = enumerate_grid(self.grid)
        return {
            "grid": {"min_values": list(self.grid.min_values), "max_values": list(self.grid.max_values)},
            "best": {"min_pixels": self.best[0], "max_pixels": self.best[1], "score": self.best_score},
            "surface": [
                {"min_pixels": c[0], "max_pixels": c[1], "score": self.surface[c]} for c in configs if c in self.surface
            ],
            "holes": [{"min_pixels": c[0], "max_pixels": c[1], "error": self.holes[c]} for c in configs if c in self.holes],
            "resize_summaries": [
                {k: v for k, v in self.summaries[c].items() if k != "resized"} for c in configs if c in self.summaries
            ],
            "boxplot": [b.to_dict() for b in surface_report(self)],
        }


def select_best(surface: dict[Config, float]) -> tuple[Config, float]:
    """Argmax; ties go to the smaller max_pixels, then the larger min_pixels."""
    if not surface:
        raise SearchError("score surface is empty")
    best = max(surface, key=lambda c: (surface[c], -c[1], c[0]))
    return best, surface[best]


def run_search(
    grid: ResolutionGrid,
    eval_manifest: Sequence[SampleRecord],
    scorer: Scorer,
    *,
    max_workers: int = 1,
    patch: int = PATCH_SIZE,
) -> SearchResult:
    configs = enumerate_grid(grid)
    summaries = {c: summarize_resize(eval_manifest, c[0], c[1], patch, detail=True) for c in configs}

    def evaluate(c: Config) -> tuple[Config, float | None, str | None]:
        try:
            score = float(scorer(c, summaries[c]))
        except Exception as exc:  # scorer failures become holes
            log.warning("scorer failed for min_pixels=%d max_pixels=%d: %s", c[0], c[1], exc)
            return c, None, f"{type(exc).__name__}: {exc}"
        if not math.isfinite(score):
            return c, None, f"non-finite score {score!r}"
        return c, score, None

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            outcomes = list(pool.map(evaluate, configs))
    else:
        outcomes = [evaluate(c) for c in configs]

    surface, holes = {}, {}
    for c, score, err in outcomes:
        if err is None:
            surface[c] = score
        else:
            holes[c] = err
    if not surface:
        raise SearchError(f"all {len(configs)} configurations failed to score")
    best, best_score = select_best(surface)
    return SearchResult(grid, best, best_score, surface, holes, summaries)


@dataclass(frozen=True)
class BoxStats:
    max_pixels: int
    count: int
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float

    def to_dict(self) -> dict:
        return {
            "max_pixels": self.max_pixels,
            "count": self.count,
            "min": self.minimum,
            "q1": self.q1,
            "median": self.median,
            "q3": self.q3,
            "max": self.maximum,
        }


def surface_report(result: SearchResult) -> list[BoxStats]:
    """Box-plot statistics of scores across min_pixels, one row per max_pixels.

    Quartiles interpolate linearly between closest ranks (position
    ``p * (n - 1)`` in the sorted scores). Columns with no scores are omitted.
    """
    rows = []
    for mx in result.grid.max_values:
        scores = [result.surface[(mn, mx)] for mn in result.grid.min_values if (mn, mx) in result.surface]
        if not scores:
            log.warning("max_pixels=%d has no scores; omitted from the report", mx)
            continue
        lo, q1, med, q3, hi = np.percentile(np.asarray(scores, dtype=np.float64), [0, 25, 50, 75, 100], method="linear")
        rows.append(BoxStats(mx, len(scores), float(lo), float(q1), float(med), float(q3), float(hi)))
    return rows


class CommandScorer:
    """Scores configurations by running an external command once per config."""

    def __init__(self, argv: Sequence[str], workdir: str | os.PathLike, timeout: float | None = None):
        if not argv:
            raise SearchError("scorer command is empty")
        self.argv = list(argv)
        self.workdir = Path(workdir)
        self.timeout = timeout

    def __call__(self, config: Config, summary: dict) -> float:
        mn, mx = config
        path = self.workdir / f"summary_{mn}_{mx}.json"
        path.write_text(json.dumps(summary, indent=1), encoding="utf-8")
        proc = subprocess.run(
            [*self.argv, str(mn), str(mx), str(path)],
            capture_output=True,
            text=True,
            timeout=self.timeout,
        )
        if proc.returncode != 0:
            raise SearchError(f"scorer exited with status {proc.returncode}: {proc.stderr.strip()[-200:]}")
        lines = [ln for ln in proc.stdout.splitlines() if ln.strip()]
        if not lines:
            raise SearchError("scorer printed no score")
        return float(lines[-1])

