"""Detection metrics, the mixed "overall" OOD set, and robustness sweeps.

Scores follow one orientation everywhere: higher means more OOD.
In-distribution is the positive class and is detected at low scores.
"""

from __future__ import annotations

import csv
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, TextIO, Tuple

import numpy as np
from scipy import stats as sp_stats

from .data import concat, take_random
from .errors import DataFormatError, ShapeError
from .schemas import EvalResult, ImageDataset, ScoreTable, SweepResult

logger = logging.getLogger(__name__)

SCORE_COLUMNS = ("rose", "nll")
TPR_LEVEL = 0.8
HISTOGRAM_BINS = 50


def _pair(in_scores: Sequence[float], out_scores: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    inside = np.asarray(in_scores, dtype=np.float64).ravel()
    outside = np.asarray(out_scores, dtype=np.float64).ravel()
    if inside.size == 0 or outside.size == 0:
        raise DataFormatError(f"metrics need non-empty inputs, got {inside.size} in / {outside.size} out")
    if not (np.all(np.isfinite(inside)) and np.all(np.isfinite(outside))):
        raise DataFormatError("metrics need finite scores")
    return inside, outside


def auroc(in_scores: Sequence[float], out_scores: Sequence[float]) -> float:
    """P(random OOD score > random in-distribution score), ties counted ½.

    Mann-Whitney U from average ranks.
    """
    inside, outside = _pair(in_scores, out_scores)
    ranks = sp_stats.rankdata(np.concatenate([inside, outside]), method="average")
    n_out = outside.size
    u = ranks[inside.size :].sum() - n_out * (n_out + 1) / 2.0
    return float(u / (inside.size * n_out))


def auprc(in_scores: Sequence[float], out_scores: Sequence[float]) -> float:
    """Step-wise average precision with in-distribution as positive, detected when score <= τ."""
    inside, outside = _pair(in_scores, out_scores)
    scores = np.concatenate([inside, outside])
    positive = np.concatenate([np.ones(inside.size), np.zeros(outside.size)])
    order = np.argsort(scores, kind="mergesort")
    scores, positive = scores[order], positive[order]
    # One operating point per distinct threshold (last index of each tie group).
    last = np.r_[np.nonzero(np.diff(scores))[0], scores.size - 1]
    tp = np.cumsum(positive)[last]
    detected = last + 1.0
    precision = tp / detected
    recall = tp / inside.size
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def fpr80(in_scores: Sequence[float], out_scores: Sequence[float], level: float = TPR_LEVEL) -> float:
    """Fraction of OOD scores <= τ, τ the smallest threshold passing ``level`` of in-distribution."""
    inside, outside = _pair(in_scores, out_scores)
    n = inside.size
    # ceil(level * n) in integer arithmetic, so 0.8 * 5 gives exactly 4.
    micro = int(round(level * 1_000_000))
    k = -((-micro * n) // 1_000_000)
    tau = np.sort(inside)[max(k, 1) - 1]
    return float(np.mean(outside <= tau))


def histogram(
    in_scores: Sequence[float], out_scores: Sequence[float], bins: int = HISTOGRAM_BINS
) -> List[Tuple[float, float, int, int]]:
    """Shared-edge histogram rows ``(bin_left, bin_right, count_in, count_out)``."""
    inside, outside = _pair(in_scores, out_scores)
    low = float(min(inside.min(), outside.min()))
    high = float(max(inside.max(), outside.max()))
    if high <= low:
        low, high = low - 0.5, high + 0.5
    edges = np.linspace(low, high, bins + 1)
    count_in, _ = np.histogram(inside, bins=edges)
    count_out, _ = np.histogram(outside, bins=edges)
    return [
        (float(edges[i]), float(edges[i + 1]), int(count_in[i]), int(count_out[i])) for i in range(bins)
    ]


def evaluate(
    in_table: ScoreTable,
    out_table: ScoreTable,
    score: str = "rose",
    dataset: str = "ood",
    per_layer: bool = True,
) -> EvalResult:
    """Metrics of one score column; per-layer AUROCs come from the ŝ columns."""
    if score not in SCORE_COLUMNS:
        raise ShapeError(f"unknown score column {score!r}; expected one of {SCORE_COLUMNS}")
    in_scores, out_scores = in_table.column(score), out_table.column(score)
    layer_aurocs: Dict[str, float] = {}
    if per_layer:
        if in_table.normalized.shape[1] != out_table.normalized.shape[1]:
            raise ShapeError(
                f"tables disagree on layer count: {in_table.normalized.shape[1]} vs {out_table.normalized.shape[1]}"
            )
        for i, name in enumerate(in_table.layer_names):
            layer_aurocs[name] = auroc(in_table.normalized[:, i], out_table.normalized[:, i])
    result = EvalResult(
        score=score,
        dataset=dataset,
        auroc=auroc(in_scores, out_scores),
        auprc=auprc(in_scores, out_scores),
        fpr80=fpr80(in_scores, out_scores),
        n_in=len(in_table),
        n_out=len(out_table),
        per_layer_auroc=layer_aurocs,
    )
    logger.info(
        "%s vs %s: auroc %.4f auprc %.4f fpr80 %.4f", score, dataset, result.auroc, result.auprc, result.fpr80
    )
    return result


def overall_mix(datasets: Sequence[ImageDataset], per_dataset_n: int, seed: int = 0) -> ImageDataset:
    """``per_dataset_n`` random samples from each source, concatenated with provenance labels."""
    if per_dataset_n < 1:
        raise DataFormatError(f"per_dataset_n must be >= 1, got {per_dataset_n}")
    picked = []
    for index, ds in enumerate(datasets):
        if len(ds) < per_dataset_n:
            raise DataFormatError(f"source {ds.label} has {len(ds)} samples, fewer than {per_dataset_n}")
        part = take_random(ds, per_dataset_n, seed=seed + index)
        part.provenance = [ds.label] * per_dataset_n
        picked.append(part)
    return concat(picked, label="overall")


def robustness_sweep(
    axis: str,
    grid: Sequence[float],
    evaluate_point: Callable[[float, int], Dict[str, float]],
    repeats: int = 1,
) -> SweepResult:
    """Run ``evaluate_point(value, repeat)`` -> {score: auroc} over the grid."""
    if not grid:
        raise DataFormatError("sweep grid is empty")
    aurocs: Dict[str, List[List[float]]] = {}
    for value in grid:
        runs = [evaluate_point(float(value), repeat) for repeat in range(repeats)]
        for score in runs[0]:
            aurocs.setdefault(score, []).append([run[score] for run in runs])
        logger.info("%s=%g: %s", axis, value, {s: round(float(np.mean(v[-1])), 4) for s, v in aurocs.items()})
    return SweepResult(axis=axis, grid=[float(v) for v in grid], aurocs=aurocs)


def _open_output(path: Optional[str]) -> Tuple[TextIO, bool]:
    if path is None or path == "-":
        return sys.stdout, False
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", encoding="utf-8", newline=""), True


def _write_rows(path: Optional[str], header: Sequence[str], rows: Iterable[Sequence[object]]) -> None:
    fh, owned = _open_output(path)
    try:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([format(v, ".17g") if isinstance(v, float) else v for v in row])
    finally:
        if owned:
            fh.close()


def write_report(results: Iterable[EvalResult], path: Optional[str] = None, metrics: Sequence[str] = ()) -> None:
    """Long-format ``metric,dataset,value`` CSV (stdout when ``path`` is None)."""
    wanted = set(metrics)
    rows = []
    for result in results:
        for metric, dataset, value in result.as_rows():
            kind = metric.rsplit("_", 1)[-1] if not metric.startswith("auroc_layer_") else "auroc"
            if wanted and kind not in wanted:
                continue
            rows.append((metric, dataset, float(value)))
    _write_rows(path, ("metric", "dataset", "value"), rows)


def write_histogram(rows: Sequence[Tuple[float, float, int, int]], path: Optional[str]) -> None:
    _write_rows(path, ("bin_left", "bin_right", "count_in", "count_out"), rows)


def sweep_rows(result: SweepResult) -> List[Tuple[object, ...]]:
    rows: List[Tuple[object, ...]] = []
    for score, points in result.aurocs.items():
        for value, runs in zip(result.grid, points):
            runs = np.asarray(runs, dtype=np.float64)
            summary = (float(runs.mean()), float(runs.min()), float(np.median(runs)), float(runs.max()))
            rows.append((result.axis, value, score) + summary)
        rows.append((result.axis, "mean", score, result.mean(score), "", "", ""))
        rows.append((result.axis, "std", score, result.std(score), "", "", ""))
    return rows


def write_sweep(result: SweepResult, path: Optional[str]) -> None:
    header = ("axis", "value", "score", "auroc", "auroc_min", "auroc_median", "auroc_max")
    _write_rows(path, header, sweep_rows(result))
