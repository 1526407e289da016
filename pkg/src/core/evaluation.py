"""
Instance-level evaluation: ROC AUC, max-F1 threshold selection and
precision/recall, pooled over all patches of the evaluated slides.
"""
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from config.settings import BENCHMARK_CONFIG, EVAL_CONFIG
from src.core.exceptions import DataIOError, ShapeError, UndefinedMetricError
from src.core.model import ModelParams, forward
from src.models.pydantic_models import BenchmarkRow, EvalReport, FrameworkConfig, LocationScore, SlideScore
from src.storage.manifest_utils import InstanceBatch

logger = logging.getLogger(__name__)


def _as_scores_and_labels(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ShapeError(f"{s.shape[0]} scores but {y.shape[0]} labels")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be binary")
    if np.any(np.isnan(s)):
        raise ValueError("scores contain NaN")
    return s, y.astype(np.int64)


def _require_both_classes(y: np.ndarray, metric: str) -> Tuple[int, int]:
    n_positive = int(y.sum())
    n_negative = int(y.shape[0] - n_positive)
    if n_positive == 0 or n_negative == 0:
        raise UndefinedMetricError(
            f"{metric} is undefined with {n_positive} positive and {n_negative} negative instances"
        )
    return n_positive, n_negative


def roc_auc(scores, labels) -> float:
    """Mann-Whitney U over midranks; tied score pairs count one half."""
    s, y = _as_scores_and_labels(scores, labels)
    n_positive, n_negative = _require_both_classes(y, "ROC AUC")
    ranks = rankdata(s, method="average")
    u_statistic = ranks[y == 1].sum() - n_positive * (n_positive + 1) / 2.0
    return float(u_statistic / (n_positive * n_negative))


def select_threshold(scores, labels) -> float:
    """Max-F1 threshold; ties go to the higher threshold.

    Candidates are the midpoints between consecutive distinct scores plus one
    value just below the minimum and one just above the maximum.
    """
    s, y = _as_scores_and_labels(scores, labels)
    n_positive, _ = _require_both_classes(y, "threshold selection")

    distinct = np.unique(s)
    candidates = np.concatenate([
        [np.nextafter(distinct[0], -np.inf)],
        (distinct[:-1] + distinct[1:]) / 2.0,
        [np.nextafter(distinct[-1], np.inf)],
    ])
    all_sorted = np.sort(s)
    positive_sorted = np.sort(s[y == 1])
    predicted = s.shape[0] - np.searchsorted(all_sorted, candidates, side="left")
    tp = n_positive - np.searchsorted(positive_sorted, candidates, side="left")
    fp = predicted - tp
    fn = n_positive - tp
    f1 = 2.0 * tp / (2.0 * tp + fp + fn)

    best = len(f1) - 1 - int(np.argmax(f1[::-1]))
    return float(candidates[best])


def precision_recall_at(scores, labels, threshold: float) -> Tuple[float, float]:
    s, y = _as_scores_and_labels(scores, labels)
    if y.sum() == 0:
        raise UndefinedMetricError("recall is undefined without positive labels")
    predicted = s >= threshold
    tp = int(np.count_nonzero(predicted & (y == 1)))
    fp = int(np.count_nonzero(predicted & (y == 0)))
    fn = int(np.count_nonzero(~predicted & (y == 1)))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    return precision, tp / (tp + fn)


def _pooled(scored: Sequence[Tuple[InstanceBatch, np.ndarray]]) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.concatenate([s for _, s in scored])
    labels = np.concatenate([b.gt_labels for b, _ in scored])
    return scores, labels


def score_slides(params: ModelParams, slides: Sequence[InstanceBatch], max_workers: int = 1) -> List[np.ndarray]:
    """Forward every slide; results are returned in slide order."""
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as executor:
            return list(executor.map(lambda b: forward(params, b.features), slides))
    return [forward(params, b.features) for b in slides]


def report_from_scores(
    scored: Sequence[Tuple[InstanceBatch, np.ndarray]],
    validation: Optional[Sequence[Tuple[InstanceBatch, np.ndarray]]] = None,
    locations: Optional[Mapping[str, str]] = None,
    framework: Optional[FrameworkConfig] = None,
) -> EvalReport:
    if not scored:
        raise UndefinedMetricError("no annotated slides to evaluate")
    for batch, _ in list(scored) + list(validation or []):
        if batch.gt_labels is None:
            raise DataIOError(f"slide {batch.slide_id} has no ground truth column")

    scores, labels = _pooled(scored)
    auc = roc_auc(scores, labels)

    threshold_source = scored
    if validation:
        _, validation_labels = _pooled(validation)
        if 0 < validation_labels.sum() < validation_labels.shape[0]:
            threshold_source = validation
        else:
            logger.warning("Validation slides hold a single class; selecting the threshold on the evaluated slides")
    else:
        logger.warning("No validation slides; selecting the threshold on the evaluated slides")
    threshold = select_threshold(*_pooled(threshold_source))
    precision, recall = precision_recall_at(scores, labels, threshold)

    per_slide = []
    if EVAL_CONFIG["per_slide"]:
        for batch, slide_scores in scored:
            single_class = batch.gt_labels.min() == batch.gt_labels.max()
            per_slide.append(SlideScore(
                slide_id=batch.slide_id,
                auc=None if single_class else roc_auc(slide_scores, batch.gt_labels),
                positive_fraction=float(batch.gt_labels.mean()),
                single_class=bool(single_class),
            ))
        n_skipped = sum(entry.single_class for entry in per_slide)
        if n_skipped:
            logger.info(f"Per-slide AUC absent for {n_skipped} single-class slides")

    per_location = []
    if locations:
        grouped: Dict[str, List[Tuple[InstanceBatch, np.ndarray]]] = defaultdict(list)
        for batch, slide_scores in scored:
            if batch.slide_id in locations:
                grouped[locations[batch.slide_id]].append((batch, slide_scores))
        for location in sorted(grouped):
            loc_scores, loc_labels = _pooled(grouped[location])
            has_both = 0 < loc_labels.sum() < loc_labels.shape[0]
            per_location.append(LocationScore(
                location=location,
                auc=roc_auc(loc_scores, loc_labels) if has_both else None,
                n_instances=int(loc_labels.shape[0]),
            ))

    return EvalReport(
        auc=auc,
        threshold=threshold,
        precision=precision,
        recall=recall,
        n_instances=int(labels.shape[0]),
        n_positive=int(labels.sum()),
        per_slide=per_slide,
        per_location=per_location,
        framework=framework,
    )


def evaluate_model(
    params: ModelParams,
    slides: Sequence[InstanceBatch],
    validation_slides: Optional[Sequence[InstanceBatch]] = None,
    locations: Optional[Mapping[str, str]] = None,
    framework: Optional[FrameworkConfig] = None,
    max_workers: int = 1,
) -> EvalReport:
    """Score annotated slides and report pooled metrics; the threshold comes from the validation slides."""
    if not slides:
        raise UndefinedMetricError("no annotated slides to evaluate")
    scored = list(zip(slides, score_slides(params, slides, max_workers)))
    validation = None
    if validation_slides:
        validation = list(zip(validation_slides, score_slides(params, validation_slides, max_workers)))
    report = report_from_scores(scored, validation, locations, framework)
    logger.info(
        f"Evaluated {report.n_instances} instances over {len(slides)} slides: AUC {report.auc:.4f}, "
        f"precision {report.precision:.4f}, recall {report.recall:.4f} at threshold {report.threshold:.4f}"
    )
    return report


def evaluate_out_of_location(
    params: ModelParams,
    slides: Sequence[InstanceBatch],
    validation_slides: Optional[Sequence[InstanceBatch]] = None,
    locations: Optional[Mapping[str, str]] = None,
    framework: Optional[FrameworkConfig] = None,
) -> Optional[EvalReport]:
    """Report on slides from held-out locations, thresholded on the in-location validation slides.

    Returns None when no such slides exist or their patches hold a single class.
    """
    if not slides:
        return None
    try:
        report = evaluate_model(params, slides, validation_slides, locations, framework)
    except UndefinedMetricError as e:
        logger.warning(f"Out-of-location report skipped: {e}")
        return None
    logger.info(f"Out-of-location AUC {report.auc:.4f} over {len(slides)} slides")
    return report


def write_report(path, report: EvalReport) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def benchmark_row(cfg: FrameworkConfig, report: EvalReport) -> BenchmarkRow:
    return BenchmarkRow(
        alpha=cfg.alpha,
        beta=cfg.beta,
        auc=report.auc,
        precision=report.precision,
        recall=report.recall,
        threshold=report.threshold,
        out_of_location_auc=report.out_of_location.auc if report.out_of_location is not None else None,
    )


def write_benchmark_csv(path, rows: Sequence[BenchmarkRow]) -> Path:
    """One row per configuration, ordered by (alpha, beta).

    The out-of-location AUC column is written only when some row carries one.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ordered = sorted(rows, key=lambda r: (r.alpha, r.beta))
    columns = list(BENCHMARK_CONFIG["csv_columns"])
    if any(r.out_of_location_auc is not None for r in ordered):
        columns.append(BENCHMARK_CONFIG["out_of_location_column"])
    frame = pd.DataFrame([r.model_dump() for r in ordered], columns=columns)
    frame.to_csv(path, index=False, lineterminator="\n")
    return path
