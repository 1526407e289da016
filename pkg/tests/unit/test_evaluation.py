#!/usr/bin/env python3
"""
Unit tests for instance-level metrics and reports
"""
import sys
import os
import numpy as np
import pandas as pd
import pytest
from sklearn.metrics import roc_auc_score

# Add src to Python path
sys.path.append(os.path.join(os.path.dirname(__file__), '..', '..'))

from src.core.evaluation import (
    benchmark_row,
    evaluate_model,
    evaluate_out_of_location,
    precision_recall_at,
    report_from_scores,
    roc_auc,
    select_threshold,
    write_benchmark_csv,
)
from src.core.exceptions import DataIOError, UndefinedMetricError
from src.core.model import init_mlp
from src.models.pydantic_models import BenchmarkRow, EvalReport, FrameworkConfig
from src.storage.manifest_utils import InstanceBatch


def pairwise_auc(scores, labels) -> float:
    positives = [s for s, y in zip(scores, labels) if y == 1]
    negatives = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in positives:
        for n in negatives:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(positives) * len(negatives))


def annotated(slide_id: str, gt, dim: int = 3, seed: int = 0) -> InstanceBatch:
    gt = np.asarray(gt, dtype=np.int8)
    n = gt.shape[0]
    return InstanceBatch(
        slide_id=slide_id,
        patch_ids=np.array([str(k) for k in range(n)], dtype=object),
        coords=np.stack([np.arange(n), np.zeros(n, dtype=np.int64)], axis=1),
        features=np.random.default_rng(seed).standard_normal((n, dim)),
        gt_labels=gt,
    )


class TestRocAuc:
    """Test cases for roc_auc"""

    def test_examples(self):
        assert roc_auc([0.1, 0.9], [0, 1]) == 1.0
        assert roc_auc([0.5, 0.5], [0, 1]) == 0.5
        assert roc_auc([0.2, 0.4, 0.6, 0.8], [0, 1, 0, 1]) == pytest.approx(0.75, abs=1e-15)

    def test_single_class_is_undefined(self):
        with pytest.raises(UndefinedMetricError):
            roc_auc([0.1, 0.2], [1, 1])
        with pytest.raises(UndefinedMetricError):
            roc_auc([0.1, 0.2], [0, 0])

    def test_matches_pairwise_oracle(self):
        """100 random instances with n <= 500, heavy ties included"""
        rng = np.random.default_rng(77)
        for case in range(100):
            n = int(rng.integers(2, 501))
            labels = rng.integers(0, 2, size=n)
            labels[0], labels[1] = 0, 1
            scores = rng.uniform(size=n)
            if case % 3 == 0:
                scores = rng.integers(0, 4, size=n) / 3.0
            assert abs(roc_auc(scores, labels) - pairwise_auc(scores.tolist(), labels.tolist())) <= 1e-12

    def test_agrees_with_sklearn(self):
        rng = np.random.default_rng(1)
        labels = rng.integers(0, 2, size=400)
        scores = np.round(rng.uniform(size=400), 2)
        assert roc_auc(scores, labels) == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)

    def test_negated_scores_complement(self):
        rng = np.random.default_rng(2)
        labels = rng.integers(0, 2, size=300)
        scores = rng.standard_normal(300)
        assert roc_auc(scores, labels) + roc_auc(-scores, labels) == pytest.approx(1.0, abs=1e-12)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(3)
        labels = rng.integers(0, 2, size=300)
        scores = rng.uniform(size=300)
        assert roc_auc(np.exp(3 * scores), labels) == roc_auc(scores, labels)


class TestThresholds:
    """Test cases for select_threshold and precision_recall_at"""

    def test_separated_scores_pick_midpoint(self):
        threshold = select_threshold([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
        assert threshold == 0.5
        assert precision_recall_at([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1], threshold) == (1.0, 1.0)

    def test_two_points(self):
        assert select_threshold([0.3, 0.7], [0, 1]) == 0.5

    def test_identical_scores_predict_all_positive(self):
        threshold = select_threshold([0.5, 0.5, 0.5, 0.5], [0, 1, 1, 0])
        assert threshold < 0.5
        precision, recall = precision_recall_at([0.5] * 4, [0, 1, 1, 0], threshold)
        assert (precision, recall) == (0.5, 1.0)

    def test_f1_tie_prefers_higher_threshold(self):
        """Predicting all positive and cutting at 0.35 both reach F1 = 2/3; the higher cut wins"""
        threshold = select_threshold([0.1, 0.2, 0.3, 0.4], [1, 0, 0, 1])
        assert threshold == pytest.approx(0.35)

    def test_threshold_single_class(self):
        with pytest.raises(UndefinedMetricError):
            select_threshold([0.2, 0.4], [0, 0])

    def test_precision_recall_examples(self):
        assert precision_recall_at([0.9, 0.8, 0.2], [1, 0, 1], 0.5) == (0.5, 0.5)
        assert precision_recall_at([0.9, 0.8, 0.2], [1, 0, 1], 2.0) == (0.0, 0.0)

    def test_recall_needs_positives(self):
        with pytest.raises(UndefinedMetricError):
            precision_recall_at([0.3, 0.6], [0, 0], 0.5)

    def test_recall_monotone_in_threshold(self):
        rng = np.random.default_rng(5)
        labels = rng.integers(0, 2, size=200)
        labels[0] = 1
        scores = rng.uniform(size=200)
        recalls = [precision_recall_at(scores, labels, t)[1] for t in np.linspace(-0.1, 1.1, 50)]
        assert all(a >= b for a, b in zip(recalls, recalls[1:]))


class TestReports:
    """Test cases for report assembly and benchmark output"""

    def test_constant_scorer(self):
        """All-zero parameters tie every instance at 0.5"""
        params = init_mlp([3, 4, 1], seed=0).zeros_like()
        slides = [annotated("a", [0, 1, 1, 0]), annotated("b", [0, 0, 0], seed=1)]
        report = evaluate_model(params, slides)
        assert report.auc == 0.5
        assert report.n_instances == 7
        assert report.n_positive == 2

    def test_perfect_scorer(self):
        slides = [annotated("a", [0, 1, 1, 0]), annotated("b", [1, 0, 0], seed=1)]
        scored = [(s, s.gt_labels.astype(np.float64)) for s in slides]
        report = report_from_scores(scored, validation=scored)
        assert report.auc == 1.0
        assert report.precision == 1.0 and report.recall == 1.0
        assert report.threshold == 0.5

    def test_threshold_comes_from_validation(self):
        test = [(annotated("t", [0, 1, 0, 1]), np.array([0.1, 0.35, 0.3, 0.9]))]
        validation = [(annotated("v", [0, 1]), np.array([0.5, 0.7]))]
        report = report_from_scores(test, validation=validation)
        assert report.threshold == pytest.approx(0.6)
        # a threshold chosen on the test slides would separate them perfectly
        assert (report.precision, report.recall) == (1.0, 0.5)

    def test_single_class_slides_flagged(self):
        slides = [annotated("mixed", [0, 1, 0]), annotated("normal", [0, 0], seed=1)]
        scored = [(s, np.linspace(0.1, 0.9, len(s))) for s in slides]
        report = report_from_scores(scored)
        by_id = {entry.slide_id: entry for entry in report.per_slide}

        assert by_id["normal"].single_class and by_id["normal"].auc is None
        assert not by_id["mixed"].single_class and by_id["mixed"].auc is not None
        assert by_id["mixed"].positive_fraction == pytest.approx(1 / 3)

    def test_per_location_breakdown(self):
        slides = [annotated("a", [0, 1]), annotated("b", [1, 0], seed=1), annotated("c", [0, 0], seed=2)]
        scored = [(s, np.array([0.2, 0.8]) if s.slide_id == "a" else np.array([0.3, 0.6])) for s in slides]
        report = report_from_scores(scored, locations={"a": "breast", "b": "lung", "c": "lung"})
        by_location = {entry.location: entry for entry in report.per_location}

        assert by_location["breast"].auc == 1.0
        assert by_location["lung"].n_instances == 4
        assert by_location["lung"].auc == pytest.approx(1 / 6)

    def test_no_slides(self):
        with pytest.raises(UndefinedMetricError):
            evaluate_model(init_mlp([3, 1], seed=0), [])

    def test_missing_ground_truth(self):
        slide = annotated("a", [0, 1]).without_ground_truth()
        with pytest.raises(DataIOError):
            report_from_scores([(slide, np.array([0.1, 0.9]))])

    def test_benchmark_csv_is_ordered(self, tmp_path):
        report = EvalReport(auc=0.8, threshold=0.4, precision=0.7, recall=0.6, n_instances=10, n_positive=4)
        configs = [FrameworkConfig(alpha=a, beta=b) for a, b in [(0.6, 0.2), (0.2, 0.4), (0.2, 0.0), (1.0, 0.0)]]
        rows = [benchmark_row(cfg, report) for cfg in configs]
        path = write_benchmark_csv(tmp_path / "bench.csv", rows)

        frame = pd.read_csv(path)
        assert list(frame.columns) == ["alpha", "beta", "auc", "precision", "recall", "threshold"]
        assert list(zip(frame["alpha"], frame["beta"])) == [(0.2, 0.0), (0.2, 0.4), (0.6, 0.2), (1.0, 0.0)]
        assert isinstance(rows[0], BenchmarkRow)

    def test_benchmark_csv_out_of_location_column(self, tmp_path):
        held_out = EvalReport(auc=0.55, threshold=0.4, precision=0.5, recall=0.5, n_instances=6, n_positive=2)
        report = EvalReport(auc=0.8, threshold=0.4, precision=0.7, recall=0.6, n_instances=10, n_positive=4,
                            out_of_location=held_out)
        rows = [benchmark_row(FrameworkConfig(alpha=a, beta=0.0), report) for a in (0.5, 1.0)]
        frame = pd.read_csv(write_benchmark_csv(tmp_path / "bench.csv", rows))

        assert list(frame.columns)[-1] == "out_of_location_auc"
        assert frame["out_of_location_auc"].tolist() == [0.55, 0.55]


class TestOutOfLocation:
    """Test cases for evaluate_out_of_location"""

    def setup_method(self):
        """Setup test fixtures"""
        self.params = init_mlp([3, 4, 1], seed=5)
        self.validation = [annotated("v", [0, 1, 0, 1, 1], seed=7)]

    def test_matches_a_plain_report(self):
        slides = [annotated("o1", [0, 1, 1, 0], seed=3), annotated("o2", [1, 0, 0], seed=4)]
        report = evaluate_out_of_location(self.params, slides, self.validation, {"o1": "colon", "o2": "colon"})
        plain = evaluate_model(self.params, slides, self.validation)

        assert report is not None
        assert report.auc == plain.auc
        assert report.threshold == plain.threshold
        assert report.n_instances == 7
        assert [entry.location for entry in report.per_location] == ["colon"]

    def test_no_slides(self):
        assert evaluate_out_of_location(self.params, [], self.validation) is None

    def test_single_class_slides(self):
        slides = [annotated("o1", [0, 0, 0], seed=3)]
        assert evaluate_out_of_location(self.params, slides, self.validation) is None

    def test_nested_report_serializes(self):
        slides = [annotated("o1", [0, 1, 1, 0], seed=3)]
        inner = evaluate_out_of_location(self.params, slides, self.validation)
        outer = evaluate_model(self.params, self.validation).model_copy(update={"out_of_location": inner})
        assert EvalReport.model_validate_json(outer.model_dump_json()) == outer


if __name__ == "__main__":
    pytest.main([__file__])
