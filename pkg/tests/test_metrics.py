"""Metric correctness against brute-force oracles."""

import csv

import numpy as np
import pytest

from mat.errors import ArgumentError
from mat.metrics import (
    EvalReport,
    average_precision,
    calibrated_average_precision,
    export_score_curve,
    score_table_report,
    topk_recall,
)


def brute_force_ap(scores, positives, ratio=None):
    """O(N^2) literal expansion of the ranked-precision definition."""
    n = len(scores)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    total = 0.0
    num_pos = sum(positives)
    tp = 0
    fp = 0
    for rank, idx in enumerate(order, start=1):
        if positives[idx]:
            tp += 1
        else:
            fp += 1
        if positives[idx]:
            if ratio is None:
                total += tp / rank
            else:
                total += (ratio * tp) / (ratio * tp + fp)
    return total / num_pos


def brute_force_recall(scores, labels, k):
    per_class = {}
    for c in set(labels.tolist()):
        hits = 0
        total = 0
        for i in range(len(labels)):
            if labels[i] != c:
                continue
            total += 1
            ranked = sorted(range(scores.shape[1]), key=lambda j: (-scores[i, j], j))[:k]
            hits += int(c in ranked)
        per_class[int(c)] = hits / total
    return per_class, float(np.mean(list(per_class.values())))


class TestAveragePrecision:
    def test_perfect_ranking(self):
        scores = np.array([0.9, 0.8, 0.2, 0.1])
        positives = np.array([True, True, False, False])
        assert average_precision(scores, positives) == 1.0

    def test_hand_expansion(self):
        scores = np.array([0.9, 0.8, 0.1])
        positives = np.array([True, False, True])
        np.testing.assert_allclose(average_precision(scores, positives),
                                   (1.0 + 2.0 / 3.0) / 2.0, atol=1e-6)

    def test_reversed_perfect_ranking_matches_oracle(self):
        scores = np.linspace(0, 1, 10)
        positives = np.zeros(10, dtype=bool)
        positives[:3] = True  # positives carry the lowest scores
        np.testing.assert_allclose(average_precision(scores, positives),
                                   brute_force_ap(scores, positives), atol=1e-12)

    def test_no_positives_rejected(self):
        with pytest.raises(ArgumentError):
            average_precision(np.array([0.5]), np.array([False]))


class TestCalibratedAP:
    def test_ratio_one_equals_plain_ap(self, rng):
        scores = rng.random(40)
        positives = rng.random(40) > 0.7
        positives[0] = True
        assert calibrated_average_precision(scores, positives, 1.0) == \
            average_precision(scores, positives)

    def test_perfect_ranking_for_any_ratio(self, rng):
        scores = np.array([0.9, 0.8, 0.2, 0.1])
        positives = np.array([True, True, False, False])
        for ratio in (0.25, 1.0, 3.0, 17.0):
            assert calibrated_average_precision(scores, positives, ratio) == 1.0

    def test_nonpositive_ratio_rejected(self):
        with pytest.raises(ArgumentError):
            calibrated_average_precision(np.array([1.0]), np.array([True]), 0.0)


def test_hundred_random_instances_match_oracles():
    rng = np.random.default_rng(77)
    for _ in range(100):
        n = int(rng.integers(3, 50))
        scores = np.round(rng.random(n), 2)  # rounding forces score ties
        positives = rng.random(n) > 0.6
        if not positives.any():
            positives[int(rng.integers(0, n))] = True
        ratio = float(rng.uniform(0.2, 5.0))
        np.testing.assert_allclose(average_precision(scores, positives),
                                   brute_force_ap(scores, positives), atol=1e-9)
        np.testing.assert_allclose(calibrated_average_precision(scores, positives, ratio),
                                   brute_force_ap(scores, positives, ratio), atol=1e-9)


def test_monotone_transform_invariance(rng):
    scores = rng.random(30)
    positives = rng.random(30) > 0.5
    positives[0] = True
    base_ap = average_precision(scores, positives)
    base_cap = calibrated_average_precision(scores, positives, 3.0)
    for transform in (np.exp, lambda s: 5 * s + 2, lambda s: s ** 3):
        assert average_precision(transform(scores), positives) == base_ap
        assert calibrated_average_precision(transform(scores), positives, 3.0) == base_cap


class TestTopkRecall:
    def test_k_at_least_class_count_gives_one(self, rng):
        scores = rng.random((20, 5))
        labels = rng.integers(0, 5, 20)
        _, mean = topk_recall(scores, labels, k=5)
        assert mean == 1.0

    def test_kth_rank_boundary_inclusive(self):
        scores = np.array([[0.5, 0.3, 0.2]])
        labels = np.array([1])  # ranked exactly 2nd
        per_class, _ = topk_recall(scores, labels, k=2)
        assert per_class[1] == 1.0
        per_class, _ = topk_recall(scores, labels, k=1)
        assert per_class[1] == 0.0

    def test_random_matches_brute_force(self, rng):
        scores = np.round(rng.random((50, 6)), 1)
        labels = rng.integers(0, 6, 50)
        per_class, mean = topk_recall(scores, labels, k=3)
        ref_per_class, ref_mean = brute_force_recall(scores, labels, 3)
        assert per_class == ref_per_class
        np.testing.assert_allclose(mean, ref_mean, atol=1e-12)


class TestReport:
    def test_mean_ap_excludes_background_and_skipped(self, rng):
        scores = rng.dirichlet(np.ones(4), size=30)
        labels = rng.integers(1, 3, 30)  # class 3 never appears
        report = score_table_report(scores, labels)
        assert set(report.per_class_ap) == {1, 2}
        assert report.skipped_classes == [3]
        np.testing.assert_allclose(
            report.mean_ap, np.mean([report.per_class_ap[1], report.per_class_ap[2]]))

    def test_json_round_trip(self, tmp_path, rng):
        scores = rng.dirichlet(np.ones(4), size=20)
        labels = rng.integers(0, 4, 20)
        labels[:4] = [1, 2, 3, 1]
        report = score_table_report(scores, labels, config_echo={"model": {"seed": 0}})
        path = str(tmp_path / "report.json")
        report.to_json(path)
        import json

        loaded = json.load(open(path))
        assert loaded["config_echo"] == {"model": {"seed": 0}}
        assert loaded["frame_count"] == 20
        assert set(loaded["per_class_ap"]) <= {"1", "2", "3"}


class TestCurveExport:
    def test_rows_and_round_trip(self, tmp_path, rng):
        scores = rng.dirichlet(np.ones(3), size=25)
        labels = rng.integers(0, 3, 25)
        path = str(tmp_path / "curve.csv")
        export_score_curve(scores, labels, class_id=1, fps=4, path=path)
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 25
        got = np.array([float(r["score"]) for r in rows])
        np.testing.assert_allclose(got, scores[:, 1], atol=1e-6)
        assert [int(r["is_ground_truth"]) for r in rows] == [int(l == 1) for l in labels]
        np.testing.assert_allclose(float(rows[4]["time_seconds"]), 1.0)

    def test_noiseless_grammar_is_curve_decodable(self, tmp_path):
        from mat.data import SyntheticGrammar, generate_synthetic, load_manifest_videos

        grammar = SyntheticGrammar(num_classes=3, seg_len_min=5, seg_len_max=8,
                                   lag=1, sigma=0.0, fps=4)
        out = generate_synthetic(grammar, dim=8, split_videos={"train": 1},
                                 frames_per_video=60, seed=2, out_dir=str(tmp_path))
        video = load_manifest_videos(out["manifest"], split="train")[0]
        emb = {int(l): f for f, l in zip(video.features, video.labels)}
        table = np.zeros((60, 4))
        for c, vec in emb.items():
            table[:, c] = video.features @ vec
        # the true class's score dominates every other class on every frame
        true_scores = table[np.arange(60), video.labels]
        table_true_masked = table.copy()
        table_true_masked[np.arange(60), video.labels] = -np.inf
        assert (true_scores >= table_true_masked.max(axis=1)).all()
        export_score_curve(table, video.labels, class_id=1, fps=4,
                           path=str(tmp_path / "c.csv"))
        assert sum(1 for _ in open(tmp_path / "c.csv")) == 61
