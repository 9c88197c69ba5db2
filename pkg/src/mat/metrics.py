"""Per-frame evaluation metrics.

Average precision, calibrated average precision (precision reweighted by
the negative/positive ratio), class-mean top-k recall, report assembly,
and CSV export of per-class score curves.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .errors import ArgumentError


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """AP over frames: mean precision at each positive, ranked by score.

    Frames sort by descending score; equal scores break by ascending frame
    index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if scores.shape != positives.shape or scores.ndim != 1:
        raise ArgumentError(f"scores {scores.shape} vs positives {positives.shape}")
    num_pos = int(positives.sum())
    if num_pos == 0:
        raise ArgumentError("average_precision undefined without positives")
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(scores) + 1)
    return float(precision[hits].sum() / num_pos)


def calibrated_average_precision(scores: np.ndarray, positives: np.ndarray,
                                 ratio: float) -> float:
    """AP with calibrated precision w*TP / (w*TP + FP); ratio=1 equals AP."""
    if ratio <= 0:
        raise ArgumentError(f"calibration ratio must be positive, got {ratio}")
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    num_pos = int(positives.sum())
    if num_pos == 0:
        raise ArgumentError("calibrated AP undefined without positives")
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    tp = np.cumsum(hits)
    fp = np.arange(1, len(scores) + 1) - tp
    cprec = (ratio * tp) / (ratio * tp + fp)
    return float(cprec[hits].sum() / num_pos)


def topk_recall(scores: np.ndarray, labels: np.ndarray, k: int):
    """Per-class and class-mean recall@k.

    A frame is recalled when its true class ranks among the k best scores
    (ties by ascending class index). Mean runs over classes present in the
    labels.
    """
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    topk = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    recalled = (topk == labels[:, None]).any(axis=1)
    per_class: Dict[int, float] = {}
    for c in np.unique(labels):
        sel = labels == c
        per_class[int(c)] = float(recalled[sel].mean())
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mean


@dataclass
class EvalReport:
    """Aggregated evaluation results, serializable to JSON."""

    frame_count: int
    per_class_ap: Dict[int, float] = field(default_factory=dict)
    per_class_cap: Dict[int, float] = field(default_factory=dict)
    per_class_recall: Dict[int, float] = field(default_factory=dict)
    recall_k: int = 5
    mean_ap: float = 0.0
    mean_cap: float = 0.0
    mean_recall: float = 0.0
    detection_accuracy: float = 0.0
    anticipation_accuracy: Dict[str, float] = field(default_factory=dict)
    skipped_classes: List[int] = field(default_factory=list)
    config_echo: dict = field(default_factory=dict)

    def to_json(self, path: str) -> None:
        payload = dataclasses.asdict(self)
        for key in ("per_class_ap", "per_class_cap", "per_class_recall"):
            payload[key] = {str(k): v for k, v in payload[key].items()}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)


def score_table_report(scores: np.ndarray, labels: np.ndarray, recall_k: int = 5,
                       config_echo: Optional[dict] = None) -> EvalReport:
    """Detection report over a (T, C+1) probability table.

    Background (class 0) is excluded from the AP/cAP means; classes without
    positives are skipped and flagged.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    frames, num_cols = scores.shape
    report = EvalReport(frame_count=frames, recall_k=recall_k,
                        config_echo=config_echo or {})
    for c in range(1, num_cols):
        positives = labels == c
        pos = int(positives.sum())
        if pos == 0:
            report.skipped_classes.append(c)
            continue
        ratio = (frames - pos) / pos
        report.per_class_ap[c] = average_precision(scores[:, c], positives)
        report.per_class_cap[c] = calibrated_average_precision(scores[:, c], positives, ratio)
    if report.per_class_ap:
        report.mean_ap = float(np.mean(list(report.per_class_ap.values())))
        report.mean_cap = float(np.mean(list(report.per_class_cap.values())))
    report.per_class_recall, report.mean_recall = topk_recall(scores, labels, recall_k)
    report.detection_accuracy = float((scores.argmax(axis=1) == labels).mean())
    return report


def export_score_curve(scores: np.ndarray, labels: np.ndarray, class_id: int,
                       fps: int, path: str) -> None:
    """CSV rows (frame_index, time_seconds, score, is_ground_truth)."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= class_id < scores.shape[1]:
        raise ArgumentError(f"class {class_id} outside [0, {scores.shape[1] - 1}]")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_index", "time_seconds", "score", "is_ground_truth"])
        for t in range(scores.shape[0]):
            writer.writerow([t, f"{t / fps:.6f}", f"{scores[t, class_id]:.8e}",
                             int(labels[t] == class_id)])
