"""Online inference engine.

Maintains a FIFO window of the last long+short features per stream and
answers, for every pushed frame, the detection distribution and one
anticipation distribution per requested gap time — all from a single dense
forward pass. An offline sliding-window driver with identical padding
semantics backs the streaming/batch equivalence checks and the eval
command.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import VideoData, extract_window
from .errors import ArgumentError
from .metrics import EvalReport, export_score_curve, score_table_report


@dataclass
class StreamOutput:
    """Per-frame answers: one detection row, one row per requested gap."""

    detection: np.ndarray
    anticipation: Dict[float, np.ndarray]


def tau_to_index(tau: float, fps: int, num_future_steps: int) -> int:
    """Future-token index for gap `tau`, snapped to the frame grid."""
    index = int(round(tau * fps)) - 1
    if index < 0 or index >= num_future_steps:
        raise ArgumentError(
            f"tau {tau} outside [{1.0 / fps}, {num_future_steps / fps}] seconds")
    return index


class StreamState:
    """Ring buffer over one video stream; confine each instance to a thread."""

    def __init__(self, model):
        self.model = model
        cfg = model.config
        self.window_len = cfg.window_len
        self.fps = cfg.fps
        self.buffer = np.zeros((cfg.window_len, cfg.embed_dim), dtype=np.float32)
        self.valid = np.zeros(cfg.window_len, dtype=bool)
        self.frames_seen = 0

    def reset(self) -> "StreamState":
        self.buffer[...] = 0.0
        self.valid[...] = False
        self.frames_seen = 0
        return self

    def push_frame(self, feature: np.ndarray, taus: Sequence[float] = ()) -> StreamOutput:
        """Append one frame, evict the oldest, answer detection plus every tau."""
        cfg = self.model.config
        indices = {tau: tau_to_index(tau, self.fps, cfg.num_future_steps) for tau in taus}
        feature = np.asarray(feature, dtype=np.float32)
        if feature.shape != (cfg.embed_dim,):
            raise ArgumentError(f"feature shape {feature.shape} != ({cfg.embed_dim},)")
        self.buffer[:-1] = self.buffer[1:]
        self.buffer[-1] = feature
        self.valid[:-1] = self.valid[1:]
        self.valid[-1] = True
        self.frames_seen += 1
        detection, future = self.model.infer(self.buffer, self.valid)
        anticipation = {tau: future[idx].copy() for tau, idx in indices.items()}
        return StreamOutput(detection=detection, anticipation=anticipation)


def offline_video_scores(model, video: VideoData, taus: Sequence[float]):
    """Stride-1 sliding-window inference with streaming-identical padding."""
    cfg = model.config
    frames = video.frames
    detection = np.zeros((frames, cfg.num_classes + 1), dtype=np.float32)
    anticipation = {tau: np.zeros((frames, cfg.num_classes + 1), dtype=np.float32)
                    for tau in taus}
    indices = {tau: tau_to_index(tau, cfg.fps, cfg.num_future_steps) for tau in taus}
    for t in range(frames):
        window, valid = extract_window(video.features, t, cfg.window_len)
        det, future = model.infer(window, valid)
        detection[t] = det
        for tau, idx in indices.items():
            anticipation[tau][t] = future[idx]
    return detection, anticipation


def streaming_video_scores(model, video: VideoData, taus: Sequence[float]):
    """Same outputs as offline_video_scores but through the ring buffer."""
    cfg = model.config
    state = StreamState(model)
    frames = video.frames
    detection = np.zeros((frames, cfg.num_classes + 1), dtype=np.float32)
    anticipation = {tau: np.zeros((frames, cfg.num_classes + 1), dtype=np.float32)
                    for tau in taus}
    for t in range(frames):
        out = state.push_frame(video.features[t], taus)
        detection[t] = out.detection
        for tau, row in out.anticipation.items():
            anticipation[tau][t] = row
    return detection, anticipation


def anticipation_accuracy(scores: np.ndarray, labels: np.ndarray, steps: int) -> float:
    """Accuracy of argmax predictions against labels `steps` frames ahead.

    The final `steps` frames have no ground truth and are skipped.
    """
    usable = scores.shape[0] - steps
    if usable <= 0:
        return 0.0
    predicted = scores[:usable].argmax(axis=1)
    return float((predicted == labels[steps:]).mean())


def evaluate_videos(model, videos: Sequence[VideoData], taus: Sequence[float],
                    recall_k: int = 5, config_echo: Optional[dict] = None,
                    use_streaming: bool = False) -> Tuple[EvalReport, np.ndarray, Dict]:
    """Pooled report over several videos (detection metrics + per-tau accuracy)."""
    cfg = model.config
    all_detection: List[np.ndarray] = []
    all_labels: List[np.ndarray] = []
    tau_hits = {tau: [0, 0] for tau in taus}
    runner = streaming_video_scores if use_streaming else offline_video_scores
    for video in videos:
        detection, anticipation = runner(model, video, taus)
        all_detection.append(detection)
        all_labels.append(video.labels)
        for tau in taus:
            steps = tau_to_index(tau, cfg.fps, cfg.num_future_steps) + 1
            usable = video.frames - steps
            if usable > 0:
                pred = anticipation[tau][:usable].argmax(axis=1)
                tau_hits[tau][0] += int((pred == video.labels[steps:]).sum())
                tau_hits[tau][1] += usable
    detection = np.concatenate(all_detection, axis=0)
    labels = np.concatenate(all_labels, axis=0)
    report = score_table_report(detection, labels,
                                recall_k=min(recall_k, cfg.num_classes + 1),
                                config_echo=config_echo)
    report.anticipation_accuracy = {
        str(tau): hits / max(total, 1) for tau, (hits, total) in tau_hits.items()}
    return report, detection, {"labels": labels}


def replay_file(model, video: VideoData, taus: Sequence[float], report_path: str,
                curves_dir: Optional[str] = None,
                config_echo: Optional[dict] = None) -> EvalReport:
    """Stream one video end to end, write the report JSON and score curves."""
    import os

    cfg = model.config
    detection, anticipation = streaming_video_scores(model, video, taus)
    report = score_table_report(detection, video.labels,
                                recall_k=min(5, cfg.num_classes + 1),
                                config_echo=config_echo)
    for tau in taus:
        steps = tau_to_index(tau, cfg.fps, cfg.num_future_steps) + 1
        report.anticipation_accuracy[str(tau)] = anticipation_accuracy(
            anticipation[tau], video.labels, steps)
    report.to_json(report_path)
    if curves_dir is not None:
        os.makedirs(curves_dir, exist_ok=True)
        for c in range(1, cfg.num_classes + 1):
            export_score_curve(detection, video.labels, c, cfg.fps,
                               os.path.join(curves_dir, f"class_{c:02d}.csv"))
    return report
