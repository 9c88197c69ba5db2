"""Feature/label file formats, sliding-window samples, and synthetic data.

The synthetic generator emits videos whose per-frame labels follow an
action grammar with genuine long-range structure: segment k's class is a
fixed derangement g applied to the class of segment k-lag, so anticipating
across a boundary requires remembering segments tens of frames back.
Because the first `lag` segments are sampled with no consecutive repeats
(and the first derived segment is constrained the same way), no two
adjacent segments ever share a class, which keeps every boundary visible
in the label track and lets tests re-derive the segmentation exactly.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ArgumentError, DataFormatError, LabelError
from .rng import stream_rng

FEATURE_MAGIC = b"MATF"
LABEL_MAGIC = b"MATL"
FORMAT_VERSION = 1

_SPLIT_IDS = {"train": 0, "eval": 1, "test": 2}


# ---------------------------------------------------------------------------
# binary file formats
# ---------------------------------------------------------------------------


@dataclass
class FeatureFile:
    path: str
    frame_count: int
    dim: int
    fps: int
    features: np.ndarray  # (T, D) float32


@dataclass
class LabelTrack:
    labels: np.ndarray  # (T,) int
    num_classes: int


@dataclass
class VideoData:
    video_id: str
    features: np.ndarray
    labels: np.ndarray
    fps: int
    num_classes: int

    @property
    def frames(self) -> int:
        return self.features.shape[0]


def write_feature_file(path: str, features: np.ndarray, fps: int) -> None:
    features = np.ascontiguousarray(features, dtype="<f4")
    if features.ndim != 2:
        raise ArgumentError(f"features must be (T, D), got shape {features.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IIII", FORMAT_VERSION, features.shape[0], features.shape[1], int(fps)))
        fh.write(features.tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise DataFormatError(f"truncated file: {what} expected {n} bytes, got {len(data)}")
    return data


def read_feature_file(path: str) -> FeatureFile:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != FEATURE_MAGIC:
            raise DataFormatError(f"bad feature magic {magic!r} in {path}")
        version, frames, dim, fps = struct.unpack("<IIII", _read_exact(fh, 16, "header"))
        if version != FORMAT_VERSION:
            raise DataFormatError(f"unsupported feature version {version} in {path}")
        expected = frames * dim * 4
        payload = fh.read()
    if len(payload) != expected:
        raise DataFormatError(
            f"feature payload of {path}: expected {expected} bytes, got {len(payload)}")
    features = np.frombuffer(payload, dtype="<f4").reshape(frames, dim).copy()
    return FeatureFile(path=path, frame_count=frames, dim=dim, fps=fps, features=features)


def write_label_file(path: str, labels: np.ndarray, num_classes: int) -> None:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > num_classes:
        raise LabelError(f"labels outside [0, {num_classes}]")
    with open(path, "wb") as fh:
        fh.write(LABEL_MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, labels.shape[0], int(num_classes)))
        fh.write(labels.astype("<u2").tobytes())


def read_label_file(path: str) -> LabelTrack:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != LABEL_MAGIC:
            raise DataFormatError(f"bad label magic {magic!r} in {path}")
        version, frames, num_classes = struct.unpack("<III", _read_exact(fh, 12, "header"))
        if version != FORMAT_VERSION:
            raise DataFormatError(f"unsupported label version {version} in {path}")
        payload = fh.read()
    if len(payload) != frames * 2:
        raise DataFormatError(
            f"label payload of {path}: expected {frames * 2} bytes, got {len(payload)}")
    labels = np.frombuffer(payload, dtype="<u2").astype(np.int64)
    return LabelTrack(labels=labels, num_classes=num_classes)


def load_video_pair(feature_path: str, label_path: str, video_id: Optional[str] = None) -> VideoData:
    feat = read_feature_file(feature_path)
    track = read_label_file(label_path)
    if track.labels.shape[0] != feat.frame_count:
        raise DataFormatError(
            f"{feature_path}: {feat.frame_count} frames but {track.labels.shape[0]} labels")
    return VideoData(
        video_id=video_id or os.path.splitext(os.path.basename(feature_path))[0],
        features=feat.features, labels=track.labels,
        fps=feat.fps, num_classes=track.num_classes)


def write_manifest(path: str, entries: List[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(entries, fh, indent=2)


def read_manifest(path: str) -> List[dict]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            entries = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(entries, list):
        raise DataFormatError("manifest root must be a JSON array")
    for entry in entries:
        if not isinstance(entry, dict) or not {"feature_path", "label_path", "split"} <= set(entry):
            raise DataFormatError(f"malformed manifest entry: {entry!r}")
    return entries


def load_manifest_videos(path: str, split: Optional[str] = None) -> List[VideoData]:
    base = os.path.dirname(os.path.abspath(path))
    videos = []
    for entry in read_manifest(path):
        if split is not None and entry["split"] != split:
            continue
        videos.append(load_video_pair(
            os.path.join(base, entry["feature_path"]),
            os.path.join(base, entry["label_path"])))
    return videos


# ---------------------------------------------------------------------------
# synthetic grammar
# ---------------------------------------------------------------------------


@dataclass
class SyntheticGrammar:
    num_classes: int = 6
    seg_len_min: int = 8
    seg_len_max: int = 16
    lag: int = 3
    sigma: float = 0.5
    fps: int = 4

    def validate(self) -> "SyntheticGrammar":
        if self.num_classes < 2:
            raise ArgumentError("grammar needs at least 2 classes")
        if not 1 <= self.seg_len_min <= self.seg_len_max:
            raise ArgumentError("empty segment length range")
        if self.lag < 1:
            raise ArgumentError("lag must be >= 1")
        if self.sigma < 0:
            raise ArgumentError("sigma must be nonnegative")
        return self


def sample_derangement(num_classes: int, rng: np.random.Generator) -> Dict[int, int]:
    """Fixed-point-free permutation of classes 1..C (so adjacent segments
    generated via the rule never repeat)."""
    classes = np.arange(1, num_classes + 1)
    while True:
        perm = rng.permutation(classes)
        if not np.any(perm == classes):
            return {int(c): int(p) for c, p in zip(classes, perm)}


def class_embeddings(num_classes: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """(C+1, dim) unit row per foreground class; background row stays zero."""
    table = np.zeros((num_classes + 1, dim), dtype=np.float32)
    for c in range(1, num_classes + 1):
        vec = rng.normal(0.0, 1.0, size=dim)
        table[c] = (vec / np.linalg.norm(vec)).astype(np.float32)
    return table


def generate_segments(grammar: SyntheticGrammar, total_frames: int,
                      permutation: Dict[int, int], rng: np.random.Generator):
    """Realize one video: returns (classes, lengths) with sum(lengths) == total_frames."""
    classes: List[int] = []
    lengths: List[int] = []
    total = 0
    while total < total_frames:
        k = len(classes)
        if k < grammar.lag:
            forbidden = set()
            if k > 0:
                forbidden.add(classes[k - 1])
            if k == grammar.lag - 1 and k > 0:
                forbidden.add(permutation[classes[0]])
            choices = [c for c in range(1, grammar.num_classes + 1) if c not in forbidden]
            classes.append(int(rng.choice(choices)))
        else:
            classes.append(permutation[classes[k - grammar.lag]])
        length = int(rng.integers(grammar.seg_len_min, grammar.seg_len_max + 1))
        length = min(length, total_frames - total)
        lengths.append(length)
        total += length
    return classes, lengths


def labels_from_segments(classes: Sequence[int], lengths: Sequence[int]) -> np.ndarray:
    return np.repeat(np.asarray(classes, dtype=np.int64), np.asarray(lengths, dtype=np.int64))


def segments_from_labels(labels: np.ndarray):
    """Inverse of labels_from_segments; valid because adjacent segments differ."""
    boundaries = np.flatnonzero(np.diff(labels) != 0) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(labels)]])
    classes = labels[starts].tolist()
    lengths = (ends - starts).tolist()
    return classes, lengths


# ---------------------------------------------------------------------------
# grammar oracle
# ---------------------------------------------------------------------------


class GrammarOracle:
    """Optimal anticipation under the grammar, given the realized past.

    The only unresolved randomness about the near future is how long the
    remaining segments run; classes of upcoming segments follow
    deterministically from the rule. The oracle marginalizes segment
    lengths (uniform prior, conditioned on the observed elapsed length) and
    predicts the class of the most likely landing segment.
    """

    def __init__(self, grammar: SyntheticGrammar, permutation: Dict[int, int]):
        self.grammar = grammar
        self.permutation = permutation
        self._fresh_memo: Dict[int, Dict[int, float]] = {}
        self._landing_memo: Dict[Tuple[int, int], Dict[int, float]] = {}

    def _fresh(self, rem: int) -> Dict[int, float]:
        """Landing-segment distribution after advancing `rem` frames from a
        fresh segment start."""
        memo = self._fresh_memo.get(rem)
        if memo is not None:
            return memo
        g = self.grammar
        n = g.seg_len_max - g.seg_len_min + 1
        dist: Dict[int, float] = {}
        for s in range(g.seg_len_min, g.seg_len_max + 1):
            if rem <= s - 1:
                dist[0] = dist.get(0, 0.0) + 1.0 / n
            else:
                for j, p in self._fresh(rem - s).items():
                    dist[j + 1] = dist.get(j + 1, 0.0) + p / n
        self._fresh_memo[rem] = dist
        return dist

    def landing_distribution(self, offset: int, steps_ahead: int) -> Dict[int, float]:
        """P(frame at +steps_ahead lies j segments ahead | elapsed offset)."""
        key = (offset, steps_ahead)
        memo = self._landing_memo.get(key)
        if memo is not None:
            return memo
        g = self.grammar
        support = range(max(offset + 1, g.seg_len_min), g.seg_len_max + 1)
        n = len(support)
        dist: Dict[int, float] = {}
        for s in support:
            boundary_in = s - offset  # frames until the next segment starts
            if steps_ahead < boundary_in:
                dist[0] = dist.get(0, 0.0) + 1.0 / n
            else:
                for j, p in self._fresh(steps_ahead - boundary_in).items():
                    dist[j + 1] = dist.get(j + 1, 0.0) + p / n
        self._landing_memo[key] = dist
        return dist

    def extend_classes(self, classes: Sequence[int], needed: int) -> List[int]:
        out = list(classes)
        while len(out) < needed:
            out.append(self.permutation[out[-self.grammar.lag]])
        return out

    def predict(self, classes: Sequence[int], seg_index: int, offset: int,
                steps_ahead: int) -> int:
        dist = self.landing_distribution(offset, steps_ahead)
        best_j = min(dist.items(), key=lambda item: (-item[1], item[0]))[0]
        ext = self.extend_classes(classes, seg_index + best_j + 1)
        return ext[seg_index + best_j]

    def accuracy(self, labels: np.ndarray, steps_ahead: int) -> Tuple[int, int]:
        """(correct, counted) over every frame with ground truth in range."""
        classes, lengths = segments_from_labels(labels)
        seg_of = np.repeat(np.arange(len(classes)), lengths)
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        offsets = np.arange(len(labels)) - starts[seg_of]
        correct = 0
        total = len(labels) - steps_ahead
        for t in range(total):
            pred = self.predict(classes, int(seg_of[t]), int(offsets[t]), steps_ahead)
            correct += int(pred == labels[t + steps_ahead])
        return correct, total


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------


def nearest_embedding_accuracy(features: np.ndarray, labels: np.ndarray,
                               embeddings: np.ndarray) -> float:
    """Single-frame decode accuracy by dot product with the class embeddings."""
    scores = features @ embeddings[1:].T
    decoded = scores.argmax(axis=1) + 1
    return float((decoded == labels).mean())


def generate_synthetic(grammar: SyntheticGrammar, dim: int, split_videos: Dict[str, int],
                       frames_per_video: int, seed: int, out_dir: str,
                       oracle_steps: Sequence[int] = ()) -> dict:
    """Write a full synthetic dataset plus manifest and oracle sidecar report.

    Deterministic for (grammar, dim, split_videos, frames, seed): every rng
    draw comes from a named stream keyed by split and video index.
    """
    grammar.validate()
    if frames_per_video < grammar.seg_len_max:
        raise ArgumentError("frames_per_video shorter than the longest segment")
    os.makedirs(out_dir, exist_ok=True)
    grammar_rng = stream_rng(seed, "grammar")
    permutation = sample_derangement(grammar.num_classes, grammar_rng)
    embeddings = class_embeddings(grammar.num_classes, dim, grammar_rng)
    oracle = GrammarOracle(grammar, permutation)

    manifest_entries = []
    split_stats: Dict[str, dict] = {}
    for split, count in split_videos.items():
        split_id = _SPLIT_IDS.get(split)
        if split_id is None:
            raise ArgumentError(f"unknown split {split!r}")
        bayes = {step: [0, 0] for step in oracle_steps}
        nn_hits = 0
        frames_total = 0
        for i in range(count):
            rng = stream_rng(seed, "data", split_id, i)
            classes, lengths = generate_segments(grammar, frames_per_video, permutation, rng)
            labels = labels_from_segments(classes, lengths)
            noise = rng.normal(0.0, grammar.sigma, size=(frames_per_video, dim))
            features = (embeddings[labels] + noise).astype(np.float32)
            feature_name = f"{split}_{i:03d}.matf"
            label_name = f"{split}_{i:03d}.matl"
            write_feature_file(os.path.join(out_dir, feature_name), features, grammar.fps)
            write_label_file(os.path.join(out_dir, label_name), labels, grammar.num_classes)
            manifest_entries.append(
                {"feature_path": feature_name, "label_path": label_name, "split": split})
            for step in oracle_steps:
                c, n = oracle.accuracy(labels, step)
                bayes[step][0] += c
                bayes[step][1] += n
            nn_hits += int(round(nearest_embedding_accuracy(features, labels, embeddings)
                                 * frames_per_video))
            frames_total += frames_per_video
        split_stats[split] = {
            "videos": count,
            "frames": frames_total,
            "bayes_anticipation_accuracy": {
                str(step): (hits / max(total, 1)) for step, (hits, total) in bayes.items()},
            "nearest_embedding_detection_accuracy": nn_hits / max(frames_total, 1),
        }

    manifest_path = os.path.join(out_dir, "manifest.json")
    write_manifest(manifest_path, manifest_entries)
    report = {
        "grammar": {
            "num_classes": grammar.num_classes,
            "seg_len_min": grammar.seg_len_min,
            "seg_len_max": grammar.seg_len_max,
            "lag": grammar.lag,
            "sigma": grammar.sigma,
            "fps": grammar.fps,
        },
        "dim": dim,
        "seed": seed,
        "permutation": {str(k): v for k, v in permutation.items()},
        "splits": split_stats,
    }
    report_path = os.path.join(out_dir, "oracle_report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    return {"manifest": manifest_path, "oracle_report": report_path, "report": report}


# ---------------------------------------------------------------------------
# sliding windows
# ---------------------------------------------------------------------------


@dataclass
class Sample:
    """One anchored training window plus its supervision."""

    features: np.ndarray      # (long+short, D), left-padded with zeros
    valid: np.ndarray         # (long+short,) bool, False on warm-up padding
    short_labels: np.ndarray  # (short_len,)
    future_labels: np.ndarray  # (num_future_steps,)
    video_id: str
    anchor: int


def extract_window(features: np.ndarray, anchor: int, window_len: int):
    """Left-padded window of the `window_len` frames ending at `anchor`."""
    dim = features.shape[1]
    window = np.zeros((window_len, dim), dtype=np.float32)
    valid = np.zeros(window_len, dtype=bool)
    lo = max(anchor - window_len + 1, 0)
    n = anchor + 1 - lo
    window[window_len - n:] = features[lo:anchor + 1]
    valid[window_len - n:] = True
    return window, valid


def make_samples(video: VideoData, long_len: int, short_len: int,
                 num_future_steps: int, stride: int = 1,
                 include_incomplete_future: bool = False) -> List[Sample]:
    """One sample per anchor at the given stride.

    Early anchors are left-padded on the long side; anchors whose future
    horizon runs off the video end are dropped unless
    include_incomplete_future (then missing future labels are zero-filled).
    """
    if stride < 1:
        raise ArgumentError(f"stride must be >= 1, got {stride}")
    window_len = long_len + short_len
    frames = video.frames
    samples = []
    for anchor in range(0, frames, stride):
        if not include_incomplete_future and anchor + num_future_steps >= frames:
            continue
        window, valid = extract_window(video.features, anchor, window_len)
        short_labels = np.zeros(short_len, dtype=np.int64)
        lo = max(anchor - short_len + 1, 0)
        n = anchor + 1 - lo
        short_labels[short_len - n:] = video.labels[lo:anchor + 1]
        future_labels = np.zeros(num_future_steps, dtype=np.int64)
        hi = min(anchor + num_future_steps, frames - 1)
        count = hi - anchor
        if count > 0:
            future_labels[:count] = video.labels[anchor + 1:hi + 1]
        samples.append(Sample(
            features=window, valid=valid, short_labels=short_labels,
            future_labels=future_labels, video_id=video.video_id, anchor=anchor))
    return samples
