"""File formats, synthetic grammar, oracle, and window assembly."""

import filecmp
import json
import os

import numpy as np
import pytest

from mat.data import (
    GrammarOracle,
    SyntheticGrammar,
    VideoData,
    extract_window,
    generate_segments,
    generate_synthetic,
    labels_from_segments,
    load_manifest_videos,
    load_video_pair,
    make_samples,
    read_feature_file,
    read_label_file,
    read_manifest,
    sample_derangement,
    segments_from_labels,
    write_feature_file,
    write_label_file,
    write_manifest,
)
from mat.errors import DataFormatError
from mat.rng import stream_rng


class TestFeatureFile:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        feats = rng.normal(size=(100, 64)).astype(np.float32)
        path = str(tmp_path / "v.matf")
        write_feature_file(path, feats, fps=4)
        loaded = read_feature_file(path)
        assert (loaded.frame_count, loaded.dim, loaded.fps) == (100, 64, 4)
        np.testing.assert_array_equal(loaded.features, feats)

    def test_corrupt_magic_rejected(self, tmp_path, rng):
        path = tmp_path / "v.matf"
        write_feature_file(str(path), rng.normal(size=(4, 2)).astype(np.float32), 4)
        data = bytearray(path.read_bytes())
        data[:4] = b"XATF"
        path.write_bytes(bytes(data))
        with pytest.raises(DataFormatError, match="magic"):
            read_feature_file(str(path))

    def test_truncation_reports_expected_and_actual(self, tmp_path, rng):
        path = tmp_path / "v.matf"
        write_feature_file(str(path), rng.normal(size=(4, 2)).astype(np.float32), 4)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(DataFormatError, match="expected 32 bytes, got 28"):
            read_feature_file(str(path))


class TestLabelFile:
    def test_round_trip(self, tmp_path):
        labels = np.array([0, 1, 2, 2, 5], dtype=np.int64)
        path = str(tmp_path / "v.matl")
        write_label_file(path, labels, num_classes=6)
        track = read_label_file(path)
        assert track.num_classes == 6
        np.testing.assert_array_equal(track.labels, labels)

    def test_corrupt_magic(self, tmp_path):
        path = tmp_path / "v.matl"
        write_label_file(str(path), np.zeros(3, dtype=np.int64), 2)
        data = bytearray(path.read_bytes())
        data[:4] = b"ZZZZ"
        path.write_bytes(bytes(data))
        with pytest.raises(DataFormatError, match="magic"):
            read_label_file(str(path))

    def test_frame_count_mismatch_between_pair(self, tmp_path, rng):
        write_feature_file(str(tmp_path / "a.matf"), rng.normal(size=(5, 2)).astype(np.float32), 4)
        write_label_file(str(tmp_path / "a.matl"), np.zeros(4, dtype=np.int64), 2)
        with pytest.raises(DataFormatError, match="frames"):
            load_video_pair(str(tmp_path / "a.matf"), str(tmp_path / "a.matl"))


class TestManifest:
    def test_round_trip(self, tmp_path):
        entries = [{"feature_path": "a.matf", "label_path": "a.matl", "split": "train"}]
        path = str(tmp_path / "manifest.json")
        write_manifest(path, entries)
        assert read_manifest(path) == entries

    def test_malformed_entry_rejected(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps([{"feature_path": "a"}]))
        with pytest.raises(DataFormatError, match="malformed"):
            read_manifest(str(path))


GRAMMAR = SyntheticGrammar(num_classes=6, seg_len_min=8, seg_len_max=16,
                           lag=3, sigma=0.5, fps=4)


class TestGenerator:
    def test_byte_identical_across_runs(self, tmp_path):
        dirs = [str(tmp_path / "a"), str(tmp_path / "b")]
        for d in dirs:
            generate_synthetic(GRAMMAR, dim=8, split_videos={"train": 2, "eval": 1},
                               frames_per_video=120, seed=5, out_dir=d, oracle_steps=[4])
        for name in sorted(os.listdir(dirs[0])):
            assert filecmp.cmp(os.path.join(dirs[0], name), os.path.join(dirs[1], name),
                               shallow=False), name

    def test_noiseless_features_equal_embeddings(self, tmp_path):
        grammar = SyntheticGrammar(num_classes=4, seg_len_min=5, seg_len_max=9,
                                   lag=2, sigma=0.0, fps=4)
        out = generate_synthetic(grammar, dim=16, split_videos={"train": 1},
                                 frames_per_video=100, seed=3, out_dir=str(tmp_path))
        video = load_manifest_videos(out["manifest"], split="train")[0]
        # with zero noise every frame equals its class embedding exactly, so
        # same-label frames are identical and distinct labels are separable
        by_label = {}
        for f, lab in zip(video.features, video.labels):
            by_label.setdefault(int(lab), f)
            np.testing.assert_array_equal(by_label[int(lab)], f)
        vectors = list(by_label.values())
        for i in range(len(vectors)):
            for j in range(i + 1, len(vectors)):
                assert not np.array_equal(vectors[i], vectors[j])
        assert stream_rng(3, "grammar")  # named streams stay constructible
        # nearest-embedding decode: use the per-class vectors as the codebook
        emb = np.zeros((5, 16), dtype=np.float32)
        for lab, vec in by_label.items():
            emb[lab] = vec
        decoded = (video.features @ emb[1:].T).argmax(axis=1) + 1
        present = np.isin(video.labels, list(by_label))
        assert (decoded[present] == video.labels[present]).mean() == 1.0

    def test_transition_rule_audit(self, tmp_path):
        out = generate_synthetic(GRAMMAR, dim=8, split_videos={"train": 3},
                                 frames_per_video=400, seed=11, out_dir=str(tmp_path))
        perm = {int(k): v for k, v in out["report"]["permutation"].items()}
        for video in load_manifest_videos(out["manifest"], split="train"):
            classes, lengths = segments_from_labels(video.labels)
            assert len(classes) >= GRAMMAR.lag + 2
            for k in range(GRAMMAR.lag, len(classes)):
                assert classes[k] == perm[classes[k - GRAMMAR.lag]]
            # adjacent segments never share a class (keeps boundaries visible)
            assert all(a != b for a, b in zip(classes, classes[1:]))

    def test_derangement_has_no_fixed_points(self):
        for seed in range(5):
            perm = sample_derangement(6, stream_rng(seed, "grammar"))
            assert all(perm[c] != c for c in range(1, 7))

    def test_oracle_report_structure(self, tmp_path):
        out = generate_synthetic(GRAMMAR, dim=8, split_videos={"train": 1, "eval": 1},
                                 frames_per_video=200, seed=0, out_dir=str(tmp_path),
                                 oracle_steps=[4, 8])
        report = json.load(open(out["oracle_report"]))
        for split in ("train", "eval"):
            stats = report["splits"][split]
            assert set(stats["bayes_anticipation_accuracy"]) == {"4", "8"}
            assert 0 < stats["nearest_embedding_detection_accuracy"] <= 1


class TestOracle:
    def test_deterministic_horizon_predictions_always_correct(self):
        rng = stream_rng(7, "grammar")
        perm = sample_derangement(6, rng)
        oracle = GrammarOracle(GRAMMAR, perm)
        classes, lengths = generate_segments(GRAMMAR, 3000, perm, rng)
        labels = labels_from_segments(classes, lengths)
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        seg_of = np.repeat(np.arange(len(classes)), lengths)
        offsets = np.arange(len(labels)) - starts[seg_of]
        steps = 4
        for t in range(len(labels) - steps):
            if offsets[t] + steps <= GRAMMAR.seg_len_min - 1:
                pred = oracle.predict(classes, int(seg_of[t]), int(offsets[t]), steps)
                assert pred == labels[t + steps]

    def test_oracle_beats_predict_current_baseline(self):
        rng = stream_rng(8, "grammar")
        perm = sample_derangement(6, rng)
        oracle = GrammarOracle(GRAMMAR, perm)
        classes, lengths = generate_segments(GRAMMAR, 20000, perm, rng)
        labels = labels_from_segments(classes, lengths)
        correct, total = oracle.accuracy(labels, 4)
        same = (labels[:-4] == labels[4:]).mean()
        assert correct / total > same + 0.05

    def test_landing_distribution_sums_to_one(self):
        oracle = GrammarOracle(GRAMMAR, sample_derangement(6, stream_rng(9, "grammar")))
        for offset in (0, 5, 11, 15):
            for steps in (1, 4, 16):
                dist = oracle.landing_distribution(offset, steps)
                np.testing.assert_allclose(sum(dist.values()), 1.0, atol=1e-12)


class TestWindows:
    def _video(self, rng, frames=60, dim=4):
        labels = labels_from_segments(*generate_segments(
            GRAMMAR, frames, sample_derangement(6, rng), rng))
        feats = rng.normal(size=(frames, dim)).astype(np.float32)
        return VideoData("v0", feats, labels, fps=4, num_classes=6)

    def test_anchor_zero_maximally_padded(self, rng):
        video = self._video(rng)
        samples = make_samples(video, long_len=16, short_len=4, num_future_steps=4)
        first = samples[0]
        assert first.anchor == 0
        assert first.valid.sum() == 1 and first.valid[-1]
        np.testing.assert_array_equal(first.features[:-1], 0.0)
        np.testing.assert_array_equal(first.features[-1], video.features[0])

    def test_full_anchor_no_padding(self, rng):
        video = self._video(rng)
        samples = make_samples(video, 16, 4, 4)
        full = [s for s in samples if s.anchor >= 19][0]
        assert full.valid.all()
        np.testing.assert_array_equal(
            full.features, video.features[full.anchor - 19:full.anchor + 1])

    def test_short_label_alignment_exhaustive(self, rng):
        video = self._video(rng)
        for s in make_samples(video, 16, 4, 4):
            for k in range(4):
                frame = s.anchor - 3 + k
                if frame >= 0:
                    assert s.short_labels[k] == video.labels[frame]

    def test_future_label_at_one_second(self, rng):
        video = self._video(rng)
        fps = 4
        for s in make_samples(video, 16, 4, num_future_steps=8):
            assert s.future_labels[fps * 1 - 1] == video.labels[s.anchor + fps]

    def test_future_horizon_dropped_from_training(self, rng):
        video = self._video(rng, frames=40)
        samples = make_samples(video, 16, 4, num_future_steps=8)
        assert max(s.anchor for s in samples) == 40 - 8 - 1
        kept = make_samples(video, 16, 4, 8, include_incomplete_future=True)
        assert max(s.anchor for s in kept) == 39

    def test_extract_window_matches_sample_features(self, rng):
        video = self._video(rng)
        for anchor in (0, 3, 25, 59):
            window, valid = extract_window(video.features, anchor, 20)
            n = min(anchor + 1, 20)
            assert valid.sum() == n
            np.testing.assert_array_equal(window[20 - n:],
                                          video.features[anchor + 1 - n:anchor + 1])
