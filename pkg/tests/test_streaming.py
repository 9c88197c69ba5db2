"""Streaming engine: equivalence with offline windows, warm-up, leakage."""

import numpy as np
import pytest

from mat.data import SyntheticGrammar, VideoData, generate_segments, labels_from_segments, sample_derangement
from mat.errors import ArgumentError
from mat.model import MATModel
from mat.rng import stream_rng
from mat.streaming import (
    StreamState,
    evaluate_videos,
    offline_video_scores,
    replay_file,
    streaming_video_scores,
    tau_to_index,
)
from tests.conftest import small_config


def make_video(config, frames=64, seed=0):
    rng = stream_rng(seed, "data")
    grammar = SyntheticGrammar(num_classes=config.num_classes, seg_len_min=4,
                               seg_len_max=8, lag=1, sigma=0.4, fps=config.fps)
    perm = sample_derangement(config.num_classes, rng)
    classes, lengths = generate_segments(grammar, frames, perm, rng)
    labels = labels_from_segments(classes, lengths)
    feats = rng.normal(size=(frames, config.embed_dim)).astype(np.float32)
    return VideoData("stream_v", feats, labels, config.fps, config.num_classes)


class TestTauIndex:
    def test_one_second_at_fps4(self):
        assert tau_to_index(1.0, 4, 16) == 3

    def test_horizon_end_is_last_token(self):
        assert tau_to_index(4.0, 4, 16) == 15

    def test_smallest_gap_is_first_token(self):
        assert tau_to_index(0.25, 4, 16) == 0

    def test_out_of_horizon_names_range(self):
        with pytest.raises(ArgumentError, match=r"\[0.25, 4.0\]"):
            tau_to_index(5.0, 4, 16)
        with pytest.raises(ArgumentError):
            tau_to_index(0.0, 4, 16)

    def test_non_integral_gap_snaps_to_nearest(self):
        assert tau_to_index(0.9, 4, 16) == 3  # 3.6 frames -> index 3


class TestStreamState:
    def test_push_shapes_and_normalization(self, config):
        model = MATModel(config)
        state = StreamState(model)
        out = state.push_frame(np.zeros(config.embed_dim, np.float32), taus=[1.0])
        assert out.detection.shape == (config.num_classes + 1,)
        np.testing.assert_allclose(out.detection.sum(), 1.0, atol=1e-4)
        np.testing.assert_allclose(out.anticipation[1.0].sum(), 1.0, atol=1e-4)

    def test_reset_then_push_equals_fresh_push(self, config, rng):
        model = MATModel(config)
        frame = rng.normal(size=config.embed_dim).astype(np.float32)
        other = rng.normal(size=config.embed_dim).astype(np.float32)

        fresh = StreamState(model).push_frame(frame, taus=[1.0])
        state = StreamState(model)
        state.push_frame(other, taus=[1.0])
        state.reset()
        again = state.push_frame(frame, taus=[1.0])
        np.testing.assert_array_equal(fresh.detection, again.detection)
        np.testing.assert_array_equal(fresh.anticipation[1.0], again.anticipation[1.0])

    def test_reset_idempotent(self, config):
        model = MATModel(config)
        state = StreamState(model)
        state.push_frame(np.ones(config.embed_dim, np.float32))
        state.reset().reset()
        assert state.frames_seen == 0
        assert not state.valid.any()

    def test_single_valid_slot_after_first_push(self, config):
        model = MATModel(config)
        state = StreamState(model)
        state.push_frame(np.ones(config.embed_dim, np.float32))
        assert state.valid.sum() == 1 and state.valid[-1]

    def test_validity_monotone_until_full(self, config, rng):
        model = MATModel(config)
        state = StreamState(model)
        counts = []
        for _ in range(config.window_len + 5):
            state.push_frame(rng.normal(size=config.embed_dim).astype(np.float32))
            counts.append(int(state.valid.sum()))
        assert counts == [min(i + 1, config.window_len)
                          for i in range(config.window_len + 5)]

    def test_bad_feature_shape(self, config):
        model = MATModel(config)
        with pytest.raises(ArgumentError):
            StreamState(model).push_frame(np.zeros(3, np.float32))


class TestEquivalence:
    def test_streaming_matches_offline_windows(self, config):
        model = MATModel(config)
        video = make_video(config, frames=50)
        taus = [0.5, 1.0, 2.0]
        s_det, s_ant = streaming_video_scores(model, video, taus)
        o_det, o_ant = offline_video_scores(model, video, taus)
        np.testing.assert_allclose(s_det, o_det, atol=1e-5)
        for tau in taus:
            np.testing.assert_allclose(s_ant[tau], o_ant[tau], atol=1e-5)

    def test_no_future_leakage(self, config):
        model = MATModel(config)
        video = make_video(config, frames=40)
        full_det, _ = streaming_video_scores(model, video, taus=[])
        cut = VideoData(video.video_id, video.features[:25], video.labels[:25],
                        video.fps, video.num_classes)
        cut_det, _ = streaming_video_scores(model, cut, taus=[])
        np.testing.assert_array_equal(full_det[:25], cut_det)

    def test_single_forward_per_push(self, config):
        model = MATModel(config)
        state = StreamState(model)
        before = model.forward_count
        state.push_frame(np.zeros(config.embed_dim, np.float32), taus=[0.5, 1.0, 2.0])
        assert model.forward_count == before + 1


class TestReplay:
    def test_report_and_curves(self, config, tmp_path):
        model = MATModel(config)
        video = make_video(config, frames=48)
        report_path = str(tmp_path / "report.json")
        report = replay_file(model, video, taus=[1.0], report_path=report_path,
                             curves_dir=str(tmp_path / "curves"),
                             config_echo={"model": {"seed": config.seed}})
        assert report.frame_count == 48
        assert "1.0" in report.anticipation_accuracy
        import json

        loaded = json.load(open(report_path))
        assert loaded["frame_count"] == 48
        curves = sorted((tmp_path / "curves").iterdir())
        assert len(curves) == config.num_classes
        assert sum(1 for _ in open(curves[0])) == 49

    def test_anticipation_skips_unlabeled_tail(self, config):
        from mat.streaming import anticipation_accuracy

        scores = np.zeros((10, 3))
        scores[:, 2] = 1.0
        scores[-2:] = [1.0, 0.0, 0.0]  # garbage predictions on the unscored tail
        labels = np.full(10, 2)
        assert anticipation_accuracy(scores, labels, steps=2) == 1.0

    def test_evaluate_videos_streaming_flag_matches_offline(self, config):
        model = MATModel(config)
        videos = [make_video(config, frames=30, seed=s) for s in (0, 1)]
        off, det_off, _ = evaluate_videos(model, videos, taus=[1.0])
        on, det_on, _ = evaluate_videos(model, videos, taus=[1.0], use_streaming=True)
        np.testing.assert_allclose(det_off, det_on, atol=1e-5)
        assert off.anticipation_accuracy == on.anticipation_accuracy
