"""Calibration run for the synthetic learning check (acceptance 7).

Trains the default configuration on the default grammar and reports
held-out detection accuracy plus tau=1s anticipation accuracy, both
overall and restricted to deterministic-horizon frames.
"""

import json
import sys
import time

import numpy as np

from mat.config import DataConfig, ModelConfig
from mat.data import SyntheticGrammar, generate_synthetic, load_manifest_videos, make_samples
from mat.model import MATModel
from mat.streaming import offline_video_scores
from mat.training import Adam, train_model


def in_segment_mask(labels: np.ndarray, steps: int) -> np.ndarray:
    """Frames whose horizon stays in one segment: labels constant on [t, t+steps]."""
    t = len(labels) - steps
    out = np.ones(t, dtype=bool)
    for k in range(1, steps + 1):
        out &= labels[k:t + k] == labels[:t]
    return out


def main(steps=2000, batch=16, seed=0, out="/tmp/calib"):
    cfg = ModelConfig(seed=seed, steps=steps, batch_size=batch).validate()
    dc = DataConfig()
    grammar = SyntheticGrammar(num_classes=cfg.num_classes, seg_len_min=dc.seg_len_min,
                               seg_len_max=dc.seg_len_max, lag=dc.lag_segments,
                               sigma=dc.noise_sigma, fps=cfg.fps)
    res = generate_synthetic(grammar, dim=cfg.embed_dim,
                             split_videos={"train": dc.videos_train, "eval": dc.videos_eval},
                             frames_per_video=dc.frames_per_video, seed=seed,
                             out_dir=out, oracle_steps=[cfg.fps])
    bayes = res["report"]["splits"]["eval"]["bayes_anticipation_accuracy"][str(cfg.fps)]
    train_videos = load_manifest_videos(res["manifest"], split="train")
    eval_videos = load_manifest_videos(res["manifest"], split="eval")
    pool = []
    for v in train_videos:
        pool.extend(make_samples(v, cfg.long_len, cfg.short_len, cfg.num_future_steps, stride=1))
    model = MATModel(cfg)
    opt = Adam(model.parameters(), lr=cfg.lr)
    t0 = time.time()
    hist = train_model(model, opt, pool, cfg, steps=steps,
                       on_log=lambda row: print(f"step {row['step']} total {row['total']:.3f}",
                                                flush=True) if row["step"] % 100 == 0 else None)
    train_time = time.time() - t0

    steps_ahead = cfg.fps  # tau = 1s
    det_hits = det_total = 0
    ant_hits = ant_total = 0
    seg_hits = seg_total = 0
    for v in eval_videos:
        det, ant = offline_video_scores(model, v, taus=[1.0])
        det_hits += int((det.argmax(axis=1) == v.labels).sum())
        det_total += v.frames
        usable = v.frames - steps_ahead
        pred = ant[1.0][:usable].argmax(axis=1)
        truth = v.labels[steps_ahead:]
        ant_hits += int((pred == truth).sum())
        ant_total += usable
        mask = in_segment_mask(v.labels, steps_ahead)
        seg_hits += int((pred[mask] == truth[mask]).sum())
        seg_total += int(mask.sum())

    result = {
        "train_minutes": train_time / 60,
        "final_loss": hist[-1]["total"],
        "detection_accuracy": det_hits / det_total,
        "anticipation_overall": ant_hits / ant_total,
        "anticipation_in_segment": seg_hits / seg_total,
        "bayes_overall": bayes,
    }
    print(json.dumps(result, indent=2), flush=True)


if __name__ == "__main__":
    args = sys.argv[1:]
    main(steps=int(args[0]) if args else 2000,
         batch=int(args[1]) if len(args) > 1 else 16,
         seed=int(args[2]) if len(args) > 2 else 0,
         out=args[3] if len(args) > 3 else "/tmp/calib")
