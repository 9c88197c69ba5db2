"""Hyperparameter sweep for the synthetic learning check."""

import itertools
import json
import sys
import time

import numpy as np

from mat.config import DataConfig, ModelConfig
from mat.data import generate_synthetic, load_manifest_videos, make_samples, SyntheticGrammar
from mat.model import MATModel
from mat.streaming import offline_video_scores
from mat.training import Adam, train_model

sys.path.insert(0, "scripts")
from calibrate_learning import in_segment_mask  # noqa: E402


def run(lr, batch, mix, steps=2000, seed=0, fw=1.0):
    cfg = ModelConfig(seed=seed, steps=steps, batch_size=batch, lr=lr,
                      mix_long_prob=mix, mix_short_prob=mix,
                      future_loss_weight=fw).validate()
    dc = DataConfig()
    grammar = SyntheticGrammar(num_classes=cfg.num_classes, seg_len_min=dc.seg_len_min,
                               seg_len_max=dc.seg_len_max, lag=dc.lag_segments,
                               sigma=dc.noise_sigma, fps=cfg.fps)
    res = generate_synthetic(grammar, dim=cfg.embed_dim,
                             split_videos={"train": dc.videos_train, "eval": dc.videos_eval},
                             frames_per_video=dc.frames_per_video, seed=0,
                             out_dir="/tmp/sweepdata", oracle_steps=[cfg.fps])
    train_videos = load_manifest_videos(res["manifest"], split="train")
    eval_videos = load_manifest_videos(res["manifest"], split="eval")
    pool = []
    for v in train_videos:
        pool.extend(make_samples(v, cfg.long_len, cfg.short_len, cfg.num_future_steps, stride=1))
    model = MATModel(cfg)
    opt = Adam(model.parameters(), lr=cfg.lr)
    t0 = time.time()
    hist = train_model(model, opt, pool, cfg, steps=steps)
    mins = (time.time() - t0) / 60
    sa = cfg.fps
    det = [0, 0]
    ant = [0, 0]
    seg = [0, 0]
    for v in eval_videos:
        d, a = offline_video_scores(model, v, taus=[1.0])
        det[0] += int((d.argmax(axis=1) == v.labels).sum()); det[1] += v.frames
        usable = v.frames - sa
        pred = a[1.0][:usable].argmax(axis=1); truth = v.labels[sa:]
        ant[0] += int((pred == truth).sum()); ant[1] += usable
        m = in_segment_mask(v.labels, sa)
        seg[0] += int((pred[m] == truth[m]).sum()); seg[1] += int(m.sum())
    return {"lr": lr, "batch": batch, "mix": mix, "fw": fw, "steps": steps,
            "minutes": round(mins, 1), "final_loss": round(hist[-1]["total"], 2),
            "det": round(det[0] / det[1], 4), "ant": round(ant[0] / ant[1], 4),
            "ant_seg": round(seg[0] / seg[1], 4)}


if __name__ == "__main__":
    grid = json.loads(sys.argv[1])
    for combo in grid:
        print(json.dumps(run(**combo)), flush=True)
