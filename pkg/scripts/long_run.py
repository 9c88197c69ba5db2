"""Full-length training with periodic eval to see the accuracy time-course."""

import json
import sys
import time

import numpy as np

from mat.config import ModelConfig
from mat.data import load_manifest_videos, make_samples
from mat.model import MATModel
from mat.streaming import offline_video_scores
from mat.training import Adam, train_model

sys.path.insert(0, "scripts")
from calibrate_learning import in_segment_mask  # noqa: E402


def evaluate(model, eval_videos, fps):
    det = [0, 0]; ant = [0, 0]; seg = [0, 0]
    for v in eval_videos:
        d, a = offline_video_scores(model, v, taus=[1.0])
        det[0] += int((d.argmax(axis=1) == v.labels).sum()); det[1] += v.frames
        usable = v.frames - fps
        pred = a[1.0][:usable].argmax(axis=1); truth = v.labels[fps:]
        ant[0] += int((pred == truth).sum()); ant[1] += usable
        m = in_segment_mask(v.labels, fps)
        seg[0] += int((pred[m] == truth[m]).sum()); seg[1] += int(m.sum())
    return det[0] / det[1], ant[0] / ant[1], seg[0] / seg[1]


def main(lr=1e-3, batch=16, steps=2000, every=400, seed=0):
    cfg = ModelConfig(seed=seed, steps=steps, batch_size=batch, lr=lr,
                      mix_long_prob=0.0, mix_short_prob=0.0).validate()
    videos = load_manifest_videos("/tmp/sweepdata/manifest.json", split="train")
    eval_videos = load_manifest_videos("/tmp/sweepdata/manifest.json", split="eval")
    pool = []
    for v in videos:
        pool.extend(make_samples(v, cfg.long_len, cfg.short_len, cfg.num_future_steps))
    model = MATModel(cfg)
    opt = Adam(model.parameters(), lr=cfg.lr)
    t0 = time.time()
    for chunk_start in range(0, steps, every):
        chunk_end = min(chunk_start + every, steps)
        train_model(model, opt, pool, cfg, start_step=chunk_start, steps=chunk_end)
        det, ant, seg = evaluate(model, eval_videos, cfg.fps)
        print(json.dumps({"step": chunk_end, "det": round(det, 4),
                          "ant": round(ant, 4), "ant_seg": round(seg, 4),
                          "minutes": round((time.time() - t0) / 60, 1)}), flush=True)


if __name__ == "__main__":
    args = [float(a) for a in sys.argv[1:]]
    main(lr=args[0] if args else 1e-3,
         batch=int(args[1]) if len(args) > 1 else 16,
         steps=int(args[2]) if len(args) > 2 else 2000)
