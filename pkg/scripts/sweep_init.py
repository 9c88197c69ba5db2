"""Attention-init variants: can content-gated attention emerge faster?"""

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


def patch_qk(model, mode, alpha):
    for name, p in model.parameters().items():
        if name.endswith(".w_q") or name.endswith(".w_k"):
            if mode == "std":
                p.data[...] = p.data * alpha / 0.02
            elif mode in ("identity", "id_zero"):
                p.data[...] = p.data + alpha * np.eye(p.shape[0], dtype=p.data.dtype)
        if mode in ("zero", "id_zero") and (name.endswith(".w_o") or name.endswith(".ffn.w2")):
            p.data[...] = 0.0


def run(mode, alpha, steps=800, lr=1e-3, batch=16):
    cfg = ModelConfig(mix_long_prob=0.0, mix_short_prob=0.0,
                      batch_size=batch, lr=lr).validate()
    videos = load_manifest_videos("/tmp/sweepdata/manifest.json", split="train")
    eval_videos = load_manifest_videos("/tmp/sweepdata/manifest.json", split="eval")
    pool = []
    for v in videos:
        pool.extend(make_samples(v, cfg.long_len, cfg.short_len, cfg.num_future_steps))
    model = MATModel(cfg)
    patch_qk(model, mode, alpha)
    opt = Adam(model.parameters(), lr=cfg.lr)
    t0 = time.time()
    hist = train_model(model, opt, pool, cfg, steps=steps)
    det = [0, 0]; ant = [0, 0]; seg = [0, 0]
    sa = cfg.fps
    for v in eval_videos:
        d, a = offline_video_scores(model, v, taus=[1.0])
        det[0] += int((d.argmax(axis=1) == v.labels).sum()); det[1] += v.frames
        usable = v.frames - sa
        pred = a[1.0][:usable].argmax(axis=1); truth = v.labels[sa:]
        ant[0] += int((pred == truth).sum()); ant[1] += usable
        m = in_segment_mask(v.labels, sa)
        seg[0] += int((pred[m] == truth[m]).sum()); seg[1] += int(m.sum())
    return {"mode": mode, "alpha": alpha, "steps": steps, "lr": lr,
            "minutes": round((time.time() - t0) / 60, 1),
            "final_loss": round(hist[-1]["total"], 2),
            "det": round(det[0] / det[1], 4), "ant": round(ant[0] / ant[1], 4),
            "ant_seg": round(seg[0] / seg[1], 4)}


if __name__ == "__main__":
    for combo in json.loads(sys.argv[1]):
        print(json.dumps(run(**combo)), flush=True)
