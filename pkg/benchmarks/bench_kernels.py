"""Benchmark the compiled kernel core against the numpy fallback.

Runs the fused attention forward/backward, layer norm, and row softmax on
shapes matching real configurations, reports per-call times for every
importable backend plus their maximum output disagreement, and ends with a
whole-model comparison when both backends are available.

    python3 benchmarks/bench_kernels.py [--repeats 200]
"""

import argparse
import os
import time

import numpy as np

from mat.kernels import available_backends


def timeit(fn, repeats):
    fn()  # warm-up
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats * 1e6  # microseconds


def bench_case(backends, label, make_calls, repeats):
    outputs = {}
    times = {}
    for name, mod in backends.items():
        call, collect = make_calls(mod)
        times[name] = timeit(call, repeats)
        outputs[name] = collect()
    line = f"{label:<34}"
    for name in backends:
        line += f" {name}: {times[name]:9.1f} us"
    if len(outputs) == 2:
        pair = list(outputs.values())
        diff = max(np.abs(a - b).max() for a, b in zip(*pair))
        line += f"   max|diff| {diff:.2e}"
    print(line)


def attention_case(tq, tk, d, heads, top_k, dtype, rng):
    q = rng.normal(size=(tq, d)).astype(dtype)
    k = rng.normal(size=(tk, d)).astype(dtype)
    v = rng.normal(size=(tk, d)).astype(dtype)
    g = rng.normal(size=(tq, d)).astype(dtype)
    mask = np.ones((tq, tk), dtype=bool)
    scale = 1.0 / np.sqrt(d // heads)

    def make(mod):
        state = {}

        def call():
            out, w = mod.sdpa_forward(q, k, v, heads, scale, mask, top_k)
            state["res"] = (out, w) + mod.sdpa_backward(q, k, v, heads, scale, w, g)

        return call, lambda: state["res"]

    return make


def layer_norm_case(t, d, dtype, rng):
    x = rng.normal(size=(t, d)).astype(dtype)
    gamma = rng.normal(size=d).astype(dtype)
    beta = rng.normal(size=d).astype(dtype)
    dy = rng.normal(size=(t, d)).astype(dtype)

    def make(mod):
        state = {}

        def call():
            y, mean, rstd = mod.layer_norm_forward(x, gamma, beta, 1e-5)
            state["res"] = (y,) + mod.layer_norm_backward(x, gamma, mean, rstd, dy)

        return call, lambda: state["res"]

    return make


def softmax_case(r, n, dtype, rng):
    x = rng.normal(size=(r, n)).astype(dtype)
    mask = np.ones((r, n), dtype=bool)
    dy = rng.normal(size=(r, n)).astype(dtype)

    def make(mod):
        state = {}

        def call():
            y = mod.softmax_rows_forward(x, mask)
            state["res"] = (y, mod.softmax_rows_backward(y, dy))

        return call, lambda: state["res"]

    return make


def bench_model(repeats):
    """Full forward+backward per backend (separate processes not needed:
    re-select via the MAT_KERNELS-independent module table)."""
    from mat import kernels
    from mat.autodiff import Tape, backward
    from mat.config import ModelConfig
    from mat.model import MATModel
    from mat.training import LossWeights, SupervisionTargets, compute_total_loss

    cfg = ModelConfig(mix_long_prob=0.0, mix_short_prob=0.0).validate()
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(cfg.window_len, cfg.embed_dim)).astype(np.float32)
    targets = SupervisionTargets(
        short_labels=rng.integers(0, cfg.num_classes + 1, cfg.short_len),
        future_labels=rng.integers(0, cfg.num_classes + 1, cfg.num_future_steps))
    weights = LossWeights(cfg.resolved_short_weights(), cfg.future_loss_weight)
    model = MATModel(cfg)

    def step():
        model.zero_grad()
        with Tape():
            state = model.forward(feats, train=True)
            loss, _ = compute_total_loss(state.encoder_short, state.outputs, targets,
                                         model.classifier, weights, cfg.num_future_steps)
            backward(loss)

    saved = kernels._impl
    try:
        for name, mod in available_backends().items():
            kernels._impl = mod
            t = timeit(step, max(repeats // 10, 5))
            print(f"{'full model fwd+bwd':<34} {name}: {t / 1000:9.2f} ms")
    finally:
        kernels._impl = saved


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=200)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    backends = available_backends()
    print(f"backends available: {', '.join(backends)}")
    print(f"MAT_KERNELS={os.environ.get('MAT_KERNELS', 'auto')}\n")
    for dtype in (np.float32, np.float64):
        tag = np.dtype(dtype).name
        bench_case(backends, f"attention 8x16 d64 h4 {tag}",
                   attention_case(8, 16, 64, 4, 0, dtype, rng), args.repeats)
        bench_case(backends, f"attention 16x88 d64 h4 {tag}",
                   attention_case(16, 88, 64, 4, 0, dtype, rng), args.repeats)
        bench_case(backends, f"attention 8x64 d64 h4 top8 {tag}",
                   attention_case(8, 64, 64, 4, 8, dtype, rng), args.repeats)
        bench_case(backends, f"layer_norm 72x64 {tag}",
                   layer_norm_case(72, 64, dtype, rng), args.repeats)
        bench_case(backends, f"softmax 64x64 {tag}",
                   softmax_case(64, 64, dtype, rng), args.repeats)
    print()
    bench_model(args.repeats)


if __name__ == "__main__":
    main()
