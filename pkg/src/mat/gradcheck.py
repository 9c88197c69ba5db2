"""Finite-difference verification of the full model's gradients.

Builds a float64 shadow model on a tiny configuration, computes the
analytic gradient of the training loss once, then compares sampled entries
of every parameter group against central differences.
"""

from __future__ import annotations

from typing import Dict, List, Optional, Tuple

import numpy as np

from .autodiff import Tape, backward
from .config import ModelConfig
from .errors import CheckFailure
from .model import MATModel
from .rng import stream_rng
from .training import LossWeights, SupervisionTargets, compute_total_loss

FD_STEP_SHADOW = 1e-5


def tiny_config() -> ModelConfig:
    """Smallest configuration still exercising every architectural path."""
    return ModelConfig(
        embed_dim=8, num_heads=4, long_len=8, short_len=2, num_segments=2,
        num_long_queries=4, num_latent_queries=2, future_seconds=1.0, fps=4,
        num_rounds=1, renewal=1, num_classes=2, top_k=None,
        steps=0, batch_size=1, seed=0)


def run_gradcheck(config: Optional[ModelConfig] = None, seed: int = 0,
                  samples_per_tensor: int = 6, rel_tol: float = 1e-2,
                  abs_tol: float = 1e-6,
                  step: float = FD_STEP_SHADOW) -> Tuple[List[dict], bool]:
    """Check every parameter group; returns (rows, all_pass).

    Each row carries the group name, entries checked, worst relative error
    (relative to max(|analytic|, |numeric|)), and a pass flag. An entry
    passes when its absolute error is below abs_tol or its relative error
    below rel_tol.
    """
    config = (config or tiny_config()).validate()
    model = MATModel(config, dtype=np.float64)
    rng = stream_rng(seed, "check")
    features = rng.normal(0.0, 1.0, size=(config.window_len, config.embed_dim))
    valid = np.ones(config.window_len, dtype=bool)
    targets = SupervisionTargets(
        short_labels=rng.integers(0, config.num_classes + 1, size=config.short_len),
        future_labels=rng.integers(0, config.num_classes + 1, size=config.num_future_steps),
    )
    weights = LossWeights(short=config.resolved_short_weights(),
                          future=config.future_loss_weight)

    def loss_value() -> float:
        state = model.forward(features, valid, train=False)
        loss, _ = compute_total_loss(state.encoder_short, state.outputs, targets,
                                     model.classifier, weights, config.num_future_steps)
        return loss.item()

    model.zero_grad()
    with Tape():
        state = model.forward(features, valid, train=False)
        loss, _ = compute_total_loss(state.encoder_short, state.outputs, targets,
                                     model.classifier, weights, config.num_future_steps)
        backward(loss)

    rows: List[dict] = []
    all_pass = True
    for group, params in model.parameter_groups().items():
        worst_rel = 0.0
        worst_abs = 0.0
        checked = 0
        ok = True
        for name, p in params.items():
            analytic = p.grad
            if analytic is None:
                analytic = np.zeros_like(p.data)
            size = p.data.size
            pick_rng = stream_rng(seed, "check", abs(hash(name)) % (2 ** 31))
            if size <= samples_per_tensor:
                picks = np.arange(size)
            else:
                picks = pick_rng.choice(size, size=samples_per_tensor, replace=False)
            flat = p.data.reshape(-1)
            for idx in picks:
                idx = int(idx)
                orig = flat[idx]
                flat[idx] = orig + step
                fp = loss_value()
                flat[idx] = orig - step
                fm = loss_value()
                flat[idx] = orig
                numeric = (fp - fm) / (2.0 * step)
                a = float(analytic.reshape(-1)[idx])
                err = abs(a - numeric)
                denom = max(abs(a), abs(numeric), abs_tol)
                rel = err / denom
                worst_rel = max(worst_rel, rel)
                worst_abs = max(worst_abs, err)
                if err > abs_tol and rel > rel_tol:
                    ok = False
                checked += 1
        rows.append({"group": group, "checked": checked,
                     "max_rel_err": worst_rel, "max_abs_err": worst_abs, "pass": ok})
        all_pass = all_pass and ok
    return rows, all_pass


def format_gradcheck_table(rows: List[dict]) -> str:
    lines = [f"{'group':<24} {'checked':>7} {'max_rel_err':>12} {'status':>7}"]
    for row in rows:
        status = "PASS" if row["pass"] else "FAIL"
        lines.append(f"{row['group']:<24} {row['checked']:>7} {row['max_rel_err']:>12.3e} {status:>7}")
    return "\n".join(lines)


def assert_gradcheck(config: Optional[ModelConfig] = None, **kwargs) -> List[dict]:
    rows, ok = run_gradcheck(config, **kwargs)
    if not ok:
        failing = [r["group"] for r in rows if not r["pass"]]
        raise CheckFailure(f"gradient check failed for groups: {failing}")
    return rows
