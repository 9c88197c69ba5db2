"""Transformer building blocks.

Pre-norm residual encoder/decoder blocks, multi-head attention with
optional masking and training-time top-k sparsification, learned absolute
positional embeddings, and an attention-weight export hook.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import (
    Tensor,
    add,
    fused_attention,
    gelu,
    layer_norm,
    matmul,
    slice_rows,
)
from .errors import ArgumentError

FFN_EXPANSION = 4


@dataclass
class AttentionParams:
    """Projection matrices of one multi-head attention layer."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    num_heads: int

    def __post_init__(self):
        dim = self.w_q.shape[0]
        if dim % self.num_heads != 0:
            raise ArgumentError(f"width {dim} not divisible by {self.num_heads} heads")

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[0] // self.num_heads


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class EncoderBlock:
    attn: AttentionParams
    ffn: FeedForwardParams
    ln1: LayerNormParams
    ln2: LayerNormParams


@dataclass
class DecoderBlock:
    self_attn: AttentionParams
    cross_attn: AttentionParams
    ffn: FeedForwardParams
    ln1: LayerNormParams
    ln2: LayerNormParams
    ln3: LayerNormParams


@dataclass
class PositionalEmbedding:
    """Learned absolute by-slot table added once to the memory features."""

    table: Tensor

    def add_to(self, x: Tensor, start: int = 0) -> Tensor:
        return add(x, slice_rows(self.table, start, start + x.shape[0]))


class AttentionExport:
    """Collects per-layer attention weights for CSV export."""

    def __init__(self):
        self.records = []  # (layer_name, (heads, Tq, Tk) array)

    def add(self, layer: str, weights: np.ndarray) -> None:
        self.records.append((layer, weights))

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "head", "query_index", "key_index", "weight"])
            for layer, w in self.records:
                heads, tq, tk = w.shape
                for h in range(heads):
                    for i in range(tq):
                        for j in range(tk):
                            writer.writerow([layer, h, i, j, f"{w[h, i, j]:.8e}"])


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def _weight(rng: np.random.Generator, shape, dtype, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def init_attention(rng, dim: int, num_heads: int, dtype) -> AttentionParams:
    return AttentionParams(
        w_q=_weight(rng, (dim, dim), dtype),
        w_k=_weight(rng, (dim, dim), dtype),
        w_v=_weight(rng, (dim, dim), dtype),
        w_o=_weight(rng, (dim, dim), dtype),
        num_heads=num_heads,
    )


def init_layer_norm(dim: int, dtype) -> LayerNormParams:
    return LayerNormParams(
        gamma=Tensor(np.ones(dim, dtype=dtype), requires_grad=True),
        beta=Tensor(np.zeros(dim, dtype=dtype), requires_grad=True),
    )


def init_feed_forward(rng, dim: int, dtype) -> FeedForwardParams:
    hidden = FFN_EXPANSION * dim
    return FeedForwardParams(
        w1=_weight(rng, (dim, hidden), dtype),
        b1=Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True),
        w2=_weight(rng, (hidden, dim), dtype),
        b2=Tensor(np.zeros(dim, dtype=dtype), requires_grad=True),
    )


def init_encoder_block(rng, dim: int, num_heads: int, dtype) -> EncoderBlock:
    return EncoderBlock(
        attn=init_attention(rng, dim, num_heads, dtype),
        ffn=init_feed_forward(rng, dim, dtype),
        ln1=init_layer_norm(dim, dtype),
        ln2=init_layer_norm(dim, dtype),
    )


def init_decoder_block(rng, dim: int, num_heads: int, dtype) -> DecoderBlock:
    return DecoderBlock(
        self_attn=init_attention(rng, dim, num_heads, dtype),
        cross_attn=init_attention(rng, dim, num_heads, dtype),
        ffn=init_feed_forward(rng, dim, dtype),
        ln1=init_layer_norm(dim, dtype),
        ln2=init_layer_norm(dim, dtype),
        ln3=init_layer_norm(dim, dtype),
    )


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------


def causal_mask(t: int) -> np.ndarray:
    """(t, t) boolean mask allowing key j for query i iff j <= i."""
    if t < 1:
        raise ArgumentError(f"causal_mask needs t >= 1, got {t}")
    return np.tril(np.ones((t, t), dtype=bool))


def self_attention_mask(valid: Optional[np.ndarray], t: int, causal: bool) -> Optional[np.ndarray]:
    """Self-attention mask combining causality with slot validity.

    Invalid (warm-up padding) slots are hidden as keys but keep their own
    diagonal entry so no query row ends up empty; their outputs are garbage
    by design and must stay excluded downstream.
    """
    if valid is None:
        return causal_mask(t) if causal else None
    base = causal_mask(t) if causal else np.ones((t, t), dtype=bool)
    mask = base & valid[None, :]
    np.fill_diagonal(mask, True)
    return mask


def key_validity_mask(valid: np.ndarray, num_queries: int) -> np.ndarray:
    """(Tq, Tk) mask hiding invalid memory slots from every query."""
    return np.repeat(valid[None, :], num_queries, axis=0)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def multi_head_attention(params: AttentionParams, query: Tensor, key_value: Tensor,
                         mask: Optional[np.ndarray] = None,
                         top_k: Optional[int] = None,
                         export: Optional[AttentionExport] = None,
                         layer: str = "") -> Tensor:
    """Projected multi-head attention: softmax(QK'/sqrt(dh)) V, heads merged."""
    q = matmul(query, params.w_q)
    k = matmul(key_value, params.w_k)
    v = matmul(key_value, params.w_v)
    sink = [] if export is not None else None
    attended = fused_attention(q, k, v, params.num_heads, mask=mask, top_k=top_k,
                               weights_sink=sink)
    if export is not None and sink:
        export.add(layer, sink[0])
    return matmul(attended, params.w_o)


def _ln(x: Tensor, p: LayerNormParams) -> Tensor:
    return layer_norm(x, p.gamma, p.beta)


def feed_forward(ffn: FeedForwardParams, x: Tensor) -> Tensor:
    return add(matmul(gelu(add(matmul(x, ffn.w1), ffn.b1)), ffn.w2), ffn.b2)


def encoder_block_forward(block: EncoderBlock, x: Tensor,
                          key_valid: Optional[np.ndarray] = None,
                          export: Optional[AttentionExport] = None,
                          layer: str = "encoder") -> Tensor:
    """Pre-norm self-attention encoder block; shape preserved."""
    mask = self_attention_mask(key_valid, x.shape[0], causal=False)
    normed = _ln(x, block.ln1)
    x = add(x, multi_head_attention(block.attn, normed, normed, mask=mask,
                                    export=export, layer=f"{layer}.self"))
    return add(x, feed_forward(block.ffn, _ln(x, block.ln2)))


def decoder_block_forward(block: DecoderBlock, query: Tensor, memory: Tensor,
                          query_self_mask: Optional[np.ndarray] = None,
                          memory_key_valid: Optional[np.ndarray] = None,
                          top_k: Optional[int] = None,
                          export: Optional[AttentionExport] = None,
                          layer: str = "decoder") -> Tensor:
    """Pre-norm decoder block: self-attention, cross-attention, feed-forward.

    The memory is read-only. When `memory_key_valid` marks every memory slot
    invalid (cold start), the cross-attention sub-layer is skipped and only
    the residual path remains.
    """
    normed = _ln(query, block.ln1)
    x = add(query, multi_head_attention(block.self_attn, normed, normed,
                                        mask=query_self_mask,
                                        export=export, layer=f"{layer}.self"))
    if memory_key_valid is None or memory_key_valid.any():
        mask = None
        if memory_key_valid is not None:
            mask = key_validity_mask(memory_key_valid, x.shape[0])
        x = add(x, multi_head_attention(block.cross_attn, _ln(x, block.ln2), memory,
                                        mask=mask, top_k=top_k,
                                        export=export, layer=f"{layer}.cross"))
    return add(x, feed_forward(block.ffn, _ln(x, block.ln3)))


def block_parameters(prefix: str, block) -> dict:
    """Flat name -> Tensor map for any block/param dataclass."""
    out = {}
    if isinstance(block, Tensor):
        out[prefix] = block
        return out
    if isinstance(block, AttentionParams):
        for name in ("w_q", "w_k", "w_v", "w_o"):
            out[f"{prefix}.{name}"] = getattr(block, name)
        return out
    if isinstance(block, (LayerNormParams, FeedForwardParams)):
        for fname, value in vars(block).items():
            out[f"{prefix}.{fname}"] = value
        return out
    if isinstance(block, (EncoderBlock, DecoderBlock, PositionalEmbedding)):
        for fname, value in vars(block).items():
            out.update(block_parameters(f"{prefix}.{fname}", value))
        return out
    raise ArgumentError(f"cannot enumerate parameters of {type(block).__name__}")
