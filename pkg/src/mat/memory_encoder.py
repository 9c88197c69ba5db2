"""Progressive memory encoder.

Splits the cached feature window into consecutive long/short memories,
compresses the long part segment by segment with weight-shared learnable
queries, and enhances the short part by cross-attending the compressed
summary under a causal self-attention mask.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, concat_rows, mean_rows, slice_rows
from .blocks import (
    AttentionExport,
    DecoderBlock,
    EncoderBlock,
    decoder_block_forward,
    encoder_block_forward,
    self_attention_mask,
)
from .errors import ConfigError, ShapeError


@dataclass
class MemoryBank:
    """Consecutive long/short partitions of one feature window.

    Validity masks mark warm-up padding slots (False) that must never leak
    into attention or losses.
    """

    long: Tensor
    short: Tensor
    valid_long: np.ndarray
    valid_short: np.ndarray


@dataclass
class CompressedLongMemory:
    """Fixed-length summary of the long memory.

    `segment_summaries` is the pre-encoder per-segment pooled sequence;
    `tokens` is the output of the two post encoders. `valid` flags segments
    that contained at least one real frame.
    """

    tokens: Tensor
    segment_summaries: Tensor
    valid: np.ndarray


def partition_memory(features: Tensor, long_len: int, short_len: int,
                     valid: Optional[np.ndarray] = None) -> MemoryBank:
    """Exact consecutive split of a (long_len + short_len, D) window."""
    total = features.shape[0]
    if total != long_len + short_len:
        raise ShapeError(
            f"window has {total} rows, expected long {long_len} + short {short_len}")
    if valid is None:
        valid = np.ones(total, dtype=bool)
    return MemoryBank(
        long=slice_rows(features, 0, long_len),
        short=slice_rows(features, long_len, total),
        valid_long=np.ascontiguousarray(valid[:long_len], dtype=bool),
        valid_short=np.ascontiguousarray(valid[long_len:], dtype=bool),
    )


def compress_long_memory(bank: MemoryBank, queries: Tensor,
                         shared_decoder: DecoderBlock,
                         post_encoders: Sequence[EncoderBlock],
                         num_segments: int,
                         export: Optional[AttentionExport] = None) -> CompressedLongMemory:
    """Segment-wise long-memory compression.

    Each of the `num_segments` non-overlapping segments is queried by the
    same weight-shared decoder block, mean-pooled over the query axis to a
    single vector, concatenated in temporal order, and refined by exactly
    two dense encoder blocks. Fully-padded segments are skipped: their
    summary is zero and their validity bit excludes them downstream.
    """
    if len(post_encoders) != 2:
        raise ConfigError(f"compression uses exactly two post encoders, got {len(post_encoders)}")
    long_len = bank.long.shape[0]
    dim = bank.long.shape[1]
    if long_len % num_segments != 0:
        raise ConfigError(f"long memory length {long_len} not divisible by {num_segments} segments")
    seg_len = long_len // num_segments

    summaries = []
    valid = np.zeros(num_segments, dtype=bool)
    for i in range(num_segments):
        seg_valid = bank.valid_long[i * seg_len:(i + 1) * seg_len]
        if not seg_valid.any():
            summaries.append(Tensor(np.zeros((1, dim), dtype=bank.long.dtype)))
            continue
        segment = slice_rows(bank.long, i * seg_len, (i + 1) * seg_len)
        queried = decoder_block_forward(
            shared_decoder, queries, segment,
            memory_key_valid=seg_valid,
            export=export, layer=f"compress.segment_{i}")
        summaries.append(mean_rows(queried))
        valid[i] = True

    pre_encoder = concat_rows(summaries)
    if not valid.any():
        return CompressedLongMemory(tokens=pre_encoder, segment_summaries=pre_encoder, valid=valid)
    tokens = pre_encoder
    for j, enc in enumerate(post_encoders):
        tokens = encoder_block_forward(enc, tokens, key_valid=valid,
                                       export=export, layer=f"compress.encoder_{j}")
    return CompressedLongMemory(tokens=tokens, segment_summaries=pre_encoder, valid=valid)


def enhance_short_memory(short: Tensor, compressed: CompressedLongMemory,
                         causal_decoder: DecoderBlock,
                         valid_short: Optional[np.ndarray] = None,
                         top_k: Optional[int] = None,
                         export: Optional[AttentionExport] = None) -> Tensor:
    """Causal short-memory refinement over the compressed long summary.

    Position t sees short slots <= t plus every valid compressed token (all
    of which are historical). Output length equals the short length.
    """
    t = short.shape[0]
    if valid_short is None:
        valid_short = np.ones(t, dtype=bool)
    self_mask = self_attention_mask(valid_short, t, causal=True)
    return decoder_block_forward(
        causal_decoder, short, compressed.tokens,
        query_self_mask=self_mask,
        memory_key_valid=compressed.valid,
        top_k=top_k,
        export=export, layer="enhance")
