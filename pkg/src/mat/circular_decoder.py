"""Memory-anticipation circular decoder.

Generates latent future tokens from the entire memory, optionally renews
them with a step-aligned query bank, then alternates cross-attention
updates between the short memory and the anticipation stream for a fixed
number of rounds, collecting every supervised intermediate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .autodiff import Tensor, concat_rows, interpolate_linear_1d
from .blocks import AttentionExport, DecoderBlock, decoder_block_forward, self_attention_mask
from .errors import ConfigError, ShapeError
from .memory_encoder import CompressedLongMemory


@dataclass
class FutureQueryBank:
    """Learnable future queries.

    `latent_queries` is the sparse set used to generate the initial
    anticipation; `renewed_queries` aligns one token per future frame and
    replaces the anticipation stream in round 1 when renewal is on.
    """

    latent_queries: Tensor
    renewed_queries: Tensor

    def __post_init__(self):
        if self.latent_queries.shape[0] > self.renewed_queries.shape[0]:
            raise ConfigError(
                f"latent bank ({self.latent_queries.shape[0]}) larger than "
                f"renewed bank ({self.renewed_queries.shape[0]})")


@dataclass
class DecoderOutputs:
    """Every supervised intermediate of one decoder pass."""

    short_per_round: List[Tensor]
    future_initial: Tensor
    future_per_round: List[Tensor]


def generate_latent_anticipation(compressed: CompressedLongMemory, enhanced: Tensor,
                                 queries: Tensor, block: DecoderBlock,
                                 valid_short: Optional[np.ndarray] = None,
                                 export: Optional[AttentionExport] = None) -> Tensor:
    """Query the concatenated (compressed long, enhanced short) memory."""
    if valid_short is None:
        valid_short = np.ones(enhanced.shape[0], dtype=bool)
    memory = concat_rows([compressed.tokens, enhanced])
    memory_valid = np.concatenate([compressed.valid, valid_short])
    return decoder_block_forward(block, queries, memory,
                                 memory_key_valid=memory_valid,
                                 export=export, layer="latent_future")


def interaction_round(compressed: CompressedLongMemory, short: Tensor, future: Tensor,
                      block_s: DecoderBlock, block_f: DecoderBlock,
                      valid_short: Optional[np.ndarray] = None,
                      export: Optional[AttentionExport] = None,
                      layer: str = "round"):
    """One circular interaction.

    The short stream queries (long, short, future); the future stream then
    queries (long, updated short, future) — the short update is visible to
    the future query within the round, while the future span of its memory
    stays pre-update.
    """
    m_s = short.shape[0]
    n_f = future.shape[0]
    if valid_short is None:
        valid_short = np.ones(m_s, dtype=bool)
    future_valid = np.ones(n_f, dtype=bool)

    entire = concat_rows([compressed.tokens, short, future])
    entire_valid = np.concatenate([compressed.valid, valid_short, future_valid])
    new_short = decoder_block_forward(
        block_s, short, entire,
        query_self_mask=self_attention_mask(valid_short, m_s, causal=True),
        memory_key_valid=entire_valid,
        export=export, layer=f"{layer}.short")

    entire_updated = concat_rows([compressed.tokens, new_short, future])
    new_future = decoder_block_forward(
        block_f, future, entire_updated,
        memory_key_valid=entire_valid,
        export=export, layer=f"{layer}.future")
    return new_short, new_future


def run_decoder(compressed: CompressedLongMemory, enhanced: Tensor,
                queries: FutureQueryBank,
                latent_block: DecoderBlock,
                round_short_blocks: Sequence[DecoderBlock],
                round_future_blocks: Sequence[DecoderBlock],
                num_rounds: int, renewal: int,
                valid_short: Optional[np.ndarray] = None,
                export: Optional[AttentionExport] = None) -> DecoderOutputs:
    """Full decoder pass: latent generation, renewal, then the round loop.

    Each round's outputs become the next round's inputs. With renewal on,
    the step-aligned query bank replaces the latent stream entering round 1
    (the latent output keeps its own supervision either way).
    """
    if renewal not in (0, 1):
        raise ConfigError(f"renewal must be 0 or 1, got {renewal}")
    if num_rounds < 0:
        raise ConfigError(f"num_rounds must be >= 0, got {num_rounds}")
    if len(round_short_blocks) != num_rounds or len(round_future_blocks) != num_rounds:
        raise ConfigError(
            f"need {num_rounds} short and future round blocks, got "
            f"{len(round_short_blocks)}/{len(round_future_blocks)}")

    latent = generate_latent_anticipation(compressed, enhanced, queries.latent_queries,
                                          latent_block, valid_short=valid_short, export=export)
    stream_short = enhanced
    stream_future = queries.renewed_queries if renewal == 1 else latent
    shorts: List[Tensor] = []
    futures: List[Tensor] = []
    for r in range(num_rounds):
        stream_short, stream_future = interaction_round(
            compressed, stream_short, stream_future,
            round_short_blocks[r], round_future_blocks[r],
            valid_short=valid_short, export=export, layer=f"round_{r + 1}")
        shorts.append(stream_short)
        futures.append(stream_future)
    return DecoderOutputs(short_per_round=shorts, future_initial=latent,
                          future_per_round=futures)


def upsample_for_supervision(anticipation: Tensor, steps: int) -> Tensor:
    """Align anticipation tokens to one per future frame; identity if already aligned."""
    if anticipation.shape[0] > steps:
        raise ShapeError(
            f"cannot align {anticipation.shape[0]} tokens down to {steps} steps")
    return interpolate_linear_1d(anticipation, steps)
