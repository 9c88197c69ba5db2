"""Full model: progressive memory encoder + circular decoder + shared head.

The model owns every parameter in a named registry (used by the optimizer,
checkpoints, and gradient checking) and exposes `forward` for training and
`infer` for per-frame streaming answers.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .autodiff import Tensor, slice_rows
from .blocks import (
    AttentionExport,
    PositionalEmbedding,
    block_parameters,
    init_decoder_block,
    init_encoder_block,
)
from .circular_decoder import DecoderOutputs, FutureQueryBank, run_decoder, upsample_for_supervision
from .config import ModelConfig
from .errors import ShapeError
from .memory_encoder import compress_long_memory, enhance_short_memory, partition_memory
from .rng import stream_rng
from .training import SharedClassifier, classify, init_shared_classifier


@dataclass
class ForwardState:
    """Everything the loss needs from one window forward pass."""

    encoder_short: Tensor
    outputs: DecoderOutputs
    valid_short: np.ndarray


class MATModel:
    """Memory/anticipation model over cached feature windows."""

    def __init__(self, config: ModelConfig, dtype=np.float32, seed: Optional[int] = None):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = stream_rng(config.seed if seed is None else seed, "init")
        dim = config.embed_dim
        heads = config.num_heads

        def embed(shape):
            return Tensor(rng.normal(0.0, 0.02, size=shape).astype(self.dtype),
                          requires_grad=True)

        max_len = config.window_len + config.num_future_steps
        self.positional = PositionalEmbedding(table=embed((max_len, dim)))
        self.long_queries = embed((config.num_long_queries, dim))
        self.compress_decoder = init_decoder_block(rng, dim, heads, self.dtype)
        self.post_encoders = (init_encoder_block(rng, dim, heads, self.dtype),
                              init_encoder_block(rng, dim, heads, self.dtype))
        self.enhance_decoder = init_decoder_block(rng, dim, heads, self.dtype)
        self.future_queries = FutureQueryBank(
            latent_queries=embed((config.num_latent_queries, dim)),
            renewed_queries=embed((config.num_future_steps, dim)),
        )
        self.latent_block = init_decoder_block(rng, dim, heads, self.dtype)
        self.round_short_blocks = [init_decoder_block(rng, dim, heads, self.dtype)
                                   for _ in range(config.num_rounds)]
        self.round_future_blocks = [init_decoder_block(rng, dim, heads, self.dtype)
                                    for _ in range(config.num_rounds)]
        self.classifier: SharedClassifier = init_shared_classifier(
            rng, dim, config.num_classes, self.dtype)
        self.forward_count = 0
        self._groups = self._build_groups()
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        for names in self._groups.values():
            self._params.update(names)

    def _build_groups(self) -> "OrderedDict[str, OrderedDict[str, Tensor]]":
        groups: "OrderedDict[str, OrderedDict[str, Tensor]]" = OrderedDict()

        def put(group: str, params: dict):
            groups[group] = OrderedDict(params)

        put("input_embedding", block_parameters("positional", self.positional))
        put("long_queries", {"long_queries": self.long_queries})
        put("compress_decoder", block_parameters("compress_decoder", self.compress_decoder))
        put("post_encoder_1", block_parameters("post_encoder_1", self.post_encoders[0]))
        put("post_encoder_2", block_parameters("post_encoder_2", self.post_encoders[1]))
        put("enhance_decoder", block_parameters("enhance_decoder", self.enhance_decoder))
        put("latent_queries", {"latent_queries": self.future_queries.latent_queries})
        put("renewed_queries", {"renewed_queries": self.future_queries.renewed_queries})
        put("latent_block", block_parameters("latent_block", self.latent_block))
        for r in range(self.config.num_rounds):
            put(f"round_{r + 1}_short",
                block_parameters(f"round_{r + 1}_short", self.round_short_blocks[r]))
            put(f"round_{r + 1}_future",
                block_parameters(f"round_{r + 1}_future", self.round_future_blocks[r]))
        put("classifier", {"classifier.w": self.classifier.w, "classifier.b": self.classifier.b,
                   "classifier.gamma": self.classifier.gamma,
                   "classifier.beta": self.classifier.beta})
        return groups

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return self._params

    def parameter_groups(self) -> "OrderedDict[str, OrderedDict[str, Tensor]]":
        return self._groups

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    # -- forward passes -----------------------------------------------------

    def forward(self, features: np.ndarray, valid: Optional[np.ndarray] = None,
                train: bool = False, export: Optional[AttentionExport] = None) -> ForwardState:
        cfg = self.config
        features = np.ascontiguousarray(features, dtype=self.dtype)
        if features.shape != (cfg.window_len, cfg.embed_dim):
            raise ShapeError(
                f"window shape {features.shape} != ({cfg.window_len}, {cfg.embed_dim})")
        if valid is None:
            valid = np.ones(cfg.window_len, dtype=bool)
        self.forward_count += 1

        x = self.positional.add_to(Tensor(features))
        bank = partition_memory(x, cfg.long_len, cfg.short_len, valid)
        compressed = compress_long_memory(bank, self.long_queries, self.compress_decoder,
                                          self.post_encoders, cfg.num_segments, export=export)
        enhanced = enhance_short_memory(bank.short, compressed, self.enhance_decoder,
                                        valid_short=bank.valid_short,
                                        top_k=cfg.top_k if train else None,
                                        export=export)
        outputs = run_decoder(compressed, enhanced, self.future_queries,
                              self.latent_block, self.round_short_blocks,
                              self.round_future_blocks, cfg.num_rounds, cfg.renewal,
                              valid_short=bank.valid_short, export=export)
        return ForwardState(encoder_short=enhanced, outputs=outputs,
                            valid_short=bank.valid_short)

    def infer(self, features: np.ndarray, valid: Optional[np.ndarray] = None,
              export: Optional[AttentionExport] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Detection probabilities for the newest frame plus one probability
        row per future step, all from a single dense forward pass."""
        cfg = self.config
        state = self.forward(features, valid, train=False, export=export)
        if cfg.num_rounds > 0:
            final_short = state.outputs.short_per_round[-1]
            final_future = state.outputs.future_per_round[-1]
        else:
            final_short = state.encoder_short
            final_future = state.outputs.future_initial
        aligned = upsample_for_supervision(final_future, cfg.num_future_steps)
        last = slice_rows(final_short, cfg.short_len - 1, cfg.short_len)
        detection = classify(last, self.classifier).data[0].copy()
        future = classify(aligned, self.classifier).data.copy()
        return detection, future

    # -- checkpoint plumbing --------------------------------------------------

    def export_blobs(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data) for name, p in self._params.items())

    def load_blobs(self, blobs: dict) -> None:
        from .errors import DataFormatError

        for name, p in self._params.items():
            arr = blobs.get(name)
            if arr is None:
                raise DataFormatError(f"checkpoint missing parameter {name}")
            if tuple(arr.shape) != tuple(p.shape):
                raise DataFormatError(
                    f"parameter {name} shape {arr.shape} != expected {p.shape}")
            p.data[...] = arr.astype(self.dtype, copy=False)
