"""Run configuration: model architecture plus synthetic-data parameters.

Configs load from a JSON file of the form {"model": {...}, "data": {...}}
(both sections optional) and accept dotted `--set` overrides such as
`model.lr=0.01`. Every output artifact echoes the resolved config.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional

from .errors import ConfigError


@dataclass
class ModelConfig:
    """Architecture, loss, augmentation, and optimization settings."""

    embed_dim: int = 64
    num_heads: int = 4
    long_len: int = 64            # frames of distant memory
    short_len: int = 8            # frames of recent memory
    num_segments: int = 8         # long memory is compressed to this many tokens
    num_long_queries: int = 16    # learnable queries shared across segments
    num_latent_queries: int = 16  # sparse future queries for latent anticipation
    future_seconds: float = 4.0   # supervised anticipation horizon
    fps: int = 4
    num_rounds: int = 2           # circular interaction rounds (0 = ablation)
    renewal: int = 1              # 1: step-aligned queries replace the latent stream in round 1
    num_classes: int = 6          # foreground classes; 0 is background
    top_k: Optional[int] = None   # training-time sparse attention over compressed memory
    short_loss_weights: Optional[list] = None  # per-stage weights, default all 1
    future_loss_weight: float = 1.0
    mix_alpha: float = 0.25
    mix_long_prob: float = 0.5
    mix_short_prob: float = 0.5
    mix_short_per_token: bool = False
    lr: float = 1e-3
    steps: int = 2000
    batch_size: int = 16
    seed: int = 0

    @property
    def num_future_steps(self) -> int:
        """Aligned future tokens: one per frame over the anticipation horizon."""
        return int(round(self.future_seconds * self.fps))

    @property
    def window_len(self) -> int:
        return self.long_len + self.short_len

    @property
    def segment_len(self) -> int:
        return self.long_len // self.num_segments

    def resolved_short_weights(self) -> list:
        if self.short_loss_weights is None:
            return [1.0] * (self.num_rounds + 1)
        return [float(w) for w in self.short_loss_weights]

    def validate(self) -> "ModelConfig":
        if self.embed_dim < 1 or self.embed_dim % self.num_heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} must be a positive multiple of num_heads {self.num_heads}")
        if self.num_segments < 1:
            raise ConfigError("num_segments must be at least 1")
        if self.long_len < 1 or self.long_len % self.num_segments != 0:
            raise ConfigError(f"long_len {self.long_len} must be a positive multiple of num_segments {self.num_segments}")
        if self.short_len < 1:
            raise ConfigError("short_len must be at least 1")
        if self.num_long_queries < 1 or self.num_latent_queries < 1:
            raise ConfigError("query bank sizes must be at least 1")
        if self.fps < 1 or self.future_seconds <= 0 or self.num_future_steps < 1:
            raise ConfigError("future horizon must cover at least one frame")
        if self.num_latent_queries > self.num_future_steps:
            raise ConfigError(
                f"num_latent_queries {self.num_latent_queries} exceeds num_future_steps {self.num_future_steps}")
        if self.num_rounds < 0:
            raise ConfigError("num_rounds must be >= 0")
        if self.renewal not in (0, 1):
            raise ConfigError(f"renewal must be 0 or 1, got {self.renewal}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be at least 1")
        if self.top_k is not None and self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1 when set, got {self.top_k}")
        weights = self.resolved_short_weights()
        if len(weights) != self.num_rounds + 1 or any(w < 0 for w in weights):
            raise ConfigError(f"short_loss_weights needs {self.num_rounds + 1} nonnegative values")
        if self.future_loss_weight < 0:
            raise ConfigError("future_loss_weight must be nonnegative")
        if self.mix_alpha <= 0:
            raise ConfigError("mix_alpha must be positive")
        for name in ("mix_long_prob", "mix_short_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.lr < 0 or self.steps < 0 or self.batch_size < 1:
            raise ConfigError("lr/steps must be nonnegative and batch_size positive")
        return self


@dataclass
class DataConfig:
    """Synthetic dataset shape; class count and fps come from the model."""

    videos_train: int = 12
    videos_eval: int = 4
    frames_per_video: int = 600
    seg_len_min: int = 8
    seg_len_max: int = 16
    lag_segments: int = 3      # a segment's class is a fixed permutation of the class lag segments earlier
    noise_sigma: float = 0.5

    def validate(self) -> "DataConfig":
        if self.videos_train < 1 or self.videos_eval < 0:
            raise ConfigError("need at least one training video")
        if not 1 <= self.seg_len_min <= self.seg_len_max:
            raise ConfigError("segment length range is empty")
        if self.lag_segments < 1:
            raise ConfigError("lag_segments must be at least 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be nonnegative")
        if self.frames_per_video < self.seg_len_max:
            raise ConfigError("frames_per_video shorter than one segment")
        return self


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.data.validate()
        return self

    def to_dict(self) -> dict:
        return {"model": dataclasses.asdict(self.model), "data": dataclasses.asdict(self.data)}


def _build(cls, section: dict, name: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown {name} config keys: {sorted(unknown)}")
    return cls(**section)


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(raw) - {"model", "data"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = RunConfig(
        model=_build(ModelConfig, raw.get("model", {}), "model"),
        data=_build(DataConfig, raw.get("data", {}), "data"),
    )
    return cfg.validate()


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list) -> dict:
    """Apply `section.key=value` strings onto the raw config dict."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, text = item.split("=", 1)
        parts = dotted.split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key {dotted!r} must be section.key")
        section, key = parts
        raw.setdefault(section, {})[key] = _parse_value(text)
    return raw


def load_config(path: Optional[str], overrides: Optional[list] = None) -> RunConfig:
    """Load a config file (or defaults when path is None) plus overrides."""
    if path is None:
        raw = {}
    else:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    raw = apply_overrides(raw, overrides or [])
    return config_from_dict(raw)
