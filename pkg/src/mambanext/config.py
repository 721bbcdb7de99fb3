"""Model configuration: every architecture hyperparameter in one place.

Configs load from JSON with exhaustive unknown-key rejection -- a silently
misspelled key in an ablation sweep is the main operational hazard this
guards against. Validation errors name the offending field.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .blocks import BLOCK_MODES, BlockConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_size: int = 640
    num_classes: int = 20
    width_mult: float = 1.0
    stage_widths: tuple = (64, 128, 256, 512)
    stage_depths: tuple = (1, 2, 2, 1)
    neck_mult: float = 0.5
    neck_depth: int = 1
    d_state: int = 16
    ssm_ratio: float = 2.0
    mlp_ratio: int = 4
    conv_dim: int = 3
    convnext_kernel: int = 7
    convnext_expand: int = 4
    layer_scale: float = 1e-6
    downsample_mode: str = "conv"
    block_mode: str = "resgate_first"
    scan_chunk: int = 64
    seed: int = 0

    def __post_init__(self):
        self.stage_widths = tuple(self.stage_widths)
        self.stage_depths = tuple(self.stage_depths)
        self.validate()

    def validate(self):
        if self.input_size % 32 != 0 or self.input_size < 32:
            raise ConfigError(f"input_size: must be a positive multiple of 32, got {self.input_size}")
        if len(self.stage_widths) != 4:
            raise ConfigError(f"stage_widths: exactly 4 stages required, got {len(self.stage_widths)}")
        if any(b <= a for a, b in zip(self.stage_widths, self.stage_widths[1:])):
            raise ConfigError(f"stage_widths: must be strictly increasing, got {self.stage_widths}")
        # The merge downsampler doubles channels, which ties consecutive
        # stage widths together.
        if any(b != 2 * a for a, b in zip(self.stage_widths, self.stage_widths[1:])):
            raise ConfigError(
                f"stage_widths: each stage must double the previous one "
                f"(the merge unit outputs 2C), got {self.stage_widths}")
        if len(self.stage_depths) != 4 or any(d < 1 for d in self.stage_depths):
            raise ConfigError(f"stage_depths: need 4 positive depths, got {self.stage_depths}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes: must be >= 1, got {self.num_classes}")
        if not 0 < self.width_mult <= 4:
            raise ConfigError(f"width_mult: must be in (0, 4], got {self.width_mult}")
        if not 0 < self.neck_mult <= 2:
            raise ConfigError(f"neck_mult: must be in (0, 2], got {self.neck_mult}")
        if self.neck_depth < 1:
            raise ConfigError(f"neck_depth: must be >= 1, got {self.neck_depth}")
        if self.d_state < 1:
            raise ConfigError(f"d_state: must be >= 1, got {self.d_state}")
        if self.ssm_ratio < 1:
            raise ConfigError(f"ssm_ratio: must be >= 1, got {self.ssm_ratio}")
        if self.mlp_ratio < 1:
            raise ConfigError(f"mlp_ratio: must be >= 1, got {self.mlp_ratio}")
        if self.convnext_expand < 1:
            raise ConfigError(f"convnext_expand: must be >= 1, got {self.convnext_expand}")
        if self.conv_dim % 2 != 1:
            raise ConfigError(f"conv_dim: must be odd, got {self.conv_dim}")
        if self.convnext_kernel % 2 != 1:
            raise ConfigError(f"convnext_kernel: must be odd, got {self.convnext_kernel}")
        if self.layer_scale <= 0:
            raise ConfigError(f"layer_scale: must be positive, got {self.layer_scale}")
        if self.downsample_mode not in ("conv", "pool"):
            raise ConfigError(f"downsample_mode: must be 'conv' or 'pool', got {self.downsample_mode!r}")
        if self.block_mode not in BLOCK_MODES:
            raise ConfigError(f"block_mode: must be one of {BLOCK_MODES}, got {self.block_mode!r}")
        if self.scan_chunk < 1:
            raise ConfigError(f"scan_chunk: must be >= 1, got {self.scan_chunk}")
        if self.effective_widths()[0] < 2:
            raise ConfigError(
                f"width_mult: {self.width_mult} collapses the stem "
                f"(first stage width {self.effective_widths()[0]})")

    def effective_widths(self) -> tuple:
        # Scale the first width and re-derive the rest from the doubling
        # structure so rounding cannot break the 2x channel ladder.
        w0 = max(2, round(self.stage_widths[0] * self.width_mult))
        return tuple(w0 * (w // self.stage_widths[0]) for w in self.stage_widths)

    def neck_widths(self) -> tuple:
        # Neck levels mirror the C3/C4/C5 taps (stages 2..4).
        return tuple(max(1, round(w * self.neck_mult)) for w in self.effective_widths()[1:])

    def block_config(self, channels: int) -> BlockConfig:
        return BlockConfig(
            channels=channels, d_state=self.d_state, ssm_ratio=self.ssm_ratio,
            mlp_ratio=self.mlp_ratio, conv_dim=self.conv_dim,
            convnext_kernel=self.convnext_kernel, convnext_expand=self.convnext_expand,
            layer_scale_init=self.layer_scale, mode=self.block_mode,
            scan_chunk=self.scan_chunk)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        d["stage_depths"] = list(self.stage_depths)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError("config JSON must be an object")
        return cls.from_dict(d)

    @classmethod
    def from_file(cls, path) -> "ModelConfig":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json(f.read())
