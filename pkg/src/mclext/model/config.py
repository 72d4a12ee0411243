"""Architecture hyperparameters."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

from ..errors import ConfigError

FUSION_KINDS = ("none", "concatenation", "addition", "multiplication", "film")


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 2  # C
    embed_dim: int = 16  # D
    n_blocks: int = 2  # B
    enroll_blocks: int = 2  # blocks that still see the enrollment frames
    downsample_depth: int = 0  # G
    fusion: str = "none"
    spk_dim: int = 192  # K
    unfold_kernel: int = 1  # I
    unfold_stride: int = 1  # J
    hidden: int = 32  # H
    forget_bias: float = 3.0  # added to the recurrent forget-gate bias at init
    embed_hidden: int = 64
    embed_min_s: float = 0.5
    ref_channel: int = 0
    norm_groups: int = 1
    attention: bool = False

    def __post_init__(self):
        for name in ("channels", "embed_dim", "n_blocks", "spk_dim", "hidden", "embed_hidden", "norm_groups"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 1 <= self.enroll_blocks <= self.n_blocks:
            raise ConfigError(f"enroll_blocks must lie in [1, {self.n_blocks}], got {self.enroll_blocks}")
        if self.downsample_depth < 0:
            raise ConfigError(f"downsample_depth must be >= 0, got {self.downsample_depth}")
        if self.fusion not in FUSION_KINDS:
            raise ConfigError(f"fusion must be one of {FUSION_KINDS}, got {self.fusion!r}")
        if self.unfold_kernel != 1 or self.unfold_stride != 1:
            raise ConfigError("only unfold_kernel=1 and unfold_stride=1 are implemented")
        if self.attention:
            raise ConfigError("cross-frame attention is not implemented")
        if not 0 <= self.ref_channel < self.channels:
            raise ConfigError(f"ref_channel {self.ref_channel} outside [0, {self.channels})")
        if not math.isfinite(self.forget_bias):
            raise ConfigError(f"forget_bias must be finite, got {self.forget_bias}")
        if self.embed_dim % self.norm_groups:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by norm_groups {self.norm_groups}")

    @property
    def in_maps(self) -> int:
        return 2 * self.channels + 1

    @property
    def uses_embedding(self) -> bool:
        return self.fusion != "none"

    def fusion_sites(self) -> list[int]:
        """Block indices (1-based) whose output is fused; ``n_blocks`` also covers the post-slice case."""
        if not self.uses_embedding:
            return []
        if self.enroll_blocks == self.n_blocks:
            return [self.n_blocks]
        return list(range(self.enroll_blocks + 1, self.n_blocks + 1))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        base = PRESETS.get(name)
        if base is None:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return replace(base, **overrides)


PRESETS = {
    "desk": ModelConfig(),
    "v1": ModelConfig(embed_dim=128, n_blocks=4, enroll_blocks=4, hidden=200),
    "v2": ModelConfig(embed_dim=128, n_blocks=6, enroll_blocks=6, hidden=256),
}


def depth_from_lengths(enroll_s: float, mix_s: float) -> int:
    """Downsampler depth ``log2(floor(E / E'))`` for enrollment length E and target prompt length E'."""
    if enroll_s <= 0 or mix_s <= 0:
        raise ConfigError("lengths must be positive")
    ratio = math.floor(enroll_s / mix_s + 1e-9)
    if ratio < 1:
        return 0
    g = math.log2(ratio)
    if g != int(g):
        raise ConfigError(f"floor(E/E') = {ratio} is not a power of two")
    return int(g)
