"""Analytic multiply-accumulate counts.

Only convolutions, linear projections, recurrences and elementwise fusion
products are counted.  Normalizations, activations, pooling and the STFT are
excluded.
"""
from __future__ import annotations

from dataclasses import dataclass

from .. import dsp
from .config import ModelConfig
from .network import downsampled_frames


@dataclass(frozen=True)
class FlopBreakdown:
    encoder: int
    downsampler: int
    blocks: int
    fusion: int
    embedder: int
    decoder: int
    mix_seconds: float

    @property
    def total(self) -> int:
        return self.encoder + self.downsampler + self.blocks + self.fusion + self.embedder + self.decoder

    @property
    def per_second(self) -> float:
        return self.total / self.mix_seconds

    def as_dict(self) -> dict:
        return {
            "encoder": self.encoder,
            "downsampler": self.downsampler,
            "blocks": self.blocks,
            "fusion": self.fusion,
            "embedder": self.embedder,
            "decoder": self.decoder,
            "total": self.total,
            "mac_per_s": self.per_second,
        }


def block_macs_per_unit(cfg: ModelConfig) -> int:
    """MACs of one block at a single T-F position: two BLSTM units plus their projections."""
    d, h = cfg.embed_dim, cfg.hidden
    lstm = 2 * 4 * h * (d + h)  # both directions, four gates
    proj = 2 * h * d
    return 2 * (lstm + proj)


def _fusion_macs(cfg: ModelConfig, units: int) -> int:
    d, k = cfg.embed_dim, cfg.spk_dim
    per_site = {
        "concatenation": k * d + units * 2 * d * d,
        "addition": k * d,
        "multiplication": k * d + units * d,
        "film": 2 * k * d + units * d,
    }.get(cfg.fusion, 0)
    return per_site * len(cfg.fusion_sites())


def flop_breakdown(
    cfg: ModelConfig,
    stft_cfg: dsp.StftConfig = dsp.StftConfig(),
    mix_seconds: float = 4.0,
    enroll_seconds: float = 4.0,
) -> FlopBreakdown:
    f = stft_cfg.n_bins
    d = cfg.embed_dim
    t_mix = stft_cfg.n_frames(int(round(mix_seconds * stft_cfg.sample_rate)))
    t_enroll = int(round(enroll_seconds * stft_cfg.sample_rate)) // stft_cfg.hop_length
    t_ds = downsampled_frames(t_enroll, cfg.downsample_depth)
    t_prompt = t_enroll + t_mix

    down = 0
    frames = t_enroll
    for _ in range(cfg.downsample_depth):
        frames = -(-frames // 2)
        down += d * d * 9 * frames * f

    per_unit = block_macs_per_unit(cfg)
    full = cfg.enroll_blocks
    blocks = per_unit * f * ((t_ds + t_mix) * full + t_mix * (cfg.n_blocks - full))

    embedder = 0
    if cfg.uses_embedding:
        m = cfg.embed_hidden
        embedder = t_enroll * (f * m + m * m) + 2 * m * cfg.spk_dim

    return FlopBreakdown(
        encoder=cfg.in_maps * d * 9 * t_prompt * f,
        downsampler=down,
        blocks=blocks,
        fusion=_fusion_macs(cfg, t_mix * f),
        embedder=embedder,
        decoder=d * 2 * 9 * t_mix * f,
        mix_seconds=mix_seconds,
    )


def estimate_flops(
    cfg: ModelConfig,
    stft_cfg: dsp.StftConfig = dsp.StftConfig(),
    mix_seconds: float = 4.0,
    enroll_seconds: float = 4.0,
) -> float:
    """Multiply-accumulates per second of mixture."""
    return flop_breakdown(cfg, stft_cfg, mix_seconds, enroll_seconds).per_second
