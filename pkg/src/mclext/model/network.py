"""Forward pass of the prompted extraction network.

Public stage functions take channel-first maps ``[batch, D, T, F]`` (the batch
axis is optional).  The block stack runs channel-last, ``[batch, T, F, D]``, so
both recurrences reduce to reshapes.
"""
from __future__ import annotations

import numpy as np

from .. import dsp
from ..errors import ConfigError, DataError, ShapeError
from ..numerics import Tensor, as_tensor, ops
from .config import ModelConfig
from .params import ModelParams


def _batch(x: Tensor, rank: int) -> tuple[Tensor, bool]:
    if x.ndim == rank - 1:
        return ops.reshape(x, (1,) + x.shape), True
    if x.ndim != rank:
        raise ShapeError(f"expected rank {rank - 1} or {rank}, got shape {x.shape}")
    return x, False


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return ops.reshape(x, x.shape[1:]) if squeeze else x


def encode(features, cfg: ModelConfig, params: ModelParams) -> Tensor:
    """``[batch, 2C+1, T, F]`` features -> ``[batch, D, T, F]``."""
    x = as_tensor(features)
    if x.shape[-3] != cfg.in_maps:
        raise ConfigError(f"encoder expects {cfg.in_maps} feature maps for C={cfg.channels}, got {x.shape[-3]}")
    return ops.conv2d(x, params["encoder.w"], params["encoder.b"], padding=(1, 1))


def downsampled_frames(t_enroll: int, depth: int) -> int:
    for _ in range(depth):
        t_enroll = -(-t_enroll // 2)
    return t_enroll


def downsample_enrollment(h_enroll, depth: int, cfg: ModelConfig, params: ModelParams) -> Tensor:
    """Halve the frame axis ``depth`` times: GroupNorm -> ReLU -> 3x3 conv, stride (2, 1)."""
    x, squeeze = _batch(as_tensor(h_enroll), 4)
    if depth < 1:
        raise ConfigError(f"downsampler depth must be >= 1, got {depth}")
    if x.shape[2] < 2**depth:
        raise ConfigError(f"{x.shape[2]} enrollment frames cannot be halved {depth} times")
    for g in range(depth):
        x = ops.group_norm(x, cfg.norm_groups, params[f"down{g}.norm_g"], params[f"down{g}.norm_b"])
        x = ops.relu(x)
        # padding 1 with stride 2 yields ceil(T / 2) frames
        x = ops.conv2d(x, params[f"down{g}.w"], params[f"down{g}.b"], stride=(2, 1), padding=(1, 1))
    return _unbatch(x, squeeze)


def _recurrent_unit(z: Tensor, prefix: str, params: ModelParams, along_time: bool) -> Tensor:
    """LayerNorm -> BLSTM -> linear -> residual on channel-last ``[batch, T, F, D]``."""
    n, t, f, d = z.shape
    x = ops.layer_norm(z, params[f"{prefix}.ln_g"], params[f"{prefix}.ln_b"])
    if along_time:
        x = ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (n * f, t, d))
    else:
        x = ops.reshape(x, (n * t, f, d))
    x = ops.bidirectional_recurrence(x, params[f"{prefix}.w_ih"], params[f"{prefix}.w_hh"], params[f"{prefix}.bias"])
    x = ops.linear(x, params[f"{prefix}.proj_w"], params[f"{prefix}.proj_b"])
    if along_time:
        x = ops.transpose(ops.reshape(x, (n, f, t, d)), (0, 2, 1, 3))
    else:
        x = ops.reshape(x, (n, t, f, d))
    return ops.add(z, x)


def _block_cl(z: Tensor, index: int, params: ModelParams) -> Tensor:
    z = _recurrent_unit(z, f"block{index}.freq", params, along_time=False)
    return _recurrent_unit(z, f"block{index}.time", params, along_time=True)


def _to_cl(x: Tensor) -> Tensor:
    return ops.transpose(x, (0, 2, 3, 1))


def _to_cf(x: Tensor) -> Tensor:
    return ops.transpose(x, (0, 3, 1, 2))


def grid_block(z, index: int, params: ModelParams) -> Tensor:
    """Shape-preserving block ``[batch, D, T, F]``: a spectral unit along F, then a temporal unit along T."""
    x, squeeze = _batch(as_tensor(z), 4)
    return _unbatch(_to_cf(_block_cl(_to_cl(x), index, params)), squeeze)


def _fuse_cl(z: Tensor, v: Tensor, site: int, kind: str, params: ModelParams) -> Tensor:
    n, d = z.shape[0], z.shape[-1]
    p = f"fuse{site}"

    def project(w, b):
        return ops.reshape(ops.linear(v, params[f"{p}.{w}"], params[f"{p}.{b}"]), (n, 1, 1, d))

    if kind == "addition":
        return ops.add(z, project("w", "b"))
    if kind == "multiplication":
        return ops.mul(z, project("w", "b"))
    if kind == "film":
        return ops.add(ops.mul(z, project("gamma_w", "gamma_b")), project("beta_w", "beta_b"))
    if kind == "concatenation":
        tiled = ops.broadcast_to(project("w", "b"), z.shape)
        return ops.linear(ops.concat([z, tiled], axis=-1), params[f"{p}.out_w"], params[f"{p}.out_b"])
    raise ConfigError(f"unknown fusion kind {kind!r}")


def fuse(z, v, kind: str, site: int, params: ModelParams) -> Tensor:
    """Condition ``z [batch, D, T, F]`` on unit embeddings ``v [batch, K]``."""
    if kind == "none":
        raise ConfigError("fuse called with fusion kind 'none'")
    x, squeeze = _batch(as_tensor(z), 4)
    v = as_tensor(v)
    v = ops.reshape(v, (1, v.shape[0])) if v.ndim == 1 else v
    return _unbatch(_to_cf(_fuse_cl(_to_cl(x), v, site, kind, params)), squeeze)


def forward_blocks(u, t_mix: int, v, cfg: ModelConfig, params: ModelParams) -> Tensor:
    """Run the block stack on ``u [batch, D, T', F]`` and return the last ``t_mix`` frames.

    Blocks up to ``enroll_blocks`` see all ``T'`` frames; the rest see only the
    mixture segment, each followed by fusion when enabled.
    """
    x, squeeze = _batch(as_tensor(u), 4)
    if cfg.uses_embedding and v is None:
        raise ConfigError(f"fusion {cfg.fusion!r} needs a speaker embedding")
    if v is not None:
        v = as_tensor(v)
        v = ops.reshape(v, (1, v.shape[0])) if v.ndim == 1 else v
    t_full = x.shape[2]
    if not 1 <= t_mix <= t_full:
        raise ShapeError(f"t_mix={t_mix} incompatible with {t_full} input frames")
    z = _to_cl(x)
    for b in range(cfg.n_blocks):
        z = _block_cl(z, b, params)
        if b + 1 == cfg.enroll_blocks:
            z = ops.slice_axis(z, 1, t_full - t_mix)
        site = b + 1
        if cfg.uses_embedding and site in cfg.fusion_sites():
            z = _fuse_cl(z, v, site, cfg.fusion, params)
    assert z.shape[1] == t_mix, (z.shape, t_mix)
    return _unbatch(_to_cf(z), squeeze)


def decode(z, params: ModelParams) -> Tensor:
    """``[batch, D, T, F]`` -> ``[batch, 2, T, F]`` real and imaginary maps."""
    return ops.deconv2d(z, params["decoder.w"], params["decoder.b"], padding=(1, 1))


# ---------------------------------------------------------------------------
# speaker embedder


def log_spectrum(e: np.ndarray, stft_cfg: dsp.StftConfig) -> np.ndarray:
    return np.log1p(np.abs(dsp.stft(e, stft_cfg)))


def speaker_embedding(e, cfg: ModelConfig, params: ModelParams, stft_cfg: dsp.StftConfig = dsp.StftConfig()) -> Tensor:
    """Unit-norm ``[batch, K]`` embeddings (or ``[K]`` for a 1-D enrollment)."""
    e = np.asarray(e)
    squeeze = e.ndim == 1
    e = e[None] if squeeze else e
    min_len = int(np.ceil(cfg.embed_min_s * stft_cfg.sample_rate))
    if e.shape[-1] < min_len:
        raise DataError(f"enrollment of {e.shape[-1]} samples is shorter than {cfg.embed_min_s} s")
    feats = log_spectrum(e, stft_cfg)  # [batch, T, F]
    h = ops.relu(ops.linear(feats, params["embedder.w1"], params["embedder.b1"]))
    h = ops.relu(ops.linear(h, params["embedder.w2"], params["embedder.b2"]))
    mu = ops.mean(h, axis=1, keepdims=True)
    dev = ops.sub(h, mu)
    std = ops.sqrt(ops.add_scalar(ops.mean(ops.mul(dev, dev), axis=1), 1e-6))
    pooled = ops.concat([ops.reshape(mu, std.shape), std], axis=-1)
    out = ops.linear(pooled, params["embedder.w_out"], params["embedder.b_out"])
    norm = ops.sqrt(ops.add_scalar(ops.sum(ops.mul(out, out), axis=-1, keepdims=True), 1e-12))
    v = ops.mul(out, ops.power(norm, -1.0))
    return ops.reshape(v, v.shape[1:]) if squeeze else v


# ---------------------------------------------------------------------------
# end to end


def _rms(x: np.ndarray) -> np.ndarray:
    r = np.sqrt(np.mean(np.asarray(x, dtype=np.float64) ** 2, axis=tuple(range(1, x.ndim))))
    return np.where(r > 0, r, 1.0)


def forward(
    y,
    e,
    cfg: ModelConfig,
    params: ModelParams,
    stft_cfg: dsp.StftConfig = dsp.StftConfig(),
) -> Tensor:
    """Differentiable extraction ``y [batch, C, N]``, ``e [batch, E]`` -> ``[batch, N]``.

    Each input is scaled to unit RMS before analysis; the estimate is scaled
    back by the mixture RMS.  ``E`` must be hop-aligned.
    """
    y = np.asarray(y)
    e = np.asarray(e)
    if y.ndim != 3 or e.ndim != 2 or y.shape[0] != e.shape[0]:
        raise ShapeError(f"expected y [batch, C, N] and e [batch, E], got {y.shape} and {e.shape}")
    if y.shape[1] != cfg.channels:
        raise ConfigError(f"mixture has {y.shape[1]} channels, config expects {cfg.channels}")
    dtype = params["encoder.w"].dtype
    y_scale = _rms(y)
    y_n = (y / y_scale[:, None, None]).astype(dtype)
    e_n = (e / _rms(e)[:, None]).astype(dtype)
    n = y.shape[-1]

    hop = stft_cfg.hop_length
    if e.shape[-1] % hop:
        raise DataError(f"enrollment length {e.shape[-1]} is not a multiple of hop {hop}; trim it first")
    prompted = np.concatenate([np.broadcast_to(e_n[:, None, :], (e.shape[0], cfg.channels, e.shape[-1])), y_n], axis=-1)
    t_enroll = e.shape[-1] // hop
    t_mix = stft_cfg.n_frames(n)
    spec = dsp.stft(prompted, stft_cfg)  # [batch, C, T', F]
    feats = np.concatenate(
        [spec.real, spec.imag, np.abs(spec[:, cfg.ref_channel: cfg.ref_channel + 1])], axis=1
    ).astype(dtype)
    assert feats.shape[2] == t_enroll + t_mix

    h = encode(feats, cfg, params)
    if cfg.downsample_depth > 0:
        h_e = downsample_enrollment(ops.slice_axis(h, 2, 0, t_enroll), cfg.downsample_depth, cfg, params)
        h = ops.concat([h_e, ops.slice_axis(h, 2, t_enroll)], axis=2)
    v = speaker_embedding(e_n, cfg, params, stft_cfg) if cfg.uses_embedding else None
    z = forward_blocks(h, t_mix, v, cfg, params)
    s = decode(z, params)
    wav = dsp.waveform(s, stft_cfg, n)
    return ops.mul(wav, y_scale[:, None].astype(dtype))


def extract(y, e, cfg: ModelConfig, params: ModelParams, stft_cfg: dsp.StftConfig = dsp.StftConfig()) -> np.ndarray:
    """Inference helper: ``y [C, N]`` and ``e [E]`` (trimmed to a hop multiple) -> ``[N]``."""
    y = np.asarray(y)
    y = y[None] if y.ndim == 1 else y
    e = dsp.trim_to_hop(np.asarray(e), stft_cfg.hop_length)
    return forward(y[None], e[None], cfg, params, stft_cfg).value[0]
