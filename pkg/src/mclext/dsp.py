"""STFT/iSTFT with square-root Hann windows, RI+Mag features and enrollment prompting.

Framing convention: the signal is padded reflectively by ``win - hop``
samples at the start (and, when the length is not a hop multiple, at the end)
so that a signal of ``N`` samples yields exactly ``ceil(N / hop)`` frames.
Frame ``t`` covers samples ``[hop*(t-1), hop*(t+1))`` of the original signal
for the default 50 % overlap.  A prompt of ``E`` hop-aligned samples therefore
occupies exactly ``E / hop`` frames; the frame straddling the seam belongs to
the mixture.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .numerics import Tensor, as_tensor
from .numerics.tensor import make_result


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 8000
    window_ms: float = 16.0
    hop_ms: float = 8.0

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        win, hop = self.win_length, self.hop_length
        if hop < 1 or win < 2 or win % 2:
            raise ConfigError(f"window {win} / hop {hop} samples: need even window and hop >= 1")
        if win % hop or (win // hop) % 2:
            raise ConfigError(f"window {win} must be an even multiple of hop {hop} for COLA")

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def fft_size(self) -> int:
        return self.win_length

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def pad_start(self) -> int:
        return self.win_length - self.hop_length

    def n_frames(self, n_samples: int) -> int:
        return -(-n_samples // self.hop_length)

    @property
    def window(self) -> np.ndarray:
        return _sqrt_hann(self.win_length, self.hop_length)


@lru_cache(maxsize=16)
def _sqrt_hann(win: int, hop: int) -> np.ndarray:
    hann = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(win) / win)
    # scaled so analysis * synthesis windows overlap-add to one for any hop dividing win/2
    w = np.sqrt(hann * 2.0 * hop / win)
    w.setflags(write=False)
    return w


def _reflect_index(n_samples: int, cfg: StftConfig) -> np.ndarray:
    n_frames = cfg.n_frames(n_samples)
    total = (n_frames - 1) * cfg.hop_length + cfg.win_length
    idx = np.arange(total) - cfg.pad_start
    idx = np.abs(idx)
    over = idx >= n_samples
    idx[over] = 2 * (n_samples - 1) - idx[over]
    return idx


def _frame_positions(n_frames: int, cfg: StftConfig) -> np.ndarray:
    return np.arange(n_frames)[:, None] * cfg.hop_length + np.arange(cfg.win_length)[None, :]


def _overlap_add(frames: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Sum ``[..., T, win]`` frames at hop spacing into a ``[..., (T-1)*hop + win]`` buffer."""
    hop, win = cfg.hop_length, cfg.win_length
    n_frames = frames.shape[-2]
    r = win // hop
    lead = frames.shape[:-2]
    buf = np.zeros(lead + (n_frames + r - 1, hop), dtype=frames.dtype)
    blocks = frames.reshape(lead + (n_frames, r, hop))
    for k in range(r):
        buf[..., k: k + n_frames, :] += blocks[..., :, k, :]
    return buf.reshape(lead + ((n_frames + r - 1) * hop,))


def _check_length(n_samples: int, cfg: StftConfig) -> None:
    if n_samples < cfg.win_length:
        raise DataError(f"signal of {n_samples} samples is shorter than one window ({cfg.win_length})")


def stft(x: np.ndarray, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Complex one-sided STFT, ``[..., N] -> [..., T, F]``."""
    x = np.asarray(x)
    _check_length(x.shape[-1], cfg)
    idx = _reflect_index(x.shape[-1], cfg)
    pos = _frame_positions(cfg.n_frames(x.shape[-1]), cfg)
    frames = x[..., idx[pos]] * cfg.window.astype(x.dtype, copy=False)
    spec = np.fft.rfft(frames, n=cfg.fft_size, axis=-1)
    return spec.astype(np.complex64) if x.dtype == np.float32 else spec


def istft(spec: np.ndarray, cfg: StftConfig = StftConfig(), length: int | None = None) -> np.ndarray:
    """Overlap-add inverse of :func:`stft`, trimmed or zero-padded to ``length``."""
    spec = np.asarray(spec)
    if spec.shape[-1] != cfg.n_bins:
        raise ShapeError(f"spectrogram has {spec.shape[-1]} bins, config expects {cfg.n_bins}")
    n_frames = spec.shape[-2]
    length = n_frames * cfg.hop_length if length is None else length
    real_dtype = np.float32 if spec.dtype == np.complex64 else np.float64
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=-1).astype(real_dtype, copy=False)
    buf = _overlap_add(frames * cfg.window.astype(real_dtype, copy=False), cfg)
    return _fit(buf[..., cfg.pad_start:], length)


def _fit(x: np.ndarray, length: int) -> np.ndarray:
    if x.shape[-1] >= length:
        return np.ascontiguousarray(x[..., :length])
    pad = [(0, 0)] * (x.ndim - 1) + [(0, length - x.shape[-1])]
    return np.pad(x, pad)


def _bin_weights(cfg: StftConfig, dtype) -> np.ndarray:
    c = np.full(cfg.n_bins, 2.0, dtype=dtype)
    c[0] = 1.0
    c[-1] = 1.0
    return c


# ---------------------------------------------------------------------------
# differentiable wrappers over real tensors


def spectrogram(x, cfg: StftConfig = StftConfig()) -> Tensor:
    """Differentiable STFT: ``[..., N]`` waveform -> ``[..., 2, T, F]`` (real, imaginary)."""
    x = as_tensor(x)
    n = x.shape[-1]
    spec = stft(x.value, cfg)
    out = np.stack([spec.real, spec.imag], axis=-3).astype(x.dtype)
    idx = _reflect_index(n, cfg)
    win = cfg.window.astype(x.dtype)
    ps = cfg.pad_start

    def backward(g):
        gc = g[..., 0, :, :] + 1j * g[..., 1, :, :]
        # adjoint of the one-sided DFT of a real frame
        half = np.ones(cfg.n_bins)
        half[1:-1] = 0.5
        frames = cfg.fft_size * np.fft.irfft(gc * half, n=cfg.fft_size, axis=-1)
        buf = _overlap_add(frames * win, cfg)
        gx = np.zeros(x.shape, dtype=np.float64)
        main = slice(ps, ps + n)
        gx += buf[..., main]
        gx[..., idx[:ps]] += buf[..., :ps]
        if buf.shape[-1] > ps + n:
            gx[..., idx[ps + n:]] += buf[..., ps + n:]
        return (gx,)

    return make_result(out, (x,), backward)


def waveform(spec, cfg: StftConfig = StftConfig(), length: int | None = None) -> Tensor:
    """Differentiable iSTFT: ``[..., 2, T, F]`` -> ``[..., length]``."""
    spec = as_tensor(spec)
    if spec.shape[-3] != 2:
        raise ShapeError(f"expected a real/imaginary axis of size 2 at -3, got {spec.shape}")
    n_frames = spec.shape[-2]
    length = n_frames * cfg.hop_length if length is None else length
    cplx = spec.value[..., 0, :, :] + 1j * spec.value[..., 1, :, :]
    out = istft(cplx, cfg, length).astype(spec.dtype)
    win = cfg.window.astype(spec.dtype)
    weights = _bin_weights(cfg, np.float64) / cfg.fft_size

    def backward(g):
        total = (n_frames - 1) * cfg.hop_length + cfg.win_length
        buf = np.zeros(g.shape[:-1] + (total,), dtype=g.dtype)
        keep = min(length, total - cfg.pad_start)
        buf[..., cfg.pad_start: cfg.pad_start + keep] = g[..., :keep]
        frames = buf[..., _frame_positions(n_frames, cfg)] * win
        gspec = np.fft.rfft(frames, n=cfg.fft_size, axis=-1) * weights
        return (np.stack([gspec.real, gspec.imag], axis=-3),)

    return make_result(out, (spec,), backward)


def magnitude(re, im) -> Tensor:
    """Elementwise ``sqrt(re^2 + im^2)``; the gradient is taken as zero where the magnitude vanishes."""
    re, im = as_tensor(re), as_tensor(im)
    mag = np.hypot(re.value, im.value)
    safe = np.where(mag > 0, mag, 1.0)

    def backward(g):
        scale = np.where(mag > 0, g / safe, 0.0)
        return scale * re.value, scale * im.value

    return make_result(mag, (re, im), backward)


def stack_ri_mag(spec, ref_channel: int = 0) -> np.ndarray | Tensor:
    """Feature maps ``[Re(ch 0..C-1), Im(ch 0..C-1), |X[ref]|]``.

    Accepts a complex ``[C, T, F]`` array (returns ``[2C+1, T, F]`` floats) or a
    real tensor ``[..., C, 2, T, F]`` from :func:`spectrogram` (returns a
    tensor ``[..., 2C+1, T, F]``).
    """
    from .numerics import ops

    if isinstance(spec, np.ndarray) and np.iscomplexobj(spec):
        c = spec.shape[-3]
        if not 0 <= ref_channel < c:
            raise IndexError(f"ref_channel {ref_channel} outside [0, {c})")
        return np.concatenate([spec.real, spec.imag, np.abs(spec[..., ref_channel: ref_channel + 1, :, :])], axis=-3)
    spec = as_tensor(spec)
    c = spec.shape[-4]
    if not 0 <= ref_channel < c:
        raise IndexError(f"ref_channel {ref_channel} outside [0, {c})")
    nd = spec.ndim
    # [..., C, 2, T, F] -> [..., 2, C, T, F] -> [..., 2C, T, F]
    axes = list(range(nd - 4)) + [nd - 3, nd - 4, nd - 2, nd - 1]
    ri = ops.transpose(spec, axes)
    ri = ops.reshape(ri, ri.shape[:-4] + (2 * c,) + ri.shape[-2:])
    re = ops.slice_axis(ri, nd - 4, ref_channel, ref_channel + 1)
    im = ops.slice_axis(ri, nd - 4, c + ref_channel, c + ref_channel + 1)
    return ops.concat([ri, magnitude(re, im)], axis=nd - 4)


# ---------------------------------------------------------------------------
# enrollment prompting


@dataclass
class PromptedMixture:
    enrollment: np.ndarray  # [E]
    mixture: np.ndarray  # [C, N]
    prompted: np.ndarray  # [C, E + N]
    t_enroll: int
    t_mix: int

    @property
    def n_frames(self) -> int:
        return self.t_enroll + self.t_mix


def trim_to_hop(e: np.ndarray, hop: int) -> np.ndarray:
    """Drop trailing samples so the length is a hop multiple."""
    n = (e.shape[-1] // hop) * hop
    if n == 0:
        raise DataError(f"enrollment of {e.shape[-1]} samples is shorter than one hop ({hop})")
    return e[..., :n]


def prepend_enrollment(e: np.ndarray, y: np.ndarray, cfg: StftConfig = StftConfig()) -> PromptedMixture:
    """Lead every mixture channel with the same copy of the enrollment."""
    e = np.asarray(e)
    y = np.asarray(y)
    if y.ndim == 1:
        y = y[None]
    if e.ndim != 1:
        raise ShapeError(f"enrollment must be mono [E], got {e.shape}")
    if e.size == 0 or y.shape[-1] == 0:
        raise DataError("enrollment and mixture must be non-empty")
    hop = cfg.hop_length
    if e.size % hop:
        raise DataError(f"enrollment length {e.size} is not a multiple of hop {hop}; trim it first")
    prompted = np.concatenate([np.broadcast_to(e, (y.shape[0], e.size)), y], axis=-1)
    return PromptedMixture(e, y, prompted, e.size // hop, cfg.n_frames(y.shape[-1]))
