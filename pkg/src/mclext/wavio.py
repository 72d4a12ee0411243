"""WAV reading and writing: 16-bit PCM or 32-bit float, mono or multi-channel.

Arrays are channel-major ``[C, N]`` floats in [-1, 1].  No resampling is ever
performed; a mismatch against an expected rate is an error.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import DataError

SUBTYPES = ("pcm16", "float32")


def read_wav(path, expected_rate: int | None = None) -> tuple[np.ndarray, int]:
    try:
        rate, data = wavfile.read(os.fspath(path))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read WAV {path}: {exc}") from exc
    if expected_rate is not None and rate != expected_rate:
        raise DataError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz (no resampling)")
    if data.dtype == np.int16:
        data = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        pass
    else:
        raise DataError(f"{path}: unsupported sample format {data.dtype}")
    data = data[:, None] if data.ndim == 1 else data
    return np.ascontiguousarray(data.T), rate


def write_wav(path, data: np.ndarray, rate: int, subtype: str = "float32") -> None:
    """Write ``[C, N]`` (or ``[N]``) samples.  The file is renamed into place atomically."""
    data = np.asarray(data)
    data = data[None] if data.ndim == 1 else data
    if subtype == "pcm16":
        out = np.clip(np.round(data * 32768.0), -32768, 32767).astype("<i2")
    elif subtype == "float32":
        out = data.astype("<f4")
    else:
        raise ValueError(f"subtype must be one of {SUBTYPES}, got {subtype!r}")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    wavfile.write(tmp, int(rate), out.T if out.shape[0] > 1 else out[0])
    os.replace(tmp, path)
