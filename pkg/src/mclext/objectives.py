"""Training losses and evaluation metrics.

Metric functions take numpy arrays and reduce over the last (sample) axis.
The ``*_db`` variants take a :class:`Tensor` estimate and are differentiable.
"SDR" here is plain SNR (no distortion filter), reported under ``snr`` keys.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable

import numpy as np

from .errors import ConfigError, DataError
from .numerics import Tensor, as_tensor
from .numerics.tensor import make_result

_DB = 10.0 / math.log(10.0)
LOSS_KINDS = ("si_sdr", "log_mse")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "si_sdr"
    snr_max_db: float = 30.0
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")

    @property
    def tau(self) -> float:
        return 10.0 ** (-self.snr_max_db / 10.0)


def _energy(x: np.ndarray) -> np.ndarray:
    return np.sum(np.asarray(x, dtype=np.float64) ** 2, axis=-1)


def _same_length(a, b) -> None:
    if np.shape(a)[-1] != np.shape(b)[-1]:
        raise DataError(f"length mismatch: {np.shape(a)[-1]} vs {np.shape(b)[-1]}")


def si_sdr(est, ref, eps: float = 1e-8):
    """Scale-invariant SDR in dB.  ``eps`` caps a perfect estimate at ``-10 log10(eps)``."""
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    _same_length(est, ref)
    ref_e = _energy(ref)
    if np.any(ref_e == 0):
        raise DataError("SI-SDR is undefined for an all-zero target; use log_mse for negative pairs")
    alpha = np.sum(est * ref, axis=-1) / ref_e
    proj = alpha[..., None] * ref
    p_e = _energy(proj)
    err = _energy(est - proj)
    return _DB * np.log(p_e / (err + eps * p_e))


def snr(est, ref, eps: float = 1e-8):
    """Scale-dependent SNR of ``est`` against ``ref`` in dB (the SDR stand-in), capped like :func:`si_sdr`."""
    _same_length(est, ref)
    ref_e = _energy(ref)
    if np.any(ref_e == 0):
        raise DataError("SNR is undefined for an all-zero target")
    return _DB * np.log(ref_e / (_energy(np.asarray(est, dtype=np.float64) - ref) + eps * ref_e))


def log_mse(s, est, y_ref, tau: float):
    """Log-MSE loss in dB; an exactly silent target switches to the suppression branch."""
    s = np.asarray(s, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    y_ref = np.asarray(y_ref, dtype=np.float64)
    _same_length(s, est)
    _same_length(s, y_ref)
    s_e = _energy(s)
    y_e = _energy(y_ref)
    silent = s_e == 0
    if np.any(silent & (y_e == 0)):
        raise DataError("degenerate pair: both target and mixture are all-zero")
    val = np.where(silent, _energy(est) + tau * y_e, _energy(s - est) + tau * s_e)
    return _DB * np.log(val)


def energy_suppression_ratio(y_ref, est, eps: float = 1e-8):
    y_e = _energy(y_ref)
    if np.any(y_e == 0):
        raise DataError("energy suppression ratio is undefined for a silent mixture")
    return _DB * np.log(y_e / (_energy(est) + eps))


def improvement(metric_fn: Callable, est, ref, y_ref):
    """``metric_fn(est, ref) - metric_fn(y_ref, ref)``."""
    return metric_fn(est, ref) - metric_fn(y_ref, ref)


# ---------------------------------------------------------------------------
# differentiable losses (per batch item)


def si_sdr_db(est, ref: np.ndarray, eps: float = 1e-8) -> Tensor:
    """Differentiable SI-SDR of ``est [..., N]`` against a fixed reference."""
    est = as_tensor(est)
    x = est.value.astype(np.float64)
    s = np.asarray(ref, dtype=np.float64)
    _same_length(x, s)
    s_e = _energy(s)
    if np.any(s_e == 0):
        raise DataError("SI-SDR is undefined for an all-zero target; use log_mse for negative pairs")
    a = np.sum(x * s, axis=-1)
    alpha = (a / s_e)[..., None]
    resid = x - alpha * s
    p_e = a * a / s_e
    num = p_e
    den = _energy(resid) + eps * p_e
    out = _DB * (np.log(num) - np.log(den))

    def backward(g):
        g = np.asarray(g, dtype=np.float64)[..., None]
        d_num = 2 * alpha * s
        d_den = 2 * resid + eps * d_num
        return (g * _DB * (d_num / num[..., None] - d_den / den[..., None]),)

    return make_result(out.astype(est.dtype), (est,), backward)


def log_mse_db(est, s: np.ndarray, y_ref: np.ndarray, tau: float) -> Tensor:
    """Differentiable log-MSE; rows of ``s`` that are exactly zero use the silent branch."""
    est = as_tensor(est)
    x = est.value.astype(np.float64)
    s = np.asarray(s, dtype=np.float64)
    y_ref = np.asarray(y_ref, dtype=np.float64)
    _same_length(x, s)
    _same_length(x, y_ref)
    s_e = _energy(s)
    y_e = _energy(y_ref)
    silent = (s_e == 0)[..., None]
    if np.any(silent[..., 0] & (y_e == 0)):
        raise DataError("degenerate pair: both target and mixture are all-zero")
    diff = np.where(silent, x, x - s)
    val = _energy(diff) + tau * np.where(silent[..., 0], y_e, s_e)
    out = _DB * np.log(val)

    def backward(g):
        g = np.asarray(g, dtype=np.float64)[..., None]
        return (g * _DB * 2 * diff / val[..., None],)

    return make_result(out.astype(est.dtype), (est,), backward)


# ---------------------------------------------------------------------------
# report records


@dataclass
class UtteranceMetrics:
    id: str
    polarity: str
    si_sdr: float | None
    si_sdri: float | None
    snr: float | None
    snri: float | None
    esr: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)


def score_utterance(uid: str, polarity: str, est, target, y_ref, eps: float = 1e-8) -> UtteranceMetrics:
    est = np.asarray(est, dtype=np.float64)
    esr = float(energy_suppression_ratio(y_ref, est, eps))
    if polarity == "negative" or not np.any(target):
        return UtteranceMetrics(uid, polarity, None, None, None, None, esr)
    sdr_fn = lambda a, b: si_sdr(a, b, eps)  # noqa: E731
    return UtteranceMetrics(
        uid,
        polarity,
        float(si_sdr(est, target, eps)),
        float(improvement(sdr_fn, est, target, y_ref)),
        float(snr(est, target, eps)),
        float(improvement(lambda a, b: snr(a, b, eps), est, target, y_ref)),
        esr,
    )


def _mean(values: list) -> float | None:
    return float(np.mean(values)) if values else None


def summarize(records: Iterable[UtteranceMetrics]) -> dict:
    """Unweighted means; SI-SDR/SNR over positives only, ESR over negatives only."""
    records = list(records)
    pos = [r for r in records if r.polarity == "positive" and r.si_sdr is not None]
    neg = [r for r in records if r.polarity == "negative"]
    return {
        "summary": True,
        "n": len(records),
        "n_positive": len(pos),
        "n_negative": len(neg),
        "si_sdr_mean": _mean([r.si_sdr for r in pos]),
        "si_sdri_mean": _mean([r.si_sdri for r in pos]),
        "snr_mean": _mean([r.snr for r in pos]),
        "snri_mean": _mean([r.snri for r in pos]),
        "esr_mean": _mean([r.esr for r in neg]),
        "sdr_kind": "snr",
    }
