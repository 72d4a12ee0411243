"""Deterministic synthetic scenes and training-pair corpora.

Sources are harmonic, speech-like signals whose pitch and resonance
envelope are fixed per speaker id.  Scenes place sources around a uniform
linear array, apply fractional inter-microphone delays and optional sparse
reverberation, add noise at a drawn SNR and rescale for headroom.
"""
from __future__ import annotations

import json
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.signal import fftconvolve

from .errors import ConfigError, DataError
from .wavio import read_wav, write_wav

POLARITIES = ("positive", "negative")
SPLITS = ("train", "val", "test")
# speaker-id offsets keep splits disjoint
SPLIT_OFFSETS = {"train": 0, "val": 100_000, "test": 200_000}
_HALF_TAPS = 16


@dataclass(frozen=True)
class ArrayGeometry:
    mic_count: int = 2
    spacing: float = 0.05
    speed_of_sound: float = 343.0

    def __post_init__(self):
        if self.mic_count < 1 or self.spacing <= 0 or self.speed_of_sound <= 0:
            raise ConfigError(f"invalid array geometry {self}")

    def delays(self, azimuth_deg: float, sample_rate: int) -> np.ndarray:
        """Per-mic delay in samples relative to mic 0 for a far-field source."""
        m = np.arange(self.mic_count)
        return m * self.spacing * np.cos(np.deg2rad(azimuth_deg)) / self.speed_of_sound * sample_rate


@dataclass(frozen=True)
class SourceSpec:
    speaker_id: int
    azimuth: float
    distance: float
    level_db: float = 0.0


@dataclass(frozen=True)
class SceneConfig:
    n_sources: int = 2
    snr_low_db: float = 5.0
    snr_high_db: float = 15.0
    reverb: bool = True
    t60_low: float = 0.2
    t60_high: float = 0.6
    n_reflections: int = 50
    duration_s: float = 4.0
    enroll_s: float = 4.0
    sample_rate: int = 8000
    level_spread_db: float = 2.5
    hop_ms: float = 8.0

    def __post_init__(self):
        if self.n_sources < 2:
            raise ConfigError("scenes need at least two sources")
        if not self.snr_low_db <= self.snr_high_db:
            raise ConfigError("snr_low_db must not exceed snr_high_db")
        if self.reverb and not 0 < self.t60_low <= self.t60_high:
            raise ConfigError("T60 range must be positive and ordered")
        hop = self.sample_rate * self.hop_ms / 1000.0
        for name in ("duration_s", "enroll_s"):
            n = getattr(self, name) * self.sample_rate
            if n <= 0 or abs(n - round(n)) > 1e-6 or round(n) % round(hop):
                raise ConfigError(f"{name}={getattr(self, name)} s does not give a hop-aligned sample count")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.sample_rate))

    @property
    def n_enroll(self) -> int:
        return int(round(self.enroll_s * self.sample_rate))


@dataclass
class TrainingPair:
    mixture: np.ndarray  # [C, N]
    target: np.ndarray  # [N], all-zero for negatives
    enrollment: np.ndarray  # [E]
    polarity: str
    pair_id: str = ""
    speaker_id: int = -1  # enrollment speaker
    seed: int = 0
    snr_db: float = 0.0
    interferer: np.ndarray | None = None  # [N] direct-path image of the first non-target source
    source_ids: tuple[int, ...] = ()

    @property
    def is_negative(self) -> bool:
        return self.polarity == "negative"


# ---------------------------------------------------------------------------
# sources


@dataclass(frozen=True)
class SpeakerTraits:
    f0: float
    formants: tuple[float, ...]
    bandwidths: tuple[float, ...]
    vibrato_hz: float
    vibrato_depth: float
    tilt: float


def speaker_traits(speaker_id: int) -> SpeakerTraits:
    rng = np.random.default_rng([int(speaker_id), 7919])
    f0 = float(np.exp(rng.uniform(np.log(80.0), np.log(300.0))))
    f1 = float(rng.uniform(250.0, 1000.0))
    f2 = float(rng.uniform(1100.0, 2400.0))
    f3 = float(rng.uniform(2500.0, 3500.0))
    bw = (float(rng.uniform(50.0, 130.0)), float(rng.uniform(80.0, 200.0)), float(rng.uniform(120.0, 300.0)))
    return SpeakerTraits(
        f0=f0,
        formants=(f1, f2, f3),
        bandwidths=bw,
        vibrato_hz=float(rng.uniform(4.0, 7.0)),
        vibrato_depth=float(rng.uniform(0.005, 0.02)),
        tilt=float(rng.uniform(0.3, 1.6)),
    )


def _envelope(freqs: np.ndarray, traits: SpeakerTraits) -> np.ndarray:
    """Resonance magnitude envelope with a spectral tilt."""
    env = np.zeros_like(freqs, dtype=np.float64)
    for fc, bw in zip(traits.formants, traits.bandwidths):
        r = freqs / fc
        env += 1.0 / np.sqrt((1 - r * r) ** 2 + (freqs * bw / fc**2) ** 2)
    return env / np.maximum(freqs / 100.0, 1.0) ** traits.tilt


def _segments(n: int, rate: int, rng: np.random.Generator):
    """Voiced / unvoiced / pause labels with smooth per-segment gains."""
    voiced = np.zeros(n)
    unvoiced = np.zeros(n)
    pos = int(rng.uniform(0.0, 0.1) * rate)
    while pos < n:
        kind = rng.choice(3, p=[0.65, 0.15, 0.2])
        dur = {0: rng.uniform(0.12, 0.35), 1: rng.uniform(0.05, 0.15), 2: rng.uniform(0.05, 0.25)}[kind]
        length = max(int(dur * rate), 8)
        seg = slice(pos, min(pos + length, n))
        span = seg.stop - seg.start
        shape = np.sin(np.pi * (np.arange(span) + 0.5) / length) ** 0.7
        if kind == 0:
            voiced[seg] = shape * rng.uniform(0.6, 1.0)
        elif kind == 1:
            unvoiced[seg] = shape * rng.uniform(0.3, 0.7)
        pos += length
    return voiced, unvoiced


def synth_speechlike(speaker_id: int, duration_s: float, seed: int, sample_rate: int = 8000) -> np.ndarray:
    """Speech-like waveform for one speaker, peak-normalized to 0.5."""
    if duration_s < 0.5:
        raise ConfigError(f"duration must be at least 0.5 s, got {duration_s}")
    traits = speaker_traits(speaker_id)
    rng = np.random.default_rng([int(speaker_id), int(seed), 104729])
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate

    # slow intonation contour plus vibrato
    knots = rng.normal(0.0, 0.06, size=int(duration_s * 3) + 2)
    contour = np.interp(t, np.linspace(0, duration_s, knots.size), knots)
    f0 = traits.f0 * (1 + contour) * (1 + traits.vibrato_depth * np.sin(2 * np.pi * traits.vibrato_hz * t))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate

    max_h = int(0.45 * sample_rate / f0.min())
    k = np.arange(1, max_h + 1)[:, None]
    hf = k * f0[None, :]
    amp = _envelope(hf, traits) * (hf < 0.45 * sample_rate)
    harmonic = np.sum(amp * np.sin(k * phase[None, :] + rng.uniform(0, 2 * np.pi, size=(max_h, 1))), axis=0)

    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    shaping = _envelope(np.maximum(freqs, 1.0), traits) * np.clip(freqs / 2000.0, 0.0, 1.0) * (freqs < 0.45 * sample_rate)
    noise = np.fft.irfft(spec * shaping, n=n)

    voiced, unvoiced = _segments(n, sample_rate, rng)
    harmonic /= np.abs(harmonic).max() + 1e-12
    noise /= np.abs(noise).max() + 1e-12
    x = harmonic * voiced + 0.35 * noise * unvoiced
    peak = np.abs(x).max()
    if peak == 0:
        return x
    return 0.5 * x / peak


# ---------------------------------------------------------------------------
# spatialization


def fractional_delay_kernel(frac: float, half_taps: int = _HALF_TAPS) -> np.ndarray:
    """Blackman-windowed sinc that delays by ``frac`` samples (|frac| <= 0.5)."""
    n = np.arange(-half_taps, half_taps + 1)
    x = n - frac
    m = half_taps + 1.0
    win = 0.42 + 0.5 * np.cos(np.pi * x / m) + 0.08 * np.cos(2 * np.pi * x / m)
    return np.sinc(x) * win


def _add_impulse(rir: np.ndarray, position: float, gain: float) -> None:
    whole = int(np.round(position))
    kern = fractional_delay_kernel(position - whole) * gain
    lo = whole - _HALF_TAPS
    a, b = max(lo, 0), min(lo + kern.size, rir.size)
    if a < b:
        rir[a:b] += kern[a - lo: b - lo]


def spatialize(
    source: np.ndarray,
    geometry: ArrayGeometry,
    azimuth: float,
    distance: float,
    reverb: tuple[float, int] | None = None,
    seed: int = 0,
    sample_rate: int = 8000,
) -> np.ndarray:
    """Image of ``source`` at each microphone, ``[C, N]``.

    ``reverb`` is ``(t60_seconds, n_reflections)`` or None for the direct path
    only.  Mic 0 receives the direct path with zero delay.
    """
    source = np.asarray(source, dtype=np.float64)
    n = source.size
    delays = geometry.delays(azimuth, sample_rate)
    origin = _HALF_TAPS + int(np.ceil(np.abs(delays).max())) + 1
    tail = 0
    if reverb is not None:
        t60, n_refl = reverb
        tail = int(np.ceil(0.8 * t60 * sample_rate))
        rng = np.random.default_rng([int(seed), 31337])
    rir = np.zeros((geometry.mic_count, origin + tail + _HALF_TAPS + 1))
    for m in range(geometry.mic_count):
        _add_impulse(rir[m], origin + delays[m], 1.0 / distance)
        if reverb is not None:
            times = rng.uniform(0.002, 0.8 * t60, size=n_refl)
            signs = rng.choice([-1.0, 1.0], size=n_refl)
            gains = 0.5 * signs * np.exp(-6.907755 * times / t60) / distance
            for tr, g in zip(times, gains):
                _add_impulse(rir[m], origin + delays[m] + tr * sample_rate, g)
    out = np.empty((geometry.mic_count, n))
    for m in range(geometry.mic_count):
        if reverb is None:
            # short kernel: direct convolution is exact and cheap
            out[m] = np.convolve(source, rir[m])[origin: origin + n]
        else:
            out[m] = fftconvolve(source, rir[m])[origin: origin + n]
    return out


def mix_at_snr(speech: np.ndarray, noise: np.ndarray, snr_db: float, peak: float = 0.9) -> tuple[np.ndarray, float]:
    """Add ``noise`` rescaled to ``snr_db`` below ``speech`` (energies over all channels), then scale the sum to ``peak``.

    Returns the scaled mixture and the shared gain, which callers apply to their references.
    """
    noise = noise * np.sqrt(np.sum(speech**2) / (np.sum(noise**2) * 10 ** (snr_db / 10)))
    mixture = speech + noise
    gain = peak / np.abs(mixture).max()
    return mixture * gain, gain


def _colored_noise(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    n = shape[-1]
    spec = np.fft.rfft(rng.standard_normal(shape), axis=-1)
    f = np.arange(spec.shape[-1]) + 1.0
    return np.fft.irfft(spec / np.sqrt(f), n=n, axis=-1)


# ---------------------------------------------------------------------------
# pairs and corpora

SourceFn = Callable[[int, float, int], np.ndarray]


def _default_source(sample_rate: int) -> SourceFn:
    return lambda spk, dur, seed: synth_speechlike(spk, dur, seed, sample_rate)


def make_pair(
    scene: SceneConfig,
    geometry: ArrayGeometry,
    polarity: str,
    seed: int,
    speaker_pool: Sequence[int] = tuple(range(100)),
    source: SourceFn | None = None,
    pair_id: str = "",
) -> TrainingPair:
    """Build one supervised example; fully determined by ``seed`` and the pool."""
    if polarity not in POLARITIES:
        raise ConfigError(f"polarity must be one of {POLARITIES}, got {polarity!r}")
    needed = scene.n_sources + (1 if polarity == "negative" else 0)
    if len(set(speaker_pool)) < needed:
        raise ConfigError(f"speaker pool of {len(set(speaker_pool))} is too small for {needed} distinct speakers")
    source = source or _default_source(scene.sample_rate)
    rng = np.random.default_rng([int(seed), 2718])
    pool = np.array(sorted(set(int(s) for s in speaker_pool)))
    chosen = rng.choice(pool, size=needed, replace=False)
    mix_ids = [int(s) for s in chosen[: scene.n_sources]]
    enroll_id = mix_ids[0] if polarity == "positive" else int(chosen[-1])
    specs = [
        SourceSpec(
            speaker_id=spk,
            azimuth=float(rng.uniform(0.0, 180.0)),
            distance=float(rng.uniform(0.75, 2.0)),
            level_db=0.0 if k == 0 else float(rng.uniform(-scene.level_spread_db, scene.level_spread_db)),
        )
        for k, spk in enumerate(mix_ids)
    ]
    utt_seeds = rng.integers(0, 2**31 - 1, size=scene.n_sources + 2)
    t60 = float(rng.uniform(scene.t60_low, scene.t60_high)) if scene.reverb else None
    snr_db = float(rng.uniform(scene.snr_low_db, scene.snr_high_db))

    n = scene.n_samples
    images, directs = [], []
    for k, spec in enumerate(specs):
        dry = source(spec.speaker_id, scene.duration_s, int(utt_seeds[k]))[:n]
        dry = dry * 10 ** (spec.level_db / 20)
        reverb = (t60, scene.n_reflections) if t60 is not None else None
        img = spatialize(dry, geometry, spec.azimuth, spec.distance, reverb, int(utt_seeds[k]), scene.sample_rate)
        direct = spatialize(dry, geometry, spec.azimuth, spec.distance, None, 0, scene.sample_rate)[0]
        images.append(img)
        directs.append(direct)
    speech = np.sum(images, axis=0)
    noise = _colored_noise(speech.shape, np.random.default_rng([int(utt_seeds[-1]), 99]))
    mixture, gain = mix_at_snr(speech, noise, snr_db)

    target = directs[0] * gain if polarity == "positive" else np.zeros(n)
    enroll = source(enroll_id, scene.enroll_s, int(utt_seeds[-2]))[: scene.n_enroll]
    return TrainingPair(
        mixture=mixture.astype(np.float32),
        target=target.astype(np.float32),
        enrollment=enroll.astype(np.float32),
        polarity=polarity,
        pair_id=pair_id,
        speaker_id=enroll_id,
        seed=int(seed),
        snr_db=snr_db,
        interferer=(directs[1] * gain).astype(np.float32),
        source_ids=tuple(mix_ids),
    )


def negative_mask(n: int, neg_fraction: float) -> np.ndarray:
    """Exactly ``floor(n * neg_fraction)`` negatives, spread evenly over the indices."""
    if not 0 <= neg_fraction < 1:
        raise ConfigError(f"neg_fraction must be in [0, 1), got {neg_fraction}")
    i = np.arange(n)
    # small slack absorbs binary rounding of products like 200 * 0.1
    marks = np.floor((i + 1) * neg_fraction + 1e-9) - np.floor(i * neg_fraction + 1e-9)
    return marks.astype(bool)


def pair_seed(master_seed: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence([int(master_seed), SPLITS.index(split), int(index)])
    return int(ss.generate_state(1)[0] & 0x7FFFFFFF)


def speaker_pool(split: str, size: int) -> list[int]:
    return list(range(SPLIT_OFFSETS[split], SPLIT_OFFSETS[split] + size))


@dataclass
class ManifestRecord:
    id: str
    polarity: str
    mixture_path: str
    target_path: str
    enrollment_path: str
    speaker_id: int
    seed: int
    snr_db: float
    interferer_path: str | None = None
    source_ids: list[int] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(self.__dict__)


def write_pair(pair: TrainingPair, split_dir: Path, rel_root: Path, sample_rate: int) -> ManifestRecord:
    stem = pair.pair_id
    paths = {}
    for key, data in (
        ("mixture", pair.mixture),
        ("target", pair.target),
        ("enrollment", pair.enrollment),
        ("interferer", pair.interferer),
    ):
        if data is None:
            continue
        p = split_dir / f"{stem}_{key}.wav"
        write_wav(p, data, sample_rate, "float32")
        paths[key] = p.relative_to(rel_root).as_posix()
    return ManifestRecord(
        id=pair.pair_id,
        polarity=pair.polarity,
        mixture_path=paths["mixture"],
        target_path=paths["target"],
        enrollment_path=paths["enrollment"],
        speaker_id=int(pair.speaker_id),
        seed=int(pair.seed),
        snr_db=round(float(pair.snr_db), 6),
        interferer_path=paths.get("interferer"),
        source_ids=list(pair.source_ids),
    )


def build_corpus(
    n_train: int,
    n_val: int,
    n_test: int,
    neg_fraction: float,
    scene: SceneConfig,
    out_dir,
    master_seed: int,
    geometry: ArrayGeometry = ArrayGeometry(),
    speakers: dict[str, int] | None = None,
    source: SourceFn | None = None,
    overwrite: bool = False,
) -> dict[str, Path]:
    """Write WAVs and one ``<split>.jsonl`` manifest per split; returns manifest paths.

    Output goes to a sibling temp directory first and is renamed into place.
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not overwrite:
        raise DataError(f"output directory {out_dir} is not empty (pass overwrite to replace it)")
    counts = {"train": n_train, "val": n_val, "test": n_test}
    speakers = speakers or {
        "train": max(8, n_train // 2),
        "val": max(8, n_val // 2),
        "test": max(8, n_test // 2),
    }
    tmp = out_dir.with_name(out_dir.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    manifests = {}
    for split in SPLITS:
        split_dir = tmp / split
        split_dir.mkdir()
        pool = speaker_pool(split, speakers[split])
        negs = negative_mask(counts[split], neg_fraction)
        lines = []
        for i in range(counts[split]):
            polarity = "negative" if negs[i] else "positive"
            pair = make_pair(scene, geometry, polarity, pair_seed(master_seed, split, i), pool, source, f"{split}{i:05d}")
            lines.append(write_pair(pair, split_dir, tmp, scene.sample_rate).to_json())
        (tmp / f"{split}.jsonl").write_text("".join(line + "\n" for line in lines))
        manifests[split] = out_dir / f"{split}.jsonl"
    if out_dir.exists():
        shutil.rmtree(out_dir)
    os.replace(tmp, out_dir)
    return manifests


def read_manifest(path) -> list[ManifestRecord]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    records = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            records.append(ManifestRecord(**raw))
        except (json.JSONDecodeError, TypeError) as exc:
            raise DataError(f"{path}:{n}: malformed manifest record ({exc})") from exc
    return records


def load_pair(record: ManifestRecord, root, sample_rate: int | None = None) -> TrainingPair:
    root = Path(root)
    mix, rate = read_wav(root / record.mixture_path, sample_rate)
    target, _ = read_wav(root / record.target_path, rate)
    enroll, _ = read_wav(root / record.enrollment_path, rate)
    interf = read_wav(root / record.interferer_path, rate)[0][0] if record.interferer_path else None
    return TrainingPair(
        mixture=mix,
        target=target[0],
        enrollment=enroll[0],
        polarity=record.polarity,
        pair_id=record.id,
        speaker_id=record.speaker_id,
        seed=record.seed,
        snr_db=record.snr_db,
        interferer=interf,
        source_ids=tuple(record.source_ids),
    )


class WavSourceBank:
    """Real-speech sources from ``root/<speaker>/*.wav`` with seeded random crops.

    Speaker directories are numbered in sorted order, so ``speaker_id`` k maps
    to the k-th directory.  Files shorter than the request are tiled.
    """

    def __init__(self, root, sample_rate: int = 8000):
        self.root = Path(root)
        self.sample_rate = sample_rate
        self.speakers = sorted(p for p in self.root.iterdir() if p.is_dir())
        self.files = [sorted(d.glob("*.wav")) for d in self.speakers]
        if not self.speakers or not all(self.files):
            raise DataError(f"{root}: expected one sub-directory of WAV files per speaker")

    def __call__(self, speaker_id: int, duration_s: float, seed: int) -> np.ndarray:
        files = self.files[speaker_id % len(self.files)]
        rng = np.random.default_rng([int(speaker_id), int(seed), 5])
        data, _ = read_wav(files[int(rng.integers(len(files)))], self.sample_rate)
        x = data[0].astype(np.float64)
        n = int(round(duration_s * self.sample_rate))
        if x.size < n:
            x = np.tile(x, -(-n // x.size))
        start = int(rng.integers(0, x.size - n + 1))
        x = x[start: start + n]
        peak = np.abs(x).max()
        return x if peak == 0 else 0.5 * x / peak
