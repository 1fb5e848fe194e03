"""Signal I/O, STFT analysis/synthesis, log-magnitude features and the
synthetic two-speaker corpus.

All signals are mono at 8 kHz. Framing is 32 ms windows (256 samples) with an
8 ms hop (64 samples), giving 129 one-sided frequency bins.
"""
from __future__ import annotations

import os
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, EmptyCorpus, InputTooShort, ShapeError

SAMPLE_RATE = 8000
FRAME_LEN = 256
HOP = 64
N_BINS = FRAME_LEN // 2 + 1
LOG_EPS = 1e-10
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise ConfigError(f"only {SAMPLE_RATE} Hz audio is supported, got {self.sample_rate}")
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class Spectrogram:
    bins: np.ndarray  # complex, (T, F)
    frame_len: int = FRAME_LEN
    hop: int = HOP

    @property
    def n_frames(self) -> int:
        return self.bins.shape[0]

    @property
    def n_bins(self) -> int:
        return self.bins.shape[1]


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def sqrt_hann(n: int = FRAME_LEN) -> np.ndarray:
    """Square root of the periodic Hann window; its square overlap-adds to a
    constant at hop = n/4."""
    k = np.arange(n)
    return np.sqrt(0.5 - 0.5 * np.cos(2.0 * np.pi * k / n))


def n_frames_for(n_samples: int, frame_len: int = FRAME_LEN, hop: int = HOP) -> int:
    return (n_samples - frame_len) // hop + 1


def stft(w: Waveform | np.ndarray, frame_len: int = FRAME_LEN, hop: int = HOP) -> Spectrogram:
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a 1-d signal, got shape {x.shape}")
    if len(x) < frame_len:
        raise InputTooShort(f"signal of {len(x)} samples is shorter than one {frame_len}-sample frame")
    frames = np.lib.stride_tricks.sliding_window_view(x, frame_len)[::hop]
    return Spectrogram(np.fft.rfft(frames * sqrt_hann(frame_len), axis=1), frame_len, hop)


def istft(s: Spectrogram, out_len: int) -> Waveform:
    """Weighted overlap-add inverse of :func:`stft`.

    The output is divided by the summed squared-window envelope wherever that
    envelope is non-negligible, so interior samples are reconstructed exactly
    and the edges degrade gracefully.
    """
    bins = np.asarray(s.bins)
    if bins.ndim != 2 or bins.shape[1] != s.frame_len // 2 + 1:
        raise ShapeError(f"spectrogram of shape {bins.shape} does not match frame_len {s.frame_len}")
    n_frames = bins.shape[0]
    full_len = (n_frames - 1) * s.hop + s.frame_len
    if out_len > full_len:
        raise ShapeError(f"out_len {out_len} exceeds the {full_len} samples covered by {n_frames} frames")
    win = sqrt_hann(s.frame_len)
    frames = np.fft.irfft(bins, n=s.frame_len, axis=1) * win
    out = np.zeros(full_len)
    env = np.zeros(full_len)
    for t in range(n_frames):
        sl = slice(t * s.hop, t * s.hop + s.frame_len)
        out[sl] += frames[t]
        env[sl] += win ** 2
    good = env > 1e-8
    out[good] /= env[good]
    out[~good] = 0.0
    return Waveform(out[:out_len])


def analysis_pad(x: np.ndarray, frame_len: int = FRAME_LEN, hop: int = HOP) -> tuple[np.ndarray, int]:
    """Zero-pad a signal so every original sample sits under a full set of
    overlapping frames. Returns the padded signal and the left offset."""
    left = frame_len - hop
    n = len(x) + 2 * left
    n_fr = max(1, -(-(n - frame_len) // hop) + 1)
    total = (n_fr - 1) * hop + frame_len
    return np.concatenate([np.zeros(left), x, np.zeros(total - len(x) - left)]), left


def log_magnitude(s: Spectrogram) -> np.ndarray:
    return np.log10(np.abs(s.bins) + LOG_EPS)


def fit_normalizer(corpus: Sequence[Spectrogram]) -> Normalizer:
    """Per-frequency mean and standard deviation of the decimal log-magnitude
    over every frame of every item."""
    if len(corpus) == 0:
        raise EmptyCorpus("cannot fit a normalizer on an empty corpus")
    n_bins = corpus[0].n_bins
    count = 0
    total = np.zeros(n_bins)
    for s in corpus:
        if s.n_bins != n_bins:
            raise ShapeError("all spectrograms in a corpus must share the same number of bins")
        lm = log_magnitude(s)
        total += lm.sum(axis=0)
        count += lm.shape[0]
    mean = total / count
    sq = np.zeros(n_bins)
    for s in corpus:
        sq += ((log_magnitude(s) - mean) ** 2).sum(axis=0)
    std = np.maximum(np.sqrt(sq / count), STD_FLOOR)
    return Normalizer(mean, std)


def log_features(s: Spectrogram, n: Normalizer) -> np.ndarray:
    if len(n.mean) != s.n_bins:
        raise ShapeError(f"normalizer has {len(n.mean)} bins, spectrogram has {s.n_bins}")
    return (log_magnitude(s) - n.mean) / n.std


# --- WAV I/O -----------------------------------------------------------------

def read_wav(path: str | os.PathLike) -> Waveform:
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2:
            raise ConfigError(f"{path}: expected mono 16-bit PCM")
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(data, rate)


def write_wav(path: str | os.PathLike, w: Waveform | np.ndarray) -> None:
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(SAMPLE_RATE)
        f.writeframes(pcm.tobytes())


# --- synthetic corpus ----------------------------------------------------------

@dataclass
class SynthConfig:
    n_mixtures: int = 10
    min_duration: float = 1.5
    max_duration: float = 2.5
    gain_db: float = 2.5
    source_dir: str | None = None

    def validate(self) -> None:
        if self.n_mixtures < 1:
            raise ConfigError("n_mixtures must be positive")
        if not (0 < self.min_duration <= self.max_duration):
            raise ConfigError(f"invalid durations [{self.min_duration}, {self.max_duration}]")
        if self.min_duration * SAMPLE_RATE < 2 * FRAME_LEN:
            raise ConfigError("min_duration is shorter than two analysis frames")
        if self.gain_db < 0:
            raise ConfigError("gain_db must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


@dataclass
class Mixture:
    utt_id: str
    mixture: Waveform
    sources: list[Waveform] = field(default_factory=list)


# Two pseudo-speaker families: disjoint pitch ranges and formant layouts.
_FAMILIES = (
    {"f0": (85.0, 150.0), "formants": (350.0, 900.0, 1700.0), "amps": (1.0, 0.55, 0.25), "bw": 180.0,
     "noise_band": (50.0, 1500.0)},
    {"f0": (210.0, 340.0), "formants": (1400.0, 2400.0, 3300.0), "amps": (0.7, 1.0, 0.5), "bw": 260.0,
     "noise_band": (1800.0, 3900.0)},
)


def _envelope(freqs, formants, amps, bw):
    env = np.full_like(freqs, 0.01)
    for fc, a in zip(formants, amps):
        env += a * np.exp(-0.5 * ((freqs - fc) / bw) ** 2)
    return env


def _syllable_gate(n, rng):
    """Piecewise on/off amplitude gate with raised-cosine ramps, 100-350 ms units."""
    gate = np.zeros(n)
    pos = 0
    while pos < n:
        seg = int(rng.uniform(0.10, 0.35) * SAMPLE_RATE)
        if rng.random() < 0.75:
            end = min(n, pos + seg)
            m = end - pos
            ramp = min(int(0.02 * SAMPLE_RATE), m // 2)
            g = np.ones(m) * rng.uniform(0.5, 1.0)
            if ramp > 0:
                r = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
                g[:ramp] *= r
                g[m - ramp:] *= r[::-1]
            gate[pos:end] = g
        pos += seg
    return gate


def _pseudo_speaker(family: int, n: int, rng: np.random.Generator) -> np.ndarray:
    fam = _FAMILIES[family]
    t = np.arange(n) / SAMPLE_RATE
    f0_base = rng.uniform(*fam["f0"])
    formants = np.asarray(fam["formants"]) * rng.uniform(0.92, 1.08, size=3)
    vib = 1.0 + 0.06 * np.sin(2 * np.pi * rng.uniform(2.0, 5.0) * t + rng.uniform(0, 2 * np.pi))
    drift = np.linspace(1.0, rng.uniform(0.9, 1.1), n)
    f0 = np.clip(f0_base * vib * drift, fam["f0"][0] * 0.85, fam["f0"][1] * 1.15)
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    voiced = np.zeros(n)
    for h in range(1, int(SAMPLE_RATE / 2 / f0.min()) + 1):
        fh = h * f0
        amp = _envelope(fh, formants, fam["amps"], fam["bw"]) * (fh < SAMPLE_RATE / 2 - 100)
        voiced += amp * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    lo, hi = fam["noise_band"]
    noise = np.fft.irfft(spec * ((freqs >= lo) & (freqs <= hi)), n=n)
    noise *= 0.1 * np.std(voiced) / (np.std(noise) + 1e-12)
    x = (voiced + noise) * _syllable_gate(n, rng)
    return x / (np.sqrt(np.mean(x ** 2)) + 1e-12)


def _wav_pool(source_dir: str) -> list[list[Path]]:
    root = Path(source_dir)
    if not root.is_dir():
        raise ConfigError(f"source_dir {source_dir} is not a directory")
    subdirs = sorted(p for p in root.iterdir() if p.is_dir())
    if subdirs:
        pool = [sorted(d.glob("*.wav")) for d in subdirs]
        pool = [files for files in pool if files]
    else:
        pool = [[p] for p in sorted(root.glob("*.wav"))]
    if len(pool) < 2:
        raise ConfigError(f"{source_dir}: need WAV files from at least two speakers")
    return pool


def _fit_length(x: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if len(x) >= n:
        start = int(rng.integers(0, len(x) - n + 1))
        return x[start:start + n]
    return np.concatenate([x, np.zeros(n - len(x))])


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.round(x * 32768.0) / 32768.0


def synth_corpus(cfg: SynthConfig, seed: int) -> list[Mixture]:
    """Generate ``cfg.n_mixtures`` two-speaker mixtures.

    Source 1 always comes from the low-pitched family and source 2 from the
    high-pitched one (or, with ``source_dir``, from two distinct speakers of the
    WAV pool). Sources are quantized to the 16-bit grid and the mixture is their
    exact sum, so a WAV round trip preserves ``mixture == sum(sources)``.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    pool = _wav_pool(cfg.source_dir) if cfg.source_dir else None
    out = []
    for i in range(cfg.n_mixtures):
        n = int(round(rng.uniform(cfg.min_duration, cfg.max_duration) * SAMPLE_RATE))
        if pool is None:
            srcs = [_pseudo_speaker(s, n, rng) for s in range(2)]
        else:
            a, b = rng.choice(len(pool), size=2, replace=False)
            srcs = []
            for spk in (a, b):
                files = pool[spk]
                x = read_wav(files[int(rng.integers(len(files)))]).samples
                x = _fit_length(x, n, rng)
                srcs.append(x / (np.sqrt(np.mean(x ** 2)) + 1e-12))
        srcs[1] = srcs[1] * 10 ** (rng.uniform(-cfg.gain_db, cfg.gain_db) / 20)
        peak = np.max(np.abs(srcs[0]) + np.abs(srcs[1]))
        srcs = [_quantize(s * 0.9 / max(peak, 1e-12)) for s in srcs]
        out.append(Mixture(f"mix{i:05d}", Waveform(srcs[0] + srcs[1]), [Waveform(s) for s in srcs]))
    return out


def spectral_centroid(w: Waveform) -> float:
    mag = np.abs(stft(w).bins).sum(axis=0)
    freqs = np.arange(len(mag)) * SAMPLE_RATE / FRAME_LEN
    return float((mag * freqs).sum() / (mag.sum() + 1e-12))
