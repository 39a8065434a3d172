"""Log-mel filterbank features and corpus-level mean/variance normalization."""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Union

import numpy as np

NUM_MEL = 80
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class FeatureConfig:
    frame_length_ms: float = 40.0
    frame_shift_ms: float = 10.0
    num_mel: int = NUM_MEL
    fmin: float = 125.0
    fmax: float = 7600.0
    log_floor: float = 1e-10


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureMatrix:
    frames: np.ndarray
    frame_shift_ms: float = 10.0
    frame_length_ms: float = 40.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != NUM_MEL:
            raise ValueError(f"feature matrix must be T x {NUM_MEL}, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("feature matrix contains NaN or Inf")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("mean and std must be vectors of equal length")
        if np.any(self.std <= 0):
            raise ValueError("std must be strictly positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def save(self, path: Union[str, Path]) -> None:
        payload = {"dim": self.dim, "mean": self.mean.tolist(), "std": self.std.tolist()}
        Path(path).write_text(json.dumps(payload), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "NormStats":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        stats = cls(payload["mean"], payload["std"])
        if stats.dim != payload["dim"]:
            raise ValueError(f"{path}: declared dim {payload['dim']} != stored {stats.dim}")
        return stats


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, num_mel: int = NUM_MEL,
                   fmin: float = 125.0, fmax: float = 7600.0) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape (num_mel, n_fft // 2 + 1)."""
    fmax = min(fmax, sample_rate / 2.0)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), num_mel + 2))
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def frame_params(sample_rate: int, cfg: FeatureConfig = FeatureConfig()) -> tuple:
    window = int(round(sample_rate * cfg.frame_length_ms / 1000.0))
    hop = int(round(sample_rate * cfg.frame_shift_ms / 1000.0))
    n_fft = 1 << (window - 1).bit_length()
    return window, hop, n_fft


def num_frames(num_samples: int, window: int, hop: int) -> int:
    return (num_samples - window) // hop + 1


def extract_logmel(w: Waveform, cfg: FeatureConfig = FeatureConfig()) -> FeatureMatrix:
    """40 ms Hann-windowed frames every 10 ms -> power spectrum -> mel -> log."""
    window, hop, n_fft = frame_params(w.sample_rate, cfg)
    n = len(w.samples)
    if n < window:
        raise ValueError(f"audio has {n} samples, shorter than one {window}-sample window")
    t = num_frames(n, window, hop)
    idx = np.arange(window)[None, :] + hop * np.arange(t)[:, None]
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(window) / window)
    spec = np.fft.rfft(w.samples[idx] * hann, n=n_fft, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    fb = mel_filterbank(w.sample_rate, n_fft, cfg.num_mel, cfg.fmin, cfg.fmax)
    frames = np.log(power @ fb.T + cfg.log_floor)
    return FeatureMatrix(frames, cfg.frame_shift_ms, cfg.frame_length_ms)


def fit_norm(corpus: Iterable) -> NormStats:
    """Per-dimension mean and (population) std over every frame of ``corpus``.

    Statistics are merged matrix by matrix so the corpus can be a stream.
    """
    count, mean, m2 = 0, None, None
    for f in corpus:
        x = f.frames if isinstance(f, FeatureMatrix) else np.asarray(f, dtype=np.float64)
        n = x.shape[0]
        if n == 0:
            continue
        mu = x.mean(axis=0)
        sq = ((x - mu) ** 2).sum(axis=0)
        if mean is None:
            count, mean, m2 = n, mu, sq
            continue
        total = count + n
        delta = mu - mean
        mean = mean + delta * n / total
        m2 = m2 + sq + delta ** 2 * count * n / total
        count = total
    if count == 0:
        raise ValueError("cannot fit normalization statistics on an empty corpus")
    std = np.maximum(np.sqrt(m2 / count), STD_FLOOR)
    return NormStats(mean, std)


def apply_norm(f, stats: NormStats):
    """(f - mean) / std; returns the same kind it was given (FeatureMatrix or array)."""
    x = f.frames if isinstance(f, FeatureMatrix) else np.asarray(f, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != stats.dim:
        raise ValueError(f"feature dim {x.shape[-1]} does not match stats dim {stats.dim}")
    out = (x - stats.mean) / stats.std
    if isinstance(f, FeatureMatrix):
        return FeatureMatrix(out, f.frame_shift_ms, f.frame_length_ms)
    return out


def invert_norm(f, stats: NormStats) -> np.ndarray:
    x = f.frames if isinstance(f, FeatureMatrix) else np.asarray(f)
    return x * stats.std + stats.mean


def read_wav(path: Union[str, Path]) -> Waveform:
    """Read a mono 16-bit PCM RIFF file into samples scaled to [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getcomptype() != "NONE":
                raise ValueError(f"{path}: compressed WAV is not supported")
            if fh.getnchannels() != 1:
                raise ValueError(f"{path}: expected mono audio, got {fh.getnchannels()} channels")
            if fh.getsampwidth() != 2:
                raise ValueError(f"{path}: expected 16-bit PCM, got {8 * fh.getsampwidth()}-bit")
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise ValueError(f"{path}: not a PCM WAV file ({exc})") from None
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path: Union[str, Path], w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(pcm.tobytes())
