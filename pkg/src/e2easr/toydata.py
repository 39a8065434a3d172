"""Synthetic speech-like corpus: each character is a fixed two-band spectral pattern."""

from __future__ import annotations

import itertools
import string
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from .features import NUM_MEL, FeatureMatrix, Waveform, write_wav
from .manifest import Entry, write_manifest

NUM_BANDS = 8
BAND_BINS = NUM_MEL // NUM_BANDS
TEMPLATE_PAIRS = list(itertools.combinations(range(NUM_BANDS), 2))


@dataclass(frozen=True)
class ToyTaskSpec:
    vocab_size: int = 12
    length_range: Tuple[int, int] = (3, 8)  # characters per utterance
    token_frames: Tuple[int, int] = (4, 8)
    gap_frames: Tuple[int, int] = (2, 4)  # silence between characters keeps repeats separable
    level: float = 1.0
    noise: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.vocab_size <= len(TEMPLATE_PAIRS):
            raise ValueError(f"vocab_size must be in [1, {len(TEMPLATE_PAIRS)}] (distinct templates)")
        for lo, hi in (self.length_range, self.token_frames, self.gap_frames):
            if lo < 0 or hi < lo:
                raise ValueError(f"bad range ({lo}, {hi})")
        if self.length_range[0] < 1 or self.token_frames[0] < 1:
            raise ValueError("utterances need at least one character of at least one frame")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")

    @property
    def alphabet(self) -> str:
        return string.ascii_lowercase[:self.vocab_size] if self.vocab_size <= 26 else \
            "".join(chr(0x3041 + i) for i in range(self.vocab_size))


def templates(spec: ToyTaskSpec) -> np.ndarray:
    """(vocab_size, 80) patterns; pairs are spread over all 28 band combinations."""
    picks = np.linspace(0, len(TEMPLATE_PAIRS) - 1, spec.vocab_size).round().astype(int)
    out = np.zeros((spec.vocab_size, NUM_MEL))
    for row, idx in enumerate(picks):
        for band in TEMPLATE_PAIRS[idx]:
            out[row, band * BAND_BINS:(band + 1) * BAND_BINS] = spec.level
    return out


@dataclass
class ToyUtterance:
    uid: str
    features: FeatureMatrix
    text: str
    alignment: np.ndarray  # per-frame character index, -1 for silence


def _render(spec: ToyTaskSpec, text_ids: List[int], rng: np.random.Generator, tmpl: np.ndarray):
    pieces, align = [], []

    def silence():
        n = int(rng.integers(spec.gap_frames[0], spec.gap_frames[1] + 1))
        pieces.append(np.zeros((n, NUM_MEL)))
        align.extend([-1] * n)

    silence()
    for c in text_ids:
        n = int(rng.integers(spec.token_frames[0], spec.token_frames[1] + 1))
        pieces.append(np.repeat(tmpl[c:c + 1], n, axis=0))
        align.extend([c] * n)
        silence()
    frames = np.concatenate(pieces)
    return frames, np.array(align)


def generate(spec: ToyTaskSpec, n: int, prefix: str = "toy") -> List[ToyUtterance]:
    """``n`` utterances; identical for identical (spec, n)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(spec.seed)
    tmpl = templates(spec)
    alphabet = spec.alphabet
    out = []
    for i in range(n):
        length = int(rng.integers(spec.length_range[0], spec.length_range[1] + 1))
        ids = rng.integers(0, spec.vocab_size, size=length).tolist()
        frames, align = _render(spec, ids, rng, tmpl)
        if spec.noise > 0:
            frames = frames + rng.normal(0.0, spec.noise, size=frames.shape)
        text = "".join(alphabet[j] for j in ids)
        out.append(ToyUtterance(f"{prefix}{spec.seed}-{i:05d}", FeatureMatrix(frames), text, align))
    return out


def nearest_template(frames: np.ndarray, spec: ToyTaskSpec) -> np.ndarray:
    """Per-frame nearest pattern among silence and the character templates (-1 = silence)."""
    candidates = np.vstack([np.zeros((1, NUM_MEL)), templates(spec)])
    d = ((frames[:, None, :] - candidates[None, :, :]) ** 2).sum(-1)
    return d.argmin(axis=1) - 1


def corrupt(frames: np.ndarray, rng: np.random.Generator, band_drops: int = 1,
            time_drops: int = 2, time_width: int = 4, noise: float = 0.0) -> np.ndarray:
    """Inject distortions: zero whole mel bands and short time spans, add Gaussian noise."""
    x = np.array(frames, dtype=np.float64, copy=True)
    t = x.shape[0]
    for band in rng.choice(NUM_BANDS, size=min(band_drops, NUM_BANDS), replace=False):
        x[:, band * BAND_BINS:(band + 1) * BAND_BINS] = 0.0
    for _ in range(time_drops):
        w = min(time_width, t)
        s = int(rng.integers(0, t - w + 1))
        x[s:s + w] = 0.0
    if noise > 0:
        x += rng.normal(0.0, noise, size=x.shape)
    return x


def write_corpus(utts: List[ToyUtterance], out_dir: Union[str, Path], name: str = "manifest.jsonl") -> Path:
    """Save features as .npy files next to a manifest and return the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "feats").mkdir(parents=True, exist_ok=True)
    entries = []
    for u in utts:
        rel = Path("feats") / f"{u.uid}.npy"
        np.save(out_dir / rel, u.features.frames)
        entries.append(Entry(u.uid, u.text, features=str(rel), duration=u.features.num_frames / 100.0))
    path = out_dir / name
    write_manifest(entries, path)
    return path


# --- audio-backed variant ------------------------------------------------------

def tone_frequencies(spec: ToyTaskSpec) -> np.ndarray:
    """One pure tone per character, spaced evenly in log frequency."""
    return np.geomspace(300.0, 3500.0, spec.vocab_size)


def synthesize(spec: ToyTaskSpec, text_ids: List[int], rng: np.random.Generator,
               sample_rate: int = 16000) -> Waveform:
    freqs = tone_frequencies(spec)
    hop = sample_rate // 100
    parts = []

    def gap():
        parts.append(np.zeros(hop * int(rng.integers(spec.gap_frames[0], spec.gap_frames[1] + 1))))

    gap()
    for c in text_ids:
        n = hop * int(rng.integers(spec.token_frames[0], spec.token_frames[1] + 1))
        parts.append(0.5 * np.sin(2 * np.pi * freqs[c] * np.arange(n) / sample_rate))
        gap()
    audio = np.concatenate(parts + [np.zeros(3 * hop)])  # tail covers the last analysis window
    if spec.noise > 0:
        audio = audio + rng.normal(0.0, 0.01 * spec.noise, size=audio.shape)
    return Waveform(np.clip(audio, -1.0, 1.0), sample_rate)


def generate_wav(spec: ToyTaskSpec, n: int, out_dir: Union[str, Path], prefix: str = "tone") -> Path:
    """Write ``n`` tone utterances as 16-bit WAV files plus a manifest."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    entries = []
    for i in range(n):
        length = int(rng.integers(spec.length_range[0], spec.length_range[1] + 1))
        ids = rng.integers(0, spec.vocab_size, size=length).tolist()
        w = synthesize(spec, ids, rng)
        uid = f"{prefix}{spec.seed}-{i:05d}"
        rel = Path("wav") / f"{uid}.wav"
        write_wav(out_dir / rel, w)
        entries.append(Entry(uid, "".join(spec.alphabet[j] for j in ids), audio=str(rel), duration=w.duration))
    path = out_dir / "manifest.jsonl"
    write_manifest(entries, path)
    return path
