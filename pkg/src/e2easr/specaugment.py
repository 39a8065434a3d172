"""Time and frequency masking (no time warping)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple, Union

import numpy as np


@dataclass(frozen=True)
class SpecAugmentConfig:
    """Mask counts and maximum widths.

    ``time_width`` is an absolute frame count when given as an int (or a float
    above 1) and a fraction of the utterance length when given as a float in
    [0, 1]; fractional widths are rounded down.
    """

    time_masks: int = 0
    time_width: Union[int, float] = 0
    freq_masks: int = 0
    freq_width: int = 0

    def __post_init__(self):
        if min(self.time_masks, self.time_width, self.freq_masks, self.freq_width) < 0:
            raise ValueError(f"SpecAugment parameters must be non-negative: {self}")
        if self.freq_width > 80:
            raise ValueError(f"freq_width {self.freq_width} exceeds 80 mel bins")

    @property
    def fractional(self) -> bool:
        return isinstance(self.time_width, float) and self.time_width <= 1.0

    def max_time_width(self, num_frames: int) -> int:
        if self.fractional:
            if num_frames == 0 and self.time_width > 0:
                raise ValueError("fractional time width needs a non-empty utterance")
            return int(np.floor(self.time_width * num_frames))
        return int(self.time_width)

    @classmethod
    def from_tuple(cls, t) -> "SpecAugmentConfig":
        """Build from the (T_n, T_w, F_n, F_w) ordering."""
        tn, tw, fn, fw = t
        return cls(int(tn), tw, int(fn), int(fw))


BLSTM_SETTING = SpecAugmentConfig(1, 50, 1, 15)
CONFORMER_SETTING = SpecAugmentConfig(10, 0.05, 2, 27)


class Mask(NamedTuple):
    axis: int  # 0 = time, 1 = frequency
    start: int
    width: int


def _sample(rng: np.random.Generator, size: int, max_width: int) -> tuple:
    w = int(rng.integers(0, min(max_width, size) + 1))
    start = int(rng.integers(0, size - w + 1))
    return w, start


def sample_masks(num_frames: int, num_bins: int, cfg: SpecAugmentConfig,
                 rng: np.random.Generator) -> List[Mask]:
    """Draw every time mask, then every frequency mask.

    Widths are uniform on {0, ..., W} (W capped at the axis length) and starts
    uniform over positions that keep the segment inside the axis.
    """
    masks = []
    tw = cfg.max_time_width(num_frames)
    for _ in range(cfg.time_masks):
        w, s = _sample(rng, num_frames, tw)
        masks.append(Mask(0, s, w))
    for _ in range(cfg.freq_masks):
        w, s = _sample(rng, num_bins, cfg.freq_width)
        masks.append(Mask(1, s, w))
    return masks


def apply_masks(features: np.ndarray, masks: List[Mask]) -> np.ndarray:
    out = np.array(features, dtype=np.float64, copy=True)
    for m in masks:
        if m.axis == 0:
            out[m.start:m.start + m.width, :] = 0.0
        else:
            out[:, m.start:m.start + m.width] = 0.0
    return out


def augment(features: np.ndarray, cfg: SpecAugmentConfig, rng: np.random.Generator,
            return_masks: bool = False):
    """Mask a (T, F) feature matrix; masked cells become exactly 0."""
    features = np.asarray(features, dtype=np.float64)
    masks = sample_masks(features.shape[0], features.shape[1], cfg, rng)
    out = apply_masks(features, masks)
    return (out, masks) if return_masks else out

