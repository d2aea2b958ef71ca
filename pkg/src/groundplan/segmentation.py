"""Split a demonstration's gripper closure signal into close-open segments."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class GripperSignal:
    """Per-frame gripper closure fraction (0 = fully open, 1 = fully closed)."""

    values: tuple[float, ...]
    fps: float = 15.0

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if not self.values:
            raise ValueError("gripper signal is empty")
        if not all(math.isfinite(v) and 0.0 <= v <= 1.0 for v in self.values):
            raise ValueError("gripper values must be finite fractions in [0, 1]")
        if not self.fps > 0:
            raise ValueError("fps must be positive")

    def __len__(self):
        return len(self.values)

    @classmethod
    def from_source(cls, values: Sequence[float], polarity: str = "closure", fps: float = 15.0):
        """Build a signal from logged values.

        ``polarity="aperture"`` means the log stores opening (1 = open) and is
        inverted into closure.
        """
        if polarity == "closure":
            return cls(tuple(values), fps)
        if polarity == "aperture":
            return cls(tuple(1.0 - float(v) for v in values), fps)
        raise ValueError(f"unknown gripper polarity {polarity!r}")


@dataclass(frozen=True)
class Segment:
    s: int
    e: int

    def __post_init__(self):
        if not 0 <= self.s < self.e:
            raise ValueError(f"invalid segment ({self.s}, {self.e})")

    def as_tuple(self) -> tuple[int, int]:
        return (self.s, self.e)


@dataclass(frozen=True)
class SegmentationConfig:
    theta_close: float = 0.7
    theta_open: float = 0.3
    min_dwell: int = 3
    min_gap: int = 2

    def __post_init__(self):
        if not 0.0 <= self.theta_open < self.theta_close <= 1.0:
            raise ValueError("need 0 <= theta_open < theta_close <= 1")
        if self.min_dwell < 1 or self.min_gap < 0:
            raise ValueError("min_dwell must be >= 1 and min_gap >= 0")


def _sustained_starts(mask: np.ndarray, dwell: int) -> np.ndarray:
    """Boolean array: True where a run of >= dwell True values begins at i."""
    n = len(mask)
    if n < dwell:
        return np.zeros(n, dtype=bool)
    csum = np.concatenate([[0], np.cumsum(mask, dtype=np.int64)])
    window = csum[dwell:] - csum[:-dwell]
    out = np.zeros(n, dtype=bool)
    out[: n - dwell + 1] = window == dwell
    return out


def segment_signal(
    sig: GripperSignal, cfg: SegmentationConfig = SegmentationConfig()
) -> list[Segment]:
    """Hysteresis state machine over the closure signal.

    A segment starts at the first frame of a run at or above ``theta_close``
    lasting ``min_dwell`` frames, and ends at the first frame of the next run
    at or below ``theta_open`` of the same minimum length. A close that never
    reopens is dropped. Segments closer than ``min_gap`` frames are merged.
    """
    values = np.asarray(sig.values)
    close_start = _sustained_starts(values >= cfg.theta_close, cfg.min_dwell)
    open_start = _sustained_starts(values <= cfg.theta_open, cfg.min_dwell)
    close_idx = np.flatnonzero(close_start)
    open_idx = np.flatnonzero(open_start)

    segments: list[Segment] = []
    pos = 0
    while True:
        c = np.searchsorted(close_idx, pos)
        if c >= len(close_idx):
            break
        s = int(close_idx[c])
        o = np.searchsorted(open_idx, s + 1)
        if o >= len(open_idx):
            break  # trailing close with no reopen
        e = int(open_idx[o])
        if segments and s - segments[-1].e < cfg.min_gap:
            segments[-1] = Segment(segments[-1].s, e)
        else:
            segments.append(Segment(s, e))
        pos = e
    return segments
