"""Shade correction and Bayer channel balancing.

The low-frequency background of each colour channel is estimated with a
sym5 wavelet decomposition whose detail bands are discarded; dividing by it
flattens illumination shade and equalises the four Bayer responses.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import pywt

from .errors import DegenerateFrameError, InvalidInputError
from .simulator import Layout, RawFrame

__all__ = ["RawFrame", "NormalizedHologram", "estimate_shade", "correct_frame", "DEFAULT_LEVELS"]

DEFAULT_LEVELS = 6
WAVELET = "sym5"


@dataclass(frozen=True)
class NormalizedHologram:
    pixels: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=float)
        if px.ndim != 2:
            raise InvalidInputError("hologram must be 2-D")
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def window(self, rows: slice, cols: slice) -> "NormalizedHologram":
        return NormalizedHologram(self.pixels[rows, cols], self.timestamp)


def estimate_shade(channel: np.ndarray, levels: int = DEFAULT_LEVELS) -> np.ndarray:
    """Smooth, strictly positive background estimate of ``channel``."""
    img = np.asarray(channel, dtype=float)
    if img.ndim != 2:
        raise InvalidInputError("channel must be 2-D")
    if levels < 1:
        raise InvalidInputError("levels must be >= 1")
    if min(img.shape) < 2**levels:
        raise InvalidInputError(
            f"channel {img.shape} too small for {levels} wavelet levels (needs {2**levels})"
        )
    mean = img.mean()
    if not mean > 0:
        raise DegenerateFrameError("channel has no signal (mean <= 0)")
    with warnings.catch_warnings():
        # depth beyond pywt's filter-length heuristic is intentional
        warnings.simplefilter("ignore", UserWarning)
        coeffs = pywt.wavedec2(img, WAVELET, mode="symmetric", level=levels)
    coeffs = [coeffs[0]] + [tuple(np.zeros_like(d) for d in band) for band in coeffs[1:]]
    shade = pywt.waverec2(coeffs, WAVELET, mode="symmetric")[: img.shape[0], : img.shape[1]]
    return np.maximum(shade, 1e-6 * mean)


def _correct_channel(channel: np.ndarray, levels: int) -> np.ndarray:
    return channel / estimate_shade(channel, levels)


def correct_frame(frame: RawFrame, levels: int = DEFAULT_LEVELS) -> NormalizedHologram:
    px = np.asarray(frame.pixels, dtype=float)
    if frame.layout is Layout.BAYER:
        out = np.empty_like(px)
        for dy in (0, 1):
            for dx in (0, 1):
                out[dy::2, dx::2] = _correct_channel(px[dy::2, dx::2], levels)
    else:
        out = _correct_channel(px, levels)
    return NormalizedHologram(out, frame.timestamp)
