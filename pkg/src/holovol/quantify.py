"""Per-droplet geometry from recovered phase and contact-angle decay fits.

Volume is the phase integral over the detection mask, height comes from the
peak phase, and the spherical-cap relation between volume and height gives
the contact angle. A straight-line fit of contact angle against time gives
the decay rate K (rad/s), the per-particle volatility measure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.fft as sfft
from scipy import ndimage
from scipy.optimize import brentq
from skimage.restoration import unwrap_phase

from .errors import (
    GeometryInconsistentError,
    InsufficientDataError,
    InvalidInputError,
)
from .optics import OpticalConfig

MIN_TRACE_FRAMES = 5


@dataclass(frozen=True)
class DropletGeometry:
    volume_V: float
    height_h: float
    contact_angle_theta: float
    timestamp: float = 0.0
    frame_index: int = 0
    clamped_samples: int = 0


@dataclass(frozen=True)
class VolatilityFit:
    particle_id: int
    theta0: float
    K: float
    r_squared: float
    n_frames: int


def _region(phase: np.ndarray, region: np.ndarray) -> np.ndarray:
    region = np.asarray(region, bool)
    if region.shape != phase.shape:
        raise InvalidInputError("region mask and phase crop differ in shape")
    if not region.any():
        raise InvalidInputError("empty region")
    return region


def _pitch(config: OpticalConfig, pitch: float | None) -> float:
    return config.recon_pitch if pitch is None else pitch


def particle_volume(
    phase: np.ndarray, region: np.ndarray, config: OpticalConfig, pitch: float | None = None
) -> float:
    """Phase integral over ``region`` converted to um^3 (negative phase clamped)."""
    phase = np.asarray(phase, float)
    region = _region(phase, region)
    p = _pitch(config, pitch)
    total = float(np.clip(phase[region], 0.0, None).sum())
    return config.phase_to_thickness * total * p * p


def particle_height(phase: np.ndarray, region: np.ndarray, config: OpticalConfig) -> float:
    """Peak of the 3x3 median-filtered phase inside ``region``, in um."""
    phase = np.asarray(phase, float)
    region = _region(phase, region)
    smoothed = ndimage.median_filter(phase, size=3, mode="nearest")
    return config.phase_to_thickness * max(float(smoothed[region].max()), 0.0)


def contact_angle(V: float, h: float) -> float:
    """Contact angle (rad) of the spherical cap with volume V and height h."""
    if not (V > 0 and h > 0):
        raise InvalidInputError(f"need V > 0 and h > 0, got V={V!r}, h={h!r}")
    arg = 1.0 - 3.0 * h * h / (3.0 * V / (math.pi * h) + h * h)
    if arg < -1 - 1e-9 or arg > 1 + 1e-9:
        raise GeometryInconsistentError(
            f"V={V:.4g} um^3 and h={h:.4g} um do not describe a spherical cap"
        )
    return math.acos(min(1.0, max(-1.0, arg)))


def cap_height(V: float, a: float) -> float:
    """Height (um) of the spherical cap with volume V and contact radius a."""
    if not (V > 0 and a > 0):
        raise InvalidInputError(f"need V > 0 and a > 0, got V={V!r}, a={a!r}")
    # V = pi h (3 a^2 + h^2) / 6 is increasing in h; h < 2 V / (pi a^2) bounds it
    return brentq(lambda h: math.pi * h * (3 * a * a + h * h) / 6 - V, 0.0, 2 * V / (math.pi * a * a))


def _observed_peak(a: float, h: float, pitch: float, band_limit: float) -> float:
    """Peak a cap of radius a and height h shows after band limiting and a 3x3 median."""
    n = 2 * (int(math.ceil(a / pitch)) + 12)
    x = (np.arange(n) - n / 2 + 0.5) * pitch
    r2 = x[None, :] ** 2 + x[:, None] ** 2
    rs = (a * a + h * h) / (2 * h)
    t = np.where(r2 <= a * a, np.sqrt(np.maximum(rs * rs - r2, 0.0)) - (rs - h), 0.0)
    spec = sfft.rfft2(t)
    fy = np.abs(sfft.fftfreq(n, pitch)) > band_limit
    fx = sfft.rfftfreq(n, pitch) > band_limit
    spec[fy, :] = 0
    spec[:, fx] = 0
    blurred = sfft.irfft2(spec, s=t.shape)
    c = n // 2
    return float(ndimage.median_filter(blurred[c - 3:c + 3, c - 3:c + 3], size=3, mode="nearest").max())


def band_limited_height(V: float, h: float, pitch: float, band_limit: float) -> float:
    """Cap height whose band-limited, median-filtered peak equals the measured h.

    The recovered phase carries no spatial frequency above ``band_limit``
    (cycles/um), which flattens the apex of small caps. Holding the volume
    fixed, the contact radius is shrunk until a cap of that volume, seen
    through the same band limit, peaks at the measured height. The measured
    h is returned when it is already consistent.
    """
    if not (V > 0 and h > 0):
        raise InvalidInputError(f"need V > 0 and h > 0, got V={V!r}, h={h!r}")
    a0_sq = (6 * V / (math.pi * h) - h * h) / 3
    if a0_sq <= 0:
        return h
    a0 = math.sqrt(a0_sq)

    def gap(a: float) -> float:
        return _observed_peak(a, cap_height(V, a), pitch, band_limit) - h

    if gap(a0) >= 0:
        return h
    lo = a0
    for _ in range(30):
        lo *= 0.85
        if gap(lo) >= 0:
            break
    else:
        return h
    return cap_height(V, brentq(gap, lo, a0, xtol=1e-4 * a0))


def particle_diameter(region: np.ndarray, config: OpticalConfig, pitch: float | None = None) -> float:
    """Equivalent-area contact diameter in um."""
    area = int(np.count_nonzero(region))
    if area == 0:
        raise InvalidInputError("empty region")
    p = _pitch(config, pitch)
    return 2.0 * math.sqrt(area * p * p / math.pi)


def fit_decay_rate(
    series: Sequence[tuple[float, float]],
    particle_id: int = 0,
    min_points: int = MIN_TRACE_FRAMES,
) -> VolatilityFit:
    """Ordinary least squares of theta on t; K is minus the slope.

    r^2 is reported as 0 for a series with no variance in theta.
    """
    data = np.asarray(series, float)
    if data.ndim != 2 or data.shape[0] < min_points:
        raise InsufficientDataError(f"need at least {min_points} (t, theta) points")
    t, theta = data[:, 0], data[:, 1]
    dt = t - t.mean()
    sxx = float(dt @ dt)
    if sxx == 0:
        raise InvalidInputError("all timestamps are equal")
    if np.any(np.diff(t) <= 0):
        raise InvalidInputError("timestamps must be strictly increasing")
    dth = theta - theta.mean()
    slope = float(dt @ dth) / sxx
    intercept = float(theta.mean() - slope * t.mean())
    syy = float(dth @ dth)
    if syy == 0:
        r2 = 0.0
    else:
        resid = theta - (intercept + slope * t)
        r2 = min(1.0, max(0.0, 1.0 - float(resid @ resid) / syy))
    return VolatilityFit(particle_id, intercept, -slope, r2, int(data.shape[0]))


def unwrapped_phase(field: np.ndarray, background: np.ndarray | None = None) -> np.ndarray:
    """Unwrapped phase of a crop, offset so the background sits at zero.

    ``background`` marks pixels known to be empty substrate (default: the
    one-pixel crop border). Only whole 2*pi turns are removed; the
    reconstruction already references empty substrate to zero phase.
    """
    ph = unwrap_phase(np.angle(field))
    if background is None or not np.any(background):
        background = np.ones(ph.shape, bool)
        background[1:-1, 1:-1] = False
    ref = float(np.median(ph[background]))
    return ph - 2 * np.pi * round(ref / (2 * np.pi))


def measure_frame(
    field: np.ndarray,
    region: np.ndarray,
    config: OpticalConfig,
    timestamp: float = 0.0,
    frame_index: int = 0,
    pitch: float | None = None,
    band_limit: float | None = None,
) -> DropletGeometry:
    """Volume, height and contact angle of the droplet in one crop.

    With ``band_limit`` (cycles/um) the peak height is corrected for the
    apex flattening of a band-limited reconstruction.
    """
    region = np.asarray(region, bool)
    phase = unwrapped_phase(field, ~ndimage.binary_dilation(region, iterations=3))
    clamped = int(np.count_nonzero(phase[region] < 0))
    V = particle_volume(phase, region, config, pitch)
    h = particle_height(phase, region, config)
    if band_limit is not None and V > 0 and h > 0:
        h = band_limited_height(V, h, _pitch(config, pitch), band_limit)
    theta = contact_angle(V, h)
    return DropletGeometry(V, h, theta, timestamp, frame_index, clamped)
