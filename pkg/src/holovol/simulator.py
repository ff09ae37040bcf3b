"""Forward model for time-lapsed inline holograms of evaporating droplets.

Droplets are sessile spherical caps that evaporate with a fixed contact
radius while the contact angle falls linearly in time. Each frame renders
the caps as a pure phase object, propagates it to the sensor, integrates the
intensity over 2x2 sub-pixels and applies the sensor response (shade,
Bayer gains, shot noise, quantisation).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np
from numpy.polynomial import polynomial as P

from .errors import InvalidInputError, WrapLimitError
from .optics import ComplexField, OpticalConfig, propagate_angular_spectrum

THETA_MIN = 0.01  # rad; caps flatter than this count as evaporated


class Layout(str, Enum):
    MONO = "mono"
    BAYER = "bayer"


@dataclass(frozen=True)
class DropletCap:
    center: tuple[float, float]
    contact_radius_a: float
    theta0: float
    decay_rate_K: float = 0.0
    id: int = 0
    theta: float | None = None  # current contact angle; theta0 when unset

    def __post_init__(self):
        if not self.contact_radius_a > 0:
            raise InvalidInputError(f"droplet {self.id}: contact radius must be positive")
        if not 0 < self.theta0 < math.pi:
            raise InvalidInputError(f"droplet {self.id}: theta0 must lie in (0, pi)")
        if not self.decay_rate_K >= 0:
            raise InvalidInputError(f"droplet {self.id}: decay rate must be >= 0")

    @property
    def angle(self) -> float:
        return self.theta0 if self.theta is None else self.theta

    @property
    def height(self) -> float:
        return cap_height(self.contact_radius_a, self.angle)

    @property
    def volume(self) -> float:
        return cap_volume(self.contact_radius_a, self.height)

    def extinction_time(self, theta_min: float = THETA_MIN) -> float:
        if self.decay_rate_K == 0:
            return math.inf
        return (self.theta0 - theta_min) / self.decay_rate_K


def cap_height(a: float, theta: float) -> float:
    return a * math.tan(theta / 2)


def cap_volume(a: float, h: float) -> float:
    return math.pi * h / 6 * (3 * a * a + h * h)


@dataclass(frozen=True)
class Scene:
    droplets: tuple[DropletCap, ...]
    field_of_view: tuple[float, float]  # (width, height) um
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "droplets", tuple(self.droplets))
        w, h = self.field_of_view
        if not (w > 0 and h > 0):
            raise InvalidInputError("field of view must be positive")
        for d in self.droplets:
            x, y = d.center
            a = d.contact_radius_a
            if x - a < 0 or y - a < 0 or x + a > w or y + a > h:
                raise InvalidInputError(f"droplet {d.id}: contact disk leaves the field of view")
        ids = [d.id for d in self.droplets]
        if len(set(ids)) != len(ids):
            raise InvalidInputError("droplet ids must be unique")
        if len(self.droplets) > 1:
            xy = np.array([d.center for d in self.droplets])
            r = np.array([d.contact_radius_a for d in self.droplets])
            dist = np.hypot(*(xy[:, None, :] - xy[None, :, :]).transpose(2, 0, 1))
            clash = dist < r[:, None] + r[None, :]
            np.fill_diagonal(clash, False)
            if clash.any():
                i, j = np.argwhere(clash)[0]
                raise InvalidInputError(
                    f"droplets {self.droplets[i].id} and {self.droplets[j].id} overlap"
                )


@dataclass(frozen=True)
class SensorModel:
    channel_gains: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    shade_poly_coeffs: tuple[tuple[float, ...], ...] = ((1.0,),)
    shot_noise_scale: float = 0.0
    bit_depth: int = 16
    layout: Layout = Layout.MONO

    def __post_init__(self):
        gains = tuple(float(g) for g in self.channel_gains)
        if len(gains) != 4 or min(gains) <= 0:
            raise InvalidInputError("channel_gains needs four positive values")
        object.__setattr__(self, "channel_gains", gains)
        coeffs = tuple(tuple(float(c) for c in row) for row in self.shade_poly_coeffs)
        object.__setattr__(self, "shade_poly_coeffs", coeffs)
        object.__setattr__(self, "layout", Layout(self.layout))
        if self.shot_noise_scale < 0:
            raise InvalidInputError("shot_noise_scale must be >= 0")
        if not 2 <= self.bit_depth <= 16:
            raise InvalidInputError("bit_depth must be between 2 and 16")

    @property
    def unit_level(self) -> int:
        """Digital number that unit relative intensity quantises to."""
        return 1 << (self.bit_depth - 2)

    def shade(self, shape: tuple[int, int]) -> np.ndarray:
        """Evaluate the shade polynomial on normalised coordinates in [-1, 1]."""
        coeffs = np.zeros((4, 4))
        for i, row in enumerate(self.shade_poly_coeffs):
            for j, c in enumerate(row):
                if c and i + j > 3:
                    raise InvalidInputError("shade polynomial degree must be <= 3")
                coeffs[i, j] = c
        ny, nx = shape
        # coeffs[i, j] multiplies x**i * y**j
        s = P.polygrid2d(np.linspace(-1, 1, nx), np.linspace(-1, 1, ny), coeffs).T
        if s.min() <= 0:
            raise InvalidInputError("shade must be positive everywhere")
        return s

    def gain_map(self, shape: tuple[int, int]) -> np.ndarray:
        g = np.ones(shape)
        if self.layout is Layout.BAYER:
            g00, g01, g10, g11 = self.channel_gains
            g[0::2, 0::2] = g00
            g[0::2, 1::2] = g01
            g[1::2, 0::2] = g10
            g[1::2, 1::2] = g11
        return g


@dataclass(frozen=True)
class RawFrame:
    pixels: np.ndarray
    timestamp: float = 0.0
    layout: Layout = Layout.MONO
    bit_depth: int = 16

    def __post_init__(self):
        object.__setattr__(self, "layout", Layout(self.layout))
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise InvalidInputError("raw frame must be 2-D")
        if not math.isfinite(self.timestamp):
            raise InvalidInputError("timestamp must be finite")
        if px.size and px.min() < 0:
            raise InvalidInputError("raw frame has negative pixels")
        if self.layout is Layout.BAYER and (px.shape[0] % 2 or px.shape[1] % 2):
            raise InvalidInputError("bayer frames need even dimensions")


@dataclass(frozen=True)
class Grid:
    """Pixel-centre sample grid; pixel (0, 0) is centred at ``origin``."""

    shape: tuple[int, int]
    pitch: float
    origin: tuple[float, float] = field(default=None)

    def __post_init__(self):
        if self.origin is None:
            object.__setattr__(self, "origin", (self.pitch / 2, self.pitch / 2))

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        x = self.origin[0] + self.pitch * np.arange(self.shape[1])
        y = self.origin[1] + self.pitch * np.arange(self.shape[0])
        return x, y

    @classmethod
    def for_fov(cls, fov: tuple[float, float], pitch: float) -> "Grid":
        w, h = fov
        nx, ny = w / pitch, h / pitch
        if abs(nx - round(nx)) > 1e-6 or abs(ny - round(ny)) > 1e-6:
            raise InvalidInputError(
                f"field of view {fov} is not a whole number of {pitch} um pixels"
            )
        return cls((int(round(ny)), int(round(nx))), pitch)


def evolve_scene(scene: Scene, t: float, theta_min: float = THETA_MIN) -> list[DropletCap]:
    """Droplet states at time ``t``; caps flatter than ``theta_min`` are dropped."""
    if not t >= 0:
        raise InvalidInputError(f"time must be >= 0, got {t!r}")
    out = []
    for d in scene.droplets:
        theta = max(d.theta0 - d.decay_rate_K * t, 0.0)
        if theta > theta_min:
            out.append(replace(d, theta=theta))
    return out


def _cap_patch(cap: DropletCap, grid: Grid):
    """Thickness of one cap restricted to its bounding box on ``grid``."""
    theta = cap.angle
    if not 0 < theta < math.pi:
        raise InvalidInputError(f"droplet {cap.id}: contact angle must lie in (0, pi)")
    a = cap.contact_radius_a
    h = cap_height(a, theta)
    R = (a * a + h * h) / (2 * h)
    x, y = grid.axes()
    cx, cy = cap.center
    jx = np.nonzero(np.abs(x - cx) <= a)[0]
    jy = np.nonzero(np.abs(y - cy) <= a)[0]
    if jx.size == 0 or jy.size == 0:
        return None
    sx = slice(jx[0], jx[-1] + 1)
    sy = slice(jy[0], jy[-1] + 1)
    r2 = (x[sx][None, :] - cx) ** 2 + (y[sy][:, None] - cy) ** 2
    inside = r2 <= a * a
    t = np.where(inside, np.sqrt(np.maximum(R * R - r2, 0.0)) - (R - h), 0.0)
    return (sy, sx), np.maximum(t, 0.0)


def cap_thickness_profile(cap: DropletCap, grid: Grid) -> np.ndarray:
    """Height map (um) of a spherical cap at its current contact angle."""
    out = np.zeros(grid.shape)
    patch = _cap_patch(cap, grid)
    if patch is not None:
        window, t = patch
        out[window] = t
    return out


def render_object_field(
    caps: Sequence[DropletCap], grid: Grid, config: OpticalConfig
) -> ComplexField:
    """Pure phase object with phase = 2*pi*dn*thickness/lambda."""
    limit = config.wrap_limit
    for cap in caps:
        if cap.height >= limit:
            raise WrapLimitError(cap.id, cap.height, limit)
    phase = np.zeros(grid.shape)
    k = 1.0 / config.phase_to_thickness
    for cap in caps:
        patch = _cap_patch(cap, grid)
        if patch is not None:
            window, t = patch
            phase[window] += k * t
    return ComplexField(np.exp(1j * phase), grid.pitch, 0.0)


def _bin2(img: np.ndarray) -> np.ndarray:
    ny, nx = img.shape
    return img.reshape(ny // 2, 2, nx // 2, 2).mean(axis=(1, 3))


def sensor_intensity(
    caps: Sequence[DropletCap],
    config: OpticalConfig,
    fov: tuple[float, float],
    pad_factor: float = 2.0,
) -> np.ndarray:
    """Noise-free relative intensity at sensor pitch (before shade and gains)."""
    sensor_grid = Grid.for_fov(fov, config.sensor_pitch)
    ny, nx = sensor_grid.shape
    if not caps:
        return np.ones((ny, nx))
    fine = Grid((2 * ny, 2 * nx), config.sensor_pitch / 2)
    obj = render_object_field(caps, fine, config)
    at_sensor = propagate_angular_spectrum(obj, config.z_nominal, config, pad_factor=pad_factor)
    return _bin2(np.abs(at_sensor.grid) ** 2)


def apply_sensor(
    intensity: np.ndarray, sensor: SensorModel, rng: np.random.Generator
) -> np.ndarray:
    """Shade, channel gains, shot noise and quantisation; returns uint16 counts."""
    signal = intensity * sensor.shade(intensity.shape) * sensor.gain_map(intensity.shape)
    s = sensor.shot_noise_scale
    if s > 0:
        # Poisson photon counts whose relative std at unit intensity is s
        signal = rng.poisson(signal / (s * s)) * (s * s)
    counts = np.rint(signal * sensor.unit_level)
    return np.clip(counts, 0, (1 << sensor.bit_depth) - 1).astype(np.uint16)


def synthesize_hologram(
    caps: Sequence[DropletCap],
    config: OpticalConfig,
    sensor: SensorModel,
    seed,
    fov: tuple[float, float],
    timestamp: float = 0.0,
    pad_factor: float = 2.0,
) -> RawFrame:
    if sensor.layout is Layout.BAYER:
        gx = fov[0] / config.sensor_pitch
        gy = fov[1] / config.sensor_pitch
        if round(gx) % 2 or round(gy) % 2:
            raise InvalidInputError("bayer sensor needs an even pixel count per side")
    intensity = sensor_intensity(caps, config, fov, pad_factor)
    rng = np.random.default_rng(seed)
    pixels = apply_sensor(intensity, sensor, rng)
    return RawFrame(pixels, timestamp, sensor.layout, sensor.bit_depth)


def frame_times(n_frames: int, frame_rate: float) -> np.ndarray:
    return np.arange(n_frames) / frame_rate


def simulate_sequence(
    scene: Scene,
    config: OpticalConfig,
    sensor: SensorModel,
    n_frames: int,
    pad_factor: float = 2.0,
    theta_min: float = THETA_MIN,
    executor=None,
) -> list[RawFrame]:
    """Render ``n_frames`` frames at ``k / frame_rate`` seconds.

    Frame ``k`` draws its noise from the seed pair ``(scene.seed, k)``, so
    frames can be rendered in any order (or concurrently via ``executor``)
    with identical results.
    """
    if n_frames < 1:
        raise InvalidInputError("n_frames must be >= 1")
    Grid.for_fov(scene.field_of_view, config.sensor_pitch)

    def render(k: int) -> RawFrame:
        return render_frame(scene, config, sensor, k, pad_factor, theta_min)

    if executor is None:
        return [render(k) for k in range(n_frames)]
    return list(executor.map(render, range(n_frames)))


def render_frame(
    scene: Scene,
    config: OpticalConfig,
    sensor: SensorModel,
    k: int,
    pad_factor: float = 2.0,
    theta_min: float = THETA_MIN,
) -> RawFrame:
    """Frame ``k`` of the sequence, independent of every other frame."""
    t = float(frame_times(k + 1, config.frame_rate)[k])
    caps = evolve_scene(scene, t, theta_min)
    return synthesize_hologram(
        caps, config, sensor, [scene.seed, k], scene.field_of_view, t, pad_factor
    )


def random_scene(
    n: int,
    fov: tuple[float, float],
    seed: int = 0,
    a_range: tuple[float, float] = (2.0, 6.0),
    theta_range: tuple[float, float] = (0.3, 0.8),
    K_mean: float = 0.045,
    K_std: float = 0.005,
    min_gap: float = 20.0,
    margin: float = 20.0,
    height_limit: float | None = None,
    max_tries: int = 100_000,
) -> Scene:
    """Draw ``n`` well separated droplets by rejection sampling.

    Disks keep ``min_gap`` um between edges and ``margin`` um from the frame
    border. Draws with cap height at or above ``height_limit`` (e.g. the
    phase-wrap limit) or with a non-positive K are rejected.
    """
    rng = np.random.default_rng(seed)
    w, h = fov
    caps: list[DropletCap] = []
    tries = 0
    while len(caps) < n:
        tries += 1
        if tries > max_tries:
            raise InvalidInputError(f"could not place {n} droplets in {fov} um")
        a = float(rng.uniform(*a_range))
        theta0 = float(rng.uniform(*theta_range))
        K = float(rng.normal(K_mean, K_std))
        x = float(rng.uniform(margin + a, w - margin - a))
        y = float(rng.uniform(margin + a, h - margin - a))
        if K <= 0 or (height_limit is not None and cap_height(a, theta0) >= height_limit):
            continue
        if any(math.hypot(x - c.center[0], y - c.center[1]) < a + c.contact_radius_a + min_gap
               for c in caps):
            continue
        caps.append(DropletCap((x, y), a, theta0, K, len(caps)))
    return Scene(tuple(caps), fov, seed)
