"""Hologram reconstruction: back-propagation, autofocus and phase retrieval.

Phase retrieval is support-constrained error reduction. It alternates
between the sensor plane, where the measured amplitude replaces the
estimate's amplitude, and the object plane, where pixels outside a support
are reset to the empty-substrate field (amplitude 1, phase 0) and pixels
inside are kept at amplitude <= 1. Both constraint sets admit exact
projections and the propagator is unitary, so the sensor-plane residual
never increases; a rise beyond round-off is treated as a bug.

Projections run at sensor pitch. There the spatial-frequency square lies
inside the propagating disk (for the default 850 nm / 1.12 um), so no
spectral content is discarded between planes. The retrieved object field
is then upsampled in the Fourier domain to the reconstruction pitch.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import scipy.fft as sfft
from scipy import ndimage

from .errors import ContractViolationError, InvalidInputError, NoContentError
from .optics import (
    AngularSpectrum,
    ComplexField,
    OpticalConfig,
    pad_to,
    padded_shape,
    upsample_pad,
)
from .preprocess import NormalizedHologram

log = logging.getLogger(__name__)

MONOTONE_SLACK = 1e-9
_GOLDEN = (math.sqrt(5) - 1) / 2


@dataclass(frozen=True)
class ReconSettings:
    z_search: tuple[float, float, float] = (550.0, 950.0, 10.0)
    gs_iterations: int = 50
    gs_tolerance: float = 1e-4
    patch_size: int = 512
    support_threshold_sigma: float = 3.0
    tile_overlap: int = 32
    pad_factor: float = 2.0
    refine_tolerance: float = 0.1  # um, golden-section stopping width
    focus_iterations: int = 10
    focus_window: int = 256  # side of the hologram tile used for autofocus

    def __post_init__(self):
        lo, hi, step = (float(v) for v in self.z_search)
        object.__setattr__(self, "z_search", (lo, hi, step))
        if not lo < hi:
            raise InvalidInputError("z_search needs min < max")
        if not step > 0:
            raise InvalidInputError("z_search step must be positive")
        if self.gs_iterations < 1:
            raise InvalidInputError("gs_iterations must be >= 1")
        p = self.patch_size
        if p < 8 or p & (p - 1):
            raise InvalidInputError("patch_size must be a power of two >= 8")
        if not 0 <= self.tile_overlap < p:
            raise InvalidInputError("tile_overlap must be in [0, patch_size)")
        if self.pad_factor < 1:
            raise InvalidInputError("pad_factor must be >= 1")
        if self.focus_window < 8:
            raise InvalidInputError("focus_window must be >= 8")

    def candidates(self) -> np.ndarray:
        lo, hi, step = self.z_search
        n = int(math.floor((hi - lo) / step + 1e-9)) + 1
        return lo + step * np.arange(n)


@dataclass(frozen=True)
class RecoveredField:
    field: ComplexField
    z_focus: float
    residual: float
    timestamp: float = 0.0
    residual_history: tuple[float, ...] = field(default=(), compare=False)
    iterations: int = 0

    @property
    def phase(self) -> np.ndarray:
        return self.field.phase


def _amplitude(holo: NormalizedHologram) -> np.ndarray:
    px = holo.pixels
    if not np.isfinite(px).all():
        raise InvalidInputError("hologram has non-finite pixels")
    if px.min() < 0:
        raise InvalidInputError("hologram has negative intensity")
    return np.sqrt(px)


def _is_blank(holo: NormalizedHologram) -> bool:
    px = holo.pixels
    return float(px.max() - px.min()) <= 1e-12 * max(1.0, float(np.abs(px).max()))


def backpropagate(
    holo: NormalizedHologram, z: float, config: OpticalConfig, pad_factor: float = 2.0
) -> ComplexField:
    """Upsampled field at distance ``z`` behind the sensor (zero sensor phase).

    The plane-wave carrier is dropped so empty substrate has zero phase.
    """
    if not z > 0:
        raise InvalidInputError(f"back-propagation distance must be positive, got {z!r}")
    amp = ComplexField(_amplitude(holo), config.sensor_pitch, z)
    up = upsample_pad(amp, config.upsample_factor)
    shape = padded_shape(up.shape, pad_factor)
    work, window = pad_to(up.grid, shape, up.grid.mean())
    asm = AngularSpectrum(shape, up.pitch, config.wavelength_um)
    out = asm.apply(work, -z, relative=True)[window]
    return ComplexField(np.ascontiguousarray(out), up.pitch, 0.0, _checked=True)


def focus_metric(field: ComplexField) -> float:
    """Tamura coefficient sqrt(std/mean) of the Sobel gradient of amplitude."""
    amp = np.abs(field.grid)
    gx = ndimage.sobel(amp, axis=1, mode="reflect")
    gy = ndimage.sobel(amp, axis=0, mode="reflect")
    grad = np.hypot(gx, gy)
    mean = grad.mean()
    if mean <= 1e-300:
        return 0.0
    return float(math.sqrt(grad.std() / mean))


class _FocusSweep:
    """Back-propagates one hologram window to many distances cheaply."""

    def __init__(self, holo: NormalizedHologram, config: OpticalConfig, pad_factor: float):
        amp = ComplexField(_amplitude(holo), config.sensor_pitch)
        up = upsample_pad(amp, config.upsample_factor)
        shape = padded_shape(up.shape, pad_factor)
        work, self.window = pad_to(up.grid, shape, up.grid.mean())
        self.spectrum = sfft.fft2(work)
        self.asm = AngularSpectrum(shape, up.pitch, config.wavelength_um)
        self.pitch = up.pitch
        self._cache: dict[float, float] = {}

    def field(self, z: float) -> ComplexField:
        out = sfft.ifft2(self.spectrum * self.asm.transfer(-z, relative=True))[self.window]
        return ComplexField(out, self.pitch, 0.0, _checked=True)

    def __call__(self, z: float) -> float:
        z = float(z)
        if z not in self._cache:
            self._cache[z] = focus_metric(self.field(z))
        return self._cache[z]


def _tile_starts(n: int, patch: int, overlap: int) -> list[int]:
    if n <= patch:
        return [0]
    count = math.ceil((n - overlap) / (patch - overlap))
    return sorted({int(round(s)) for s in np.linspace(0, n - patch, count)})


def _tiles(shape: tuple[int, int], patch: int, overlap: int):
    ny, nx = shape
    for y0 in _tile_starts(ny, patch, overlap):
        for x0 in _tile_starts(nx, patch, overlap):
            yield slice(y0, min(y0 + patch, ny)), slice(x0, min(x0 + patch, nx))


def _focus_window(holo: NormalizedHologram, settings: ReconSettings) -> NormalizedHologram:
    """Tile with the most hologram structure (highest variance)."""
    best, best_var = None, -1.0
    size = min(settings.focus_window, settings.patch_size)
    for tile in _tiles(holo.shape, size, min(settings.tile_overlap, size // 2)):
        var = float(holo.pixels[tile].var())
        if var > best_var:
            best, best_var = tile, var
    return holo.window(*best)


def _golden_max(f, lo: float, hi: float, tol: float) -> float:
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    return (a + b) / 2


class _ResidualScore:
    """Negative error-reduction residual after a fixed number of iterations.

    A wrong distance leaves the support constraint inconsistent with the
    measured amplitude, so the residual is lowest at the true object plane.
    """

    def __init__(self, holo: NormalizedHologram, settings: ReconSettings, config: OpticalConfig):
        self.amplitude = _amplitude(holo)
        self.settings = replace(settings, gs_iterations=settings.focus_iterations, gs_tolerance=0.0)
        self.config = config
        self._cache: dict[float, float] = {}

    def __call__(self, z: float) -> float:
        z = float(z)
        if z not in self._cache:
            res = _error_reduction(
                self.amplitude, z, self.settings, self.config, self.settings.pad_factor
            )
            self._cache[z] = -res.history[-1]
        return self._cache[z]


def autofocus(
    holo: NormalizedHologram,
    settings: ReconSettings,
    config: OpticalConfig,
    criterion: str = "residual",
) -> float:
    """Sample-to-sensor distance (um) of the in-focus object plane.

    A coarse scan over ``settings.z_search`` is refined by golden-section
    search within one step of the best candidate (clipped to the scan range).
    ``criterion="residual"`` scores each distance by the phase-retrieval
    residual; ``"tamura"`` uses :func:`focus_metric` on the back-propagated
    amplitude, which is cheaper but drifts by 10-30 um on transparent caps.
    """
    zs = settings.candidates()
    if zs.size == 0:
        raise InvalidInputError("empty autofocus search range")
    if zs.size == 1:
        return float(zs[0])
    if _is_blank(holo):
        raise NoContentError("blank hologram: nothing to focus on")
    window = _focus_window(holo, settings)
    if criterion == "residual":
        score = _ResidualScore(window, settings, config)
    elif criterion == "tamura":
        score = _FocusSweep(window, config, settings.pad_factor)
    else:
        raise InvalidInputError(f"unknown focus criterion {criterion!r}")
    scores = np.array([score(z) for z in zs])
    if float(scores.max() - scores.min()) <= 1e-12:
        raise NoContentError("focus score is flat across the search range")
    i = int(np.argmax(scores))
    step = settings.z_search[2]
    lo = max(float(zs[i]) - step, float(zs[0]))
    hi = min(float(zs[i]) + step, float(zs[-1]))
    z = _golden_max(score, lo, hi, settings.refine_tolerance)
    # never return something worse than the coarse winner
    return z if score(z) >= scores[i] else float(zs[i])


def _robust(values: np.ndarray) -> tuple[float, float]:
    med = float(np.median(values))
    return med, 1.4826 * float(np.median(np.abs(values - med)))


def object_support(field: np.ndarray, sigma: float, stats_region=None) -> np.ndarray:
    """Pixels whose amplitude or phase departs from background by > sigma.

    Background level and spread are median / 1.4826*MAD, taken over
    ``stats_region`` (default: whole array). Isolated single pixels are
    dropped and the rest dilated by one pixel to catch weak cap edges.
    """
    ref = field if stats_region is None else field[stats_region]
    amp, ph = np.abs(field), np.angle(field)
    support = np.zeros(field.shape, bool)
    for full, sample in ((amp, np.abs(ref)), (ph, np.angle(ref))):
        med, scale = _robust(sample)
        thresh = max(sigma * scale, 1e-9)
        support |= np.abs(full - med) > thresh
    if support.any():
        labels, n = ndimage.label(support, structure=np.ones((3, 3)))
        sizes = np.bincount(labels.ravel(), minlength=n + 1)
        keep = sizes >= 2
        keep[0] = False
        support = keep[labels]
        support = ndimage.binary_dilation(support, structure=np.ones((3, 3)))
    return support


@dataclass
class _GSResult:
    field: np.ndarray  # object-plane field on the padded domain
    window: tuple[slice, slice]
    history: list[float]
    initial: np.ndarray


def _error_reduction(
    amplitude: np.ndarray, z: float, settings: ReconSettings, config: OpticalConfig,
    pad_factor: float,
) -> _GSResult:
    shape = padded_shape(amplitude.shape, pad_factor)
    asm = AngularSpectrum(shape, config.sensor_pitch, config.wavelength_um)
    fwd = asm.transfer(z, relative=True)
    back = asm.transfer(-z, relative=True)
    sensor, window = pad_to(amplitude.astype(np.complex128), shape, amplitude.mean())
    measured = amplitude
    norm = math.sqrt(float(np.mean(measured**2)))
    if norm == 0:
        raise InvalidInputError("hologram is entirely dark")

    obj = sfft.ifft2(sfft.fft2(sensor) * back)
    initial = obj.copy()
    support = object_support(obj, settings.support_threshold_sigma, window)
    outside = ~support
    history: list[float] = []
    for _ in range(settings.gs_iterations):
        # object-plane projection
        est = obj
        est[outside] = 1.0
        mag = np.abs(est)
        over = support & (mag > 1.0)
        est[over] /= mag[over]
        # forward, measure, project onto the measured amplitude
        g = sfft.ifft2(sfft.fft2(est) * fwd)
        gw = g[window]
        gmag = np.abs(gw)
        residual = math.sqrt(float(np.mean((gmag - measured) ** 2))) / norm
        if history and residual > history[-1] + MONOTONE_SLACK:
            raise ContractViolationError(
                f"error-reduction residual rose from {history[-1]:.3e} to {residual:.3e}"
            )
        history.append(residual)
        unit = np.divide(gw, gmag, out=np.ones_like(gw), where=gmag > 0)
        g[window] = measured * unit
        obj = sfft.ifft2(sfft.fft2(g) * back)
        if residual <= 1e-12:
            break
        if len(history) > 1 and history[-2] - residual < settings.gs_tolerance:
            break
    return _GSResult(obj, window, history, initial)


def _upsample_window(full: np.ndarray, window, factor: int, pitch: float, margin: int = 16):
    """Fourier-upsample ``full[window]`` using a margin of context if available."""
    ys, xs = window
    ny, nx = full.shape
    my = min(margin, ys.start, ny - ys.stop)
    mx = min(margin, xs.start, nx - xs.stop)
    sub = full[ys.start - my: ys.stop + my, xs.start - mx: xs.stop + mx]
    up = upsample_pad(ComplexField(sub, pitch, _checked=True), factor).grid
    hy = (ys.stop - ys.start) * factor
    hx = (xs.stop - xs.start) * factor
    return up[my * factor: my * factor + hy, mx * factor: mx * factor + hx]


def phase_recover_gs(
    holo: NormalizedHologram, z: float, settings: ReconSettings, config: OpticalConfig
) -> RecoveredField:
    """Support-constrained error reduction on one hologram patch."""
    if not z > 0:
        raise InvalidInputError(f"object distance must be positive, got {z!r}")
    amplitude = _amplitude(holo)
    res = _error_reduction(amplitude, z, settings, config, settings.pad_factor)
    grid = _upsample_window(res.field, res.window, config.upsample_factor, config.sensor_pitch)
    grid = np.ascontiguousarray(grid)
    return RecoveredField(
        ComplexField(grid, config.recon_pitch, 0.0, _checked=True),
        float(z),
        res.history[-1],
        holo.timestamp,
        tuple(res.history),
        len(res.history),
    )


def _ramp(n: int, overlap: int, low_edge: bool, high_edge: bool) -> np.ndarray:
    w = np.ones(n)
    if overlap > 0:
        ramp = (np.arange(overlap) + 0.5) / overlap
        if low_edge:
            w[:overlap] = np.minimum(w[:overlap], ramp)
        if high_edge:
            w[n - overlap:] = np.minimum(w[n - overlap:], ramp[::-1])
    return w


def reconstruct_frame(
    holo: NormalizedHologram, z: float, settings: ReconSettings, config: OpticalConfig
) -> RecoveredField:
    """Tile ``holo``, recover each tile and feather-blend the results."""
    f = config.upsample_factor
    ny, nx = holo.shape
    if _is_blank(holo):
        level = math.sqrt(max(float(holo.pixels.flat[0]), 0.0))
        grid = np.full((ny * f, nx * f), level, dtype=np.complex128)
        return RecoveredField(
            ComplexField(grid, config.recon_pitch, 0.0, _checked=True), float(z), 0.0,
            holo.timestamp, (0.0,), 1,
        )
    tiles = list(_tiles(holo.shape, settings.patch_size, settings.tile_overlap))
    if len(tiles) == 1:
        rec = phase_recover_gs(holo, z, settings, config)
        return rec
    acc = np.zeros((ny * f, nx * f), dtype=np.complex128)
    wsum = np.zeros((ny * f, nx * f))
    residual = 0.0
    iterations = 0
    ov = settings.tile_overlap * f
    for ys, xs in tiles:
        rec = phase_recover_gs(holo.window(ys, xs), z, settings, config)
        wy = _ramp((ys.stop - ys.start) * f, ov, ys.start > 0, ys.stop < ny)
        wx = _ramp((xs.stop - xs.start) * f, ov, xs.start > 0, xs.stop < nx)
        w = wy[:, None] * wx[None, :]
        out = (slice(ys.start * f, ys.stop * f), slice(xs.start * f, xs.stop * f))
        acc[out] += w * rec.field.grid
        wsum[out] += w
        residual = max(residual, rec.residual)
        iterations = max(iterations, rec.iterations)
    grid = acc / wsum
    return RecoveredField(
        ComplexField(grid, config.recon_pitch, 0.0, _checked=True), float(z), residual,
        holo.timestamp, (), iterations,
    )


def find_focus(
    frames: Iterable[NormalizedHologram], settings: ReconSettings, config: OpticalConfig
) -> float:
    """Autofocus on the first frame that is not blank."""
    for holo in frames:
        if _is_blank(holo):
            continue
        try:
            return autofocus(holo, settings, config)
        except NoContentError:
            continue
    raise NoContentError("every frame in the stack is blank")


def reconstruct_stack(
    frames: Sequence[NormalizedHologram],
    settings: ReconSettings,
    config: OpticalConfig,
    executor=None,
) -> list[RecoveredField]:
    """Recover every frame at one shared focus distance, preserving order."""
    if not frames:
        raise InvalidInputError("need at least one frame")
    z = find_focus(frames, settings, config)
    log.info("stack focus at z = %.2f um", z)
    if executor is None:
        return [reconstruct_frame(h, z, settings, config) for h in frames]
    return list(executor.map(lambda h: reconstruct_frame(h, z, settings, config), frames))
