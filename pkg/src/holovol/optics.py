"""Scalar wave optics: angular spectrum propagation and Fourier upsampling.

Frequency layout is the FFT-native one (DC at index 0, negative frequencies
in the upper half, Nyquist on the negative side for even sizes). Upsampling
re-indexes each signed frequency into the larger grid explicitly, so the
result does not depend on any fftshift convention.

Units: lengths in micrometres, except ``OpticalConfig.wavelength`` which is
given in nanometres to match how sources are specified.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.fft as sfft

from .errors import InvalidInputError

__all__ = [
    "OpticalConfig",
    "ComplexField",
    "AngularSpectrum",
    "propagate_angular_spectrum",
    "upsample_pad",
    "field_energy",
    "pad_to",
    "evanescent_free",
]


@dataclass(frozen=True)
class OpticalConfig:
    wavelength: float = 850.0  # nm
    sensor_pitch: float = 1.12  # um
    delta_n: float = 0.4
    z_nominal: float = 750.0  # um
    frame_rate: float = 2.0  # Hz
    upsample_factor: int = 2

    def __post_init__(self):
        for name in ("wavelength", "sensor_pitch", "delta_n", "frame_rate"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise InvalidInputError(f"{name} must be positive, got {value!r}")
        if not np.isfinite(self.z_nominal):
            raise InvalidInputError("z_nominal must be finite")
        if int(self.upsample_factor) != self.upsample_factor or self.upsample_factor < 1:
            raise InvalidInputError(
                f"upsample_factor must be a positive integer, got {self.upsample_factor!r}"
            )

    @property
    def wavelength_um(self) -> float:
        return self.wavelength * 1e-3

    @property
    def recon_pitch(self) -> float:
        """Pixel pitch of reconstructed fields (sensor pitch / upsample factor)."""
        return self.sensor_pitch / self.upsample_factor

    @property
    def phase_to_thickness(self) -> float:
        """Multiply an optical phase (rad) by this to get a thickness in um."""
        return self.wavelength_um / (2 * np.pi * self.delta_n)

    @property
    def wrap_limit(self) -> float:
        """Tallest cap (um) whose phase stays below 2*pi."""
        return self.wavelength_um / self.delta_n


@dataclass(frozen=True)
class ComplexField:
    grid: np.ndarray
    pitch: float
    z_tag: float | None = None
    _checked: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        grid = np.asarray(self.grid)
        if grid.ndim != 2 or grid.shape[0] < 2 or grid.shape[1] < 2:
            raise InvalidInputError(f"field grid must be 2-D and at least 2x2, got {grid.shape}")
        if not np.iscomplexobj(grid):
            grid = grid.astype(np.complex128)
        if not self._checked and not np.isfinite(grid).all():
            raise InvalidInputError("field contains non-finite samples")
        if not np.isfinite(self.pitch) or self.pitch <= 0:
            raise InvalidInputError(f"pitch must be positive, got {self.pitch!r}")
        object.__setattr__(self, "grid", grid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def amplitude(self) -> np.ndarray:
        return np.abs(self.grid)

    @property
    def phase(self) -> np.ndarray:
        return np.angle(self.grid)


def _trusted(grid: np.ndarray, pitch: float, z_tag: float | None) -> ComplexField:
    # outputs of finite-input operations are finite; skip the O(N) recheck
    return ComplexField(grid, pitch, z_tag, _checked=True)


def field_energy(field: ComplexField) -> float:
    """Return sum(|u|^2) * pitch^2."""
    return float(np.sum(np.abs(field.grid) ** 2) * field.pitch**2)


@lru_cache(maxsize=16)
def _axial_frequency(shape: tuple[int, int], pitch: float, wavelength_um: float):
    fy = sfft.fftfreq(shape[0], d=pitch)
    fx = sfft.fftfreq(shape[1], d=pitch)
    arg = 1.0 / wavelength_um**2 - fy[:, None] ** 2 - fx[None, :] ** 2
    propagating = arg > 0
    kz = np.sqrt(np.where(propagating, arg, 0.0))
    kz.setflags(write=False)
    propagating.setflags(write=False)
    return kz, propagating


class AngularSpectrum:
    """Transfer-function factory for one grid shape, pitch and wavelength.

    Reusing an instance across many distances (autofocus sweeps, iterative
    retrieval) avoids recomputing the axial frequency map.
    """

    def __init__(self, shape: tuple[int, int], pitch: float, wavelength_um: float):
        self.shape = tuple(shape)
        self.pitch = float(pitch)
        self.wavelength_um = float(wavelength_um)
        self.kz, self.propagating = _axial_frequency(self.shape, self.pitch, self.wavelength_um)

    @property
    def has_evanescent(self) -> bool:
        return not bool(self.propagating.all())

    def transfer(self, distance: float, dtype=np.complex128, relative: bool = False) -> np.ndarray:
        """exp(i 2 pi z kz) on the propagating band, 0 elsewhere.

        ``relative=True`` drops the plane-wave carrier exp(i 2 pi z / lambda),
        so a uniform field keeps zero phase.
        """
        kz = self.kz - 1.0 / self.wavelength_um if relative else self.kz
        h = np.exp((2j * np.pi * distance) * kz)
        h[~self.propagating] = 0
        return h.astype(dtype, copy=False)

    def apply(self, grid: np.ndarray, distance: float, relative: bool = False) -> np.ndarray:
        spectrum = sfft.fft2(grid)
        spectrum *= self.transfer(distance, spectrum.dtype, relative)
        return sfft.ifft2(spectrum)


def pad_to(grid: np.ndarray, shape: tuple[int, int], value) -> tuple[np.ndarray, tuple[slice, slice]]:
    """Center ``grid`` in an array of ``shape`` filled with ``value``."""
    ny, nx = grid.shape
    py, px = shape
    if py < ny or px < nx:
        raise InvalidInputError("padded shape smaller than the grid")
    y0 = (py - ny) // 2
    x0 = (px - nx) // 2
    out = np.full(shape, value, dtype=grid.dtype)
    window = (slice(y0, y0 + ny), slice(x0, x0 + nx))
    out[window] = grid
    return out, window


def padded_shape(shape: tuple[int, int], pad_factor: float) -> tuple[int, int]:
    if pad_factor < 1:
        raise InvalidInputError(f"pad_factor must be >= 1, got {pad_factor}")
    if pad_factor == 1:
        return tuple(shape)
    return tuple(sfft.next_fast_len(int(np.ceil(n * pad_factor))) for n in shape)


def propagate_angular_spectrum(
    field: ComplexField,
    distance: float,
    config: OpticalConfig,
    pad_factor: float = 1.0,
    relative: bool = False,
) -> ComplexField:
    """Propagate ``field`` by ``distance`` um (negative values back-propagate).

    With ``pad_factor == 1`` the field is treated as periodic and the operator
    is exactly unitary on the propagating band. Larger factors embed the field
    in a frame filled with its mean value before propagation and crop the
    result back, which suppresses wrap-around from the circular convolution.
    Evanescent spatial frequencies are zeroed. ``relative=True`` removes the
    plane-wave carrier phase 2*pi*z/lambda.
    """
    if not np.isfinite(distance):
        raise InvalidInputError(f"propagation distance must be finite, got {distance!r}")
    grid = field.grid
    z_tag = None if field.z_tag is None else field.z_tag + distance
    if distance == 0:
        return _trusted(grid.copy(), field.pitch, z_tag)
    shape = padded_shape(grid.shape, pad_factor)
    if shape != grid.shape:
        work, window = pad_to(grid, shape, grid.mean())
    else:
        work, window = grid, (slice(None), slice(None))
    asm = AngularSpectrum(shape, field.pitch, config.wavelength_um)
    out = asm.apply(work, distance, relative)[window]
    return _trusted(np.ascontiguousarray(out), field.pitch, z_tag)


def _reindex_axis(n: int, factor: int) -> np.ndarray:
    """Positions of the n FFT-ordered frequency bins inside a factor*n grid."""
    k = np.rint(sfft.fftfreq(n) * n).astype(int)  # signed integer frequency
    return np.where(k >= 0, k, k + factor * n)


def upsample_pad(field: ComplexField, factor: int) -> ComplexField:
    """Band-limited upsampling by zero padding the spectrum.

    Values at the original sample sites are reproduced exactly for
    band-limited inputs, and total energy (sum |u|^2 pitch^2) is preserved.
    An even-size Nyquist bin is kept whole on the negative-frequency side,
    which is what preserves energy.
    """
    if int(factor) != factor or factor < 1:
        raise InvalidInputError(f"upsample factor must be a positive integer, got {factor!r}")
    factor = int(factor)
    if factor == 1:
        return _trusted(field.grid.copy(), field.pitch, field.z_tag)
    ny, nx = field.shape
    spectrum = sfft.fft2(field.grid)
    big = np.zeros((factor * ny, factor * nx), dtype=spectrum.dtype)
    iy = _reindex_axis(ny, factor)
    ix = _reindex_axis(nx, factor)
    big[np.ix_(iy, ix)] = spectrum
    out = sfft.ifft2(big) * (factor * factor)
    return _trusted(out, field.pitch / factor, field.z_tag)


def evanescent_free(grid: np.ndarray, pitch: float, wavelength_um: float) -> np.ndarray:
    """Remove the evanescent part of ``grid``'s spectrum (test helper)."""
    _, propagating = _axial_frequency(tuple(grid.shape), float(pitch), float(wavelength_um))
    spectrum = sfft.fft2(grid)
    spectrum[~propagating] = 0
    return sfft.ifft2(spectrum)

