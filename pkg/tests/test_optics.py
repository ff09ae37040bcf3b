import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from holovol.errors import InvalidInputError
from holovol.optics import (
    ComplexField,
    OpticalConfig,
    evanescent_free,
    field_energy,
    propagate_angular_spectrum,
    upsample_pad,
)


def _random_field(rng, n=64, pitch=1.12, wavelength_um=0.85):
    grid = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    return ComplexField(evanescent_free(grid, pitch, wavelength_um), pitch)


def _rel_rms(a, b):
    return np.sqrt(np.mean(np.abs(a - b) ** 2) / np.mean(np.abs(b) ** 2))


def test_zero_distance_is_identity(rng, config):
    f = _random_field(rng)
    out = propagate_angular_spectrum(f, 0.0, config)
    assert _rel_rms(out.grid, f.grid) < 1e-12


def test_forward_back_round_trip(rng, config):
    f = _random_field(rng)
    there = propagate_angular_spectrum(f, 750.0, config)
    back = propagate_angular_spectrum(there, -750.0, config)
    assert _rel_rms(back.grid, f.grid) < 1e-9


def test_plane_wave_phase_matches_carrier(config):
    f = ComplexField(np.ones((16, 16), complex), 1.12)
    out = propagate_angular_spectrum(f, 0.85, config)  # one wavelength
    assert np.allclose(np.abs(out.grid), 1.0, atol=1e-12)
    assert np.max(np.abs(np.angle(out.grid))) < 1e-9
    z = 200.0
    out = propagate_angular_spectrum(f, z, config)
    expected = np.angle(np.exp(2j * np.pi * z / config.wavelength_um))
    assert np.allclose(np.angle(out.grid), expected, atol=1e-9)


def test_relative_propagation_keeps_plane_wave_flat(config):
    f = ComplexField(np.ones((16, 16), complex), 1.12)
    out = propagate_angular_spectrum(f, 123.4, config, relative=True)
    assert np.allclose(out.grid, 1.0, atol=1e-12)


def test_padded_propagation_keeps_uniform_field(config):
    f = ComplexField(np.full((20, 24), 2.0 + 0j), 1.12)
    out = propagate_angular_spectrum(f, 500.0, config, pad_factor=2, relative=True)
    assert out.shape == (20, 24)
    assert np.allclose(out.grid, 2.0, atol=1e-12)


def test_z_tag_accumulates(config):
    f = ComplexField(np.ones((8, 8), complex), 1.0, z_tag=10.0)
    assert propagate_angular_spectrum(f, -4.0, config).z_tag == 6.0


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_non_finite_samples_rejected(bad):
    g = np.ones((4, 4), complex)
    g[1, 2] = bad
    with pytest.raises(InvalidInputError):
        ComplexField(g, 1.0)


def test_degenerate_grids_rejected(config):
    with pytest.raises(InvalidInputError):
        ComplexField(np.zeros((0, 0), complex), 1.0)
    with pytest.raises(InvalidInputError):
        ComplexField(np.ones((4, 4)), 0.0)
    f = ComplexField(np.ones((4, 4)), 1.0)
    with pytest.raises(InvalidInputError):
        propagate_angular_spectrum(f, np.nan, config)
    with pytest.raises(InvalidInputError):
        propagate_angular_spectrum(f, 1.0, config, pad_factor=0.5)


def test_config_validation():
    with pytest.raises(InvalidInputError):
        OpticalConfig(wavelength=-1)
    with pytest.raises(InvalidInputError):
        OpticalConfig(upsample_factor=0)
    c = OpticalConfig()
    assert c.recon_pitch == pytest.approx(0.56)
    assert c.phase_to_thickness * np.pi == pytest.approx(1.0625)


def test_field_energy_closed_forms(rng, config):
    assert field_energy(ComplexField(np.zeros((8, 8)), 0.5)) == 0.0
    n, p = 12, 0.7
    assert field_energy(ComplexField(np.ones((n, n)), p)) == pytest.approx(n * n * p * p, rel=1e-12)
    f = _random_field(rng)
    out = propagate_angular_spectrum(f, 300.0, config)
    assert field_energy(out) == pytest.approx(field_energy(f), rel=1e-9)


def test_upsample_identity_and_constant():
    g = np.arange(16, dtype=complex).reshape(4, 4)
    f = ComplexField(g, 1.0)
    assert np.array_equal(upsample_pad(f, 1).grid, g)
    c = ComplexField(np.full((6, 8), 0.7 + 0j), 1.0)
    up = upsample_pad(c, 2)
    assert up.shape == (12, 16)
    assert up.pitch == 0.5
    assert np.allclose(up.grid, 0.7, atol=1e-9)


def test_upsample_sinusoid_is_exact_interpolation():
    n, factor = 32, 2
    x = np.arange(n)
    g = np.exp(2j * np.pi * 3 * x[None, :] / n) * np.cos(2 * np.pi * 5 * x[:, None] / n)
    up = upsample_pad(ComplexField(g, 1.0), factor)
    xf = np.arange(n * factor) / factor
    exact = np.exp(2j * np.pi * 3 * xf[None, :] / n) * np.cos(2 * np.pi * 5 * xf[:, None] / n)
    assert np.max(np.abs(up.grid - exact)) < 1e-9
    assert np.max(np.abs(up.grid[::factor, ::factor] - g)) < 1e-9


def test_upsample_rejects_bad_factor():
    f = ComplexField(np.ones((4, 4)), 1.0)
    for bad in (0, -1, 1.5):
        with pytest.raises(InvalidInputError):
            upsample_pad(f, bad)


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    n=st.sampled_from([16, 24, 33]),
    z=st.floats(-2000, 2000, allow_nan=False),
)
def test_propagation_is_unitary_and_invertible(seed, n, z):
    config = OpticalConfig()
    f = _random_field(np.random.default_rng(seed), n)
    out = propagate_angular_spectrum(f, z, config)
    assert field_energy(out) == pytest.approx(field_energy(f), rel=1e-9)
    back = propagate_angular_spectrum(out, -z, config)
    assert _rel_rms(back.grid, f.grid) < 1e-9


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), factor=st.integers(1, 3), n=st.sampled_from([8, 9, 16]))
def test_upsample_preserves_energy_and_samples(seed, factor, n):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    f = ComplexField(g, 1.0)
    up = upsample_pad(f, factor)
    assert field_energy(up) == pytest.approx(field_energy(f), rel=1e-9)
    assert np.allclose(up.grid[::factor, ::factor], g, atol=1e-9)
