import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from holovol.errors import GeometryInconsistentError, InsufficientDataError, InvalidInputError
from holovol.optics import OpticalConfig
from holovol.preprocess import correct_frame
from holovol.quantify import (
    band_limited_height,
    cap_height as cap_height_from_volume,
    contact_angle,
    fit_decay_rate,
    measure_frame,
    particle_diameter,
    particle_height,
    particle_volume,
    unwrapped_phase,
)
from holovol.detect import FrameMask, label_regions, threshold_grid
from holovol.reconstruct import ReconSettings, reconstruct_frame
from holovol.simulator import DropletCap, SensorModel, cap_height, cap_volume, synthesize_hologram


def _disk(n, r):
    yy, xx = np.mgrid[:n, :n] - (n - 1) / 2
    return yy**2 + xx**2 <= r * r


def test_uniform_phase_volume():
    phase = np.zeros((20, 20))
    region = np.zeros((20, 20), bool)
    region[5:15, 5:15] = True
    phase[region] = 1.0
    v = particle_volume(phase, region, OpticalConfig())
    assert v == pytest.approx(0.85 / (2 * math.pi * 0.4) * 100 * 0.56**2, rel=1e-12)
    assert v == pytest.approx(10.61, abs=0.01)
    assert particle_volume(np.zeros((20, 20)), region, OpticalConfig()) == 0.0


def test_negative_phase_clamped():
    phase = -np.ones((8, 8))
    region = np.ones((8, 8), bool)
    assert particle_volume(phase, region, OpticalConfig()) == 0.0


def test_height_closed_form():
    phase = np.full((9, 9), math.pi)
    region = np.ones((9, 9), bool)
    assert particle_height(phase, region, OpticalConfig()) == pytest.approx(1.0625, rel=1e-12)
    assert particle_height(np.zeros((9, 9)), region, OpticalConfig()) == 0.0


def test_empty_region_rejected():
    empty = np.zeros((5, 5), bool)
    with pytest.raises(InvalidInputError):
        particle_volume(np.ones((5, 5)), empty, OpticalConfig())
    with pytest.raises(InvalidInputError):
        particle_height(np.ones((5, 5)), empty, OpticalConfig())
    with pytest.raises(InvalidInputError):
        particle_diameter(empty, OpticalConfig())
    with pytest.raises(InvalidInputError):
        particle_volume(np.ones((5, 5)), np.ones((4, 4), bool), OpticalConfig())


def test_contact_angle_examples():
    assert contact_angle(2 * math.pi / 3, 1.0) == pytest.approx(math.pi / 2, abs=1e-12)
    v = math.pi / 6 * 0.1 * 3.01
    assert contact_angle(v, 0.1) == pytest.approx(0.1993, abs=1e-4)
    assert contact_angle(v, 0.1) == pytest.approx(2 * math.atan(0.1), abs=1e-3)
    h = math.sqrt(3)
    assert contact_angle(cap_volume(1.0, h), h) == pytest.approx(2 * math.pi / 3, abs=1e-9)


def test_contact_angle_errors():
    with pytest.raises(InvalidInputError):
        contact_angle(0.0, 1.0)
    with pytest.raises(InvalidInputError):
        contact_angle(1.0, -1.0)
    with pytest.raises(GeometryInconsistentError):
        contact_angle(0.1, 5.0)  # taller than any cap of that volume


@settings(max_examples=100, deadline=None)
@given(a=st.floats(0.1, 50.0), theta=st.floats(0.05, 3.0))
def test_contact_angle_round_trip(a, theta):
    h = cap_height(a, theta)
    assert contact_angle(cap_volume(a, h), h) == pytest.approx(theta, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(a=st.floats(0.5, 20.0), theta=st.floats(0.05, 3.0), s=st.floats(0.1, 10.0))
def test_scale_covariance(a, theta, s):
    h = cap_height(a, theta)
    v = cap_volume(a, h)
    assert cap_volume(s * a, s * h) == pytest.approx(s**3 * v, rel=1e-12)
    assert contact_angle(s**3 * v, s * h) == pytest.approx(contact_angle(v, h), abs=1e-9)


def test_decay_fit_exact_line():
    t = np.arange(10) / 2.0
    fit = fit_decay_rate(list(zip(t, 0.5 - 0.058 * t)))
    assert fit.K == pytest.approx(0.058, abs=1e-12)
    assert fit.theta0 == pytest.approx(0.5, abs=1e-12)
    assert fit.r_squared == pytest.approx(1.0, abs=1e-12)


def test_decay_fit_constant_series():
    fit = fit_decay_rate([(k / 2, 0.4) for k in range(6)])
    assert fit.K == 0.0 and fit.r_squared == 0.0


def test_decay_fit_errors():
    with pytest.raises(InsufficientDataError):
        fit_decay_rate([(0, 1), (1, 0.9)])
    with pytest.raises(InvalidInputError):
        fit_decay_rate([(1.0, 0.5)] * 5)
    with pytest.raises(InvalidInputError):
        fit_decay_rate([(0, 1), (2, 0.9), (1, 0.8), (3, 0.7), (4, 0.6)])


def test_decay_fit_standard_error_coverage():
    rng = np.random.default_rng(11)
    t = np.arange(30) / 2.0
    se = 0.01 / math.sqrt(np.sum((t - t.mean()) ** 2))
    hits = 0
    for _ in range(1000):
        theta = 0.6 - 0.045 * t + rng.normal(0, 0.01, t.size)
        hits += abs(fit_decay_rate(list(zip(t, theta))).K - 0.045) <= 2 * se
    assert hits >= 950


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=5, max_size=40), st.floats(0.1, 5.0))
def test_decay_fit_equals_closed_form(thetas, dt):
    t = np.arange(len(thetas)) * dt
    th = np.asarray(thetas)
    fit = fit_decay_rate(list(zip(t, th)))
    slope = np.sum((t - t.mean()) * (th - th.mean())) / np.sum((t - t.mean()) ** 2)
    assert fit.K == pytest.approx(-slope, abs=1e-12)


def test_diameter_arithmetic():
    region = np.zeros((20, 20), bool)
    region.flat[:100] = True
    assert particle_diameter(region, OpticalConfig()) == pytest.approx(6.32, abs=0.005)
    one = np.zeros((3, 3), bool)
    one[1, 1] = True
    assert particle_diameter(one, OpticalConfig()) == pytest.approx(2 * 0.56 / math.sqrt(math.pi))


def test_unwrap_removes_whole_turns():
    yy, xx = np.mgrid[:32, :32]
    phase = 0.02 * (xx - 16) ** 2 / 4 * (np.hypot(yy - 16, xx - 16) < 12)
    phase = phase.max() - phase
    phase[np.hypot(yy - 16, xx - 16) >= 12] = 0.0
    field = np.exp(1j * (phase + 2 * np.pi))
    assert np.allclose(unwrapped_phase(field), phase, atol=1e-9)


def test_cap_height_inverse():
    for a, th in ((3.0, 0.4), (5.0, 1.2)):
        h = cap_height(a, th)
        assert cap_height_from_volume(cap_volume(a, h), a) == pytest.approx(h, rel=1e-10)


def test_band_limited_height_inverts_its_own_model():
    from holovol.quantify import _observed_peak

    cfg = OpticalConfig()
    nyq = 1 / (2 * cfg.sensor_pitch)
    for a, th in ((2.5, 0.4), (3.0, 0.6), (5.0, 0.3)):
        h = cap_height(a, th)
        seen = _observed_peak(a, h, cfg.recon_pitch, nyq)
        assert seen < h
        v = cap_volume(a, h)
        assert band_limited_height(v, seen, cfg.recon_pitch, nyq) == pytest.approx(h, rel=1e-3)


def test_band_limited_height_is_small_for_resolved_caps():
    cfg = OpticalConfig()
    h = cap_height(20.0, 0.3)
    v = cap_volume(20.0, h)
    corrected = band_limited_height(v, h, cfg.recon_pitch, 1 / (2 * cfg.sensor_pitch))
    assert h <= corrected < 1.01 * h


@pytest.mark.parametrize("a,theta", [(5.0, 0.5), (6.0, 0.3), (3.0, 0.6)])
def test_simulated_cap_geometry(config, a, theta):
    n = 256
    fov = (n * 1.12, n * 1.12)
    cap = DropletCap((fov[0] / 2 + 1.3, fov[1] / 2 - 0.7), a, theta)
    holo = correct_frame(synthesize_hologram([cap], config, SensorModel(), 0, fov))
    rec = reconstruct_frame(holo, config.z_nominal, ReconSettings(patch_size=n), config)
    (region,) = label_regions(FrameMask(threshold_grid(rec.field.grid, 5.0, 0.12, 0.4, 0.1)))
    ys, xs = region.slices
    pad = 16
    crop = rec.field.grid[ys.start - pad: ys.stop + pad, xs.start - pad: xs.stop + pad]
    local = np.zeros(crop.shape, bool)
    local[pad:-pad, pad:-pad] = region.mask
    g = measure_frame(crop, local, config, band_limit=1 / (2 * config.sensor_pitch))
    assert g.volume_V == pytest.approx(cap.volume, rel=0.05)
    assert g.contact_angle_theta == pytest.approx(theta, rel=0.1)
    assert particle_diameter(region.mask, config) == pytest.approx(2 * a, rel=0.15)


def test_planted_height_recovered(config):
    n = 256
    fov = (n * 1.12, n * 1.12)
    a = 6.0
    theta = 2 * math.atan(0.8 / a)  # h = 0.8 um
    cap = DropletCap((fov[0] / 2, fov[1] / 2), a, theta)
    holo = correct_frame(synthesize_hologram([cap], config, SensorModel(), 0, fov))
    rec = reconstruct_frame(holo, config.z_nominal, ReconSettings(patch_size=n), config)
    (region,) = label_regions(FrameMask(threshold_grid(rec.field.grid, 5.0, 0.12, 0.4, 0.1)))
    ys, xs = region.slices
    phase = unwrapped_phase(rec.field.grid[ys, xs])
    assert particle_height(phase, region.mask, config) == pytest.approx(0.8, rel=0.05)
