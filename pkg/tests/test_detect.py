import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from holovol.detect import (
    FrameMask,
    crop_sequences,
    extract_traces,
    label_regions,
    link_regions,
    threshold_grid,
    threshold_mask,
)
from holovol.errors import InvalidInputError
from holovol.optics import ComplexField
from holovol.preprocess import correct_frame
from holovol.reconstruct import ReconSettings, RecoveredField, reconstruct_frame
from holovol.simulator import DropletCap, SensorModel, synthesize_hologram


def _recovered(grid, pitch=0.56, t=0.0):
    return RecoveredField(ComplexField(grid, pitch), 750.0, 0.0, t)


def _mask_with_disk(shape, cy, cx, r, index=0):
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    return FrameMask((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r, index, index * 0.5)


def test_constant_field_gives_empty_mask():
    m = threshold_mask(_recovered(np.full((32, 32), 1 + 0.2j)))
    assert not m.mask.any()


def test_planted_region_is_detected_exactly(rng):
    grid = 1.0 + 0.01 * (rng.normal(size=(64, 64)) + 1j * rng.normal(size=(64, 64)))
    planted = np.zeros((64, 64), bool)
    planted[20:26, 30:37] = True
    grid[planted] += 10 * 0.01
    m = threshold_mask(_recovered(grid))
    assert np.array_equal(m.mask, planted)


def test_contrast_floor_rejects_weak_clutter(rng):
    grid = 1.0 + 1e-4 * (rng.normal(size=(64, 64)) + 1j * rng.normal(size=(64, 64)))
    grid[10:13, 10:13] += 0.05  # far above sigma, below the contrast floor
    grid[40:46, 40:46] += 0.5j
    loose = threshold_grid(grid, 5.0)
    strict = threshold_grid(grid, 5.0, min_contrast=0.12, extent_ratio=0.4)
    assert loose[11, 11] and loose[42, 42]
    assert not strict[11, 11] and strict[42, 42]


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.1, 100.0), phase=st.floats(-math.pi, math.pi))
def test_threshold_is_scale_and_phase_invariant_in_magnitude(seed, scale, phase):
    rng = np.random.default_rng(seed)
    grid = 1.0 + 0.01 * (rng.normal(size=(32, 32)) + 1j * rng.normal(size=(32, 32)))
    grid[8:12, 8:12] += 0.3
    base = threshold_grid(grid, 5.0, 0.12, 0.4)
    scaled = threshold_grid(grid * scale, 5.0, 0.12, 0.4)
    assert np.array_equal(base, scaled)


def _single_droplet_mask(config, a, theta):
    n = 256
    fov = (n * 1.12, n * 1.12)
    cap = DropletCap((fov[0] / 2, fov[1] / 2), a, theta)
    holo = correct_frame(synthesize_hologram([cap], config, SensorModel(), 0, fov))
    rec = reconstruct_frame(holo, config.z_nominal, ReconSettings(patch_size=n), config)
    return label_regions(FrameMask(threshold_grid(rec.field.grid, 5.0, 0.12, 0.4, 0.1)))


@pytest.mark.parametrize("a,theta", [(4.0, 0.6), (5.0, 0.5)])
def test_simulated_droplet_mask_area(config, a, theta):
    regions = _single_droplet_mask(config, a, theta)
    assert len(regions) == 1
    disk = math.pi * a**2 / config.recon_pitch**2
    assert regions[0].area == pytest.approx(disk, rel=0.3)


@pytest.mark.xfail(strict=True, reason="a 1 um contact radius is below the 1.12 um sensor sampling; "
                   "the mask follows the band-limited spot, not the disk")
def test_one_micron_droplet_mask_area(config):
    regions = _single_droplet_mask(config, 1.0, 0.6)
    disk = math.pi / config.recon_pitch**2
    assert regions[0].area == pytest.approx(disk, rel=0.3)


def test_static_component_gives_one_full_trace():
    masks = [_mask_with_disk((40, 40), 20, 20, 4, k) for k in range(8)]
    traces = extract_traces(masks)
    assert len(traces) == 1 and len(traces[0]) == 8


def test_short_component_is_dropped():
    masks = [_mask_with_disk((40, 40), 20, 20, 4, k) for k in range(4)]
    masks += [FrameMask(np.zeros((40, 40), bool), k) for k in range(4, 8)]
    assert extract_traces(masks, min_trace_frames=5) == []


def test_gap_breaks_a_trace():
    masks = [_mask_with_disk((40, 40), 20, 20, 4, k) for k in (0, 1, 2, 3, 4, 6, 7, 8, 9, 10)]
    traces = extract_traces(masks)
    assert [t.frame_indices for t in traces] == [[0, 1, 2, 3, 4], [6, 7, 8, 9, 10]]


def test_footprint_jump_starts_new_trace():
    shape = (40, 60)
    masks = []
    for k in range(6):
        m = _mask_with_disk(shape, 20, 15, 4, k).mask | _mask_with_disk(shape, 20, 45, 4, k).mask
        masks.append(FrameMask(m, k))
    for k in range(6, 12):
        masks.append(FrameMask(np.zeros(shape, bool) | _mask_with_disk(shape, 20, 30, 20, k).mask, k))
    traces = extract_traces(masks)
    assert sorted(t.frame_indices for t in traces) == [list(range(6)), list(range(6)), list(range(6, 12))]


def test_link_validation():
    with pytest.raises(InvalidInputError):
        link_regions([[], []], frame_indices=[0])
    with pytest.raises(InvalidInputError):
        link_regions([[], []], frame_indices=[1, 1])
    with pytest.raises(InvalidInputError):
        extract_traces([], min_trace_frames=0)


def test_single_pixel_crop_is_33_square():
    mask = np.zeros((100, 100), bool)
    mask[50, 50] = True
    masks = [FrameMask(mask, k) for k in range(5)]
    traces = extract_traces(masks)
    fields = [np.ones((100, 100), complex)] * 5
    (stack,) = crop_sequences(traces, fields, pad=16)
    assert stack.frames[0].field.shape == (33, 33)
    assert stack.frames[0].region[16, 16]


def test_disjoint_traces_get_disjoint_windows():
    shape = (100, 200)
    masks = [FrameMask(_mask_with_disk(shape, 50, 40, 3).mask | _mask_with_disk(shape, 50, 160, 3).mask, k)
             for k in range(5)]
    stacks = crop_sequences(extract_traces(masks), [np.ones(shape, complex)] * 5, pad=16)
    assert len(stacks) == 2
    (a0, a1, b0, b1), (c0, c1, d0, d1) = stacks[0].window, stacks[1].window
    assert b1 <= d0 or d1 <= b0


def test_crop_centered_on_simulated_droplet(config):
    n = 256
    fov = (n * 1.12, n * 1.12)
    cap = DropletCap((140.0, 155.0), 5.0, 0.4)
    holo = correct_frame(synthesize_hologram([cap], config, SensorModel(), 0, fov))
    rec = reconstruct_frame(holo, config.z_nominal, ReconSettings(patch_size=n), config)
    masks = [FrameMask(threshold_grid(rec.field.grid, 5.0, 0.12, 0.4, 0.1), k) for k in range(5)]
    (stack,) = crop_sequences(extract_traces(masks), [rec] * 5, pad=16)
    y0, y1, x0, x1 = stack.window
    p = config.recon_pitch
    assert abs((x0 + x1) / 2 * p - cap.center[0]) <= 2 * p
    assert abs((y0 + y1) / 2 * p - cap.center[1]) <= 2 * p
