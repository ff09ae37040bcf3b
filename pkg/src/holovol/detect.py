"""Particle detection on recovered field stacks.

Frames are thresholded independently (robust 5-sigma rule on the real and
imaginary channels), connected components are labelled, and components in
consecutive frames are chained into traces by intersection-over-union.
Particles sit on a static substrate, so a chain ends as soon as a frame has
no matching component; splits and merges also end the chain.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import InvalidInputError

log = logging.getLogger(__name__)

MAD_TO_SIGMA = 1.4826
_EIGHT = np.ones((3, 3), bool)


@dataclass(frozen=True)
class FrameMask:
    mask: np.ndarray
    frame_index: int = 0
    timestamp: float = 0.0
    pitch: float = 1.0


@dataclass(frozen=True)
class Region:
    """One connected component, stored as a bounding box plus local mask."""

    frame_index: int
    box: tuple[int, int, int, int]  # y0, y1, x0, x1 (half-open)
    mask: np.ndarray
    timestamp: float = 0.0

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    @property
    def slices(self) -> tuple[slice, slice]:
        y0, y1, x0, x1 = self.box
        return slice(y0, y1), slice(x0, x1)

    def centroid(self) -> tuple[float, float]:
        """(row, col) in pixels."""
        yy, xx = np.nonzero(self.mask)
        return float(yy.mean() + self.box[0]), float(xx.mean() + self.box[2])


@dataclass
class ParticleTrace:
    id: int
    regions: list[Region]
    pitch: float = 1.0
    centroid: tuple[float, float] = field(default=(0.0, 0.0))  # (x, y) um

    def __post_init__(self):
        cy, cx = self.regions[0].centroid()
        self.centroid = ((cx + 0.5) * self.pitch, (cy + 0.5) * self.pitch)

    @property
    def frame_indices(self) -> list[int]:
        return [r.frame_index for r in self.regions]

    @property
    def first_frame(self) -> int:
        return self.regions[0].frame_index

    @property
    def last_frame(self) -> int:
        return self.regions[-1].frame_index

    def __len__(self) -> int:
        return len(self.regions)


def _robust_stats(values: np.ndarray) -> tuple[float, float]:
    med = float(np.median(values))
    return med, MAD_TO_SIGMA * float(np.median(np.abs(values - med)))


def threshold_grid(
    grid: np.ndarray,
    sigma: float = 5.0,
    min_contrast: float = 0.0,
    extent_ratio: float = 0.25,
    peak_ratio: float = 0.0,
) -> np.ndarray:
    """Robust ``sigma`` mask of a complex grid (see :func:`threshold_mask`).

    With ``min_contrast > 0`` the rule becomes a hysteresis threshold
    relative to the background amplitude: a component is kept only if some
    pixel departs by more than ``min_contrast``, and its extent is cut at
    ``extent_ratio * min_contrast`` when that exceeds the sigma level.
    ``peak_ratio > 0`` further trims each component to the pixels departing
    by at least that fraction of the component's own peak departure, keeping
    the connected piece that holds the peak; this strips the ringing halo
    around strong droplets.
    """
    centre = []
    scales = []
    for channel in (grid.real, grid.imag):
        mu, scale = _robust_stats(channel)
        centre.append(mu)
        scales.append(scale)
    level = abs(complex(*centre))
    floor = extent_ratio * min_contrast * level
    mask = np.zeros(grid.shape, bool)
    seeds = np.zeros(grid.shape, bool)
    strength = np.zeros(grid.shape)
    for channel, mu, scale in zip((grid.real, grid.imag), centre, scales):
        if scale > 0:
            dev = np.abs(channel - mu)
            mask |= dev > max(sigma * scale, floor)
            np.maximum(strength, dev, out=strength)
            if min_contrast > 0:
                seeds |= dev > min_contrast * level
    if min_contrast > 0 and mask.any():
        labels, n = ndimage.label(mask, structure=_EIGHT)
        keep = np.zeros(n + 1, bool)
        keep[np.unique(labels[seeds & mask])] = True
        keep[0] = False
        mask = keep[labels]
    mask = _close(mask)
    if peak_ratio > 0 and mask.any():
        mask = _close(_trim_to_peak(mask, strength, peak_ratio))
    return mask


def _close(mask: np.ndarray) -> np.ndarray:
    if not mask.any():
        return mask
    # pad so closing does not erode components touching the border
    padded = np.pad(mask, 1, mode="edge")
    return ndimage.binary_closing(padded, structure=_EIGHT)[1:-1, 1:-1] | mask


def _trim_to_peak(mask: np.ndarray, strength: np.ndarray, ratio: float) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=_EIGHT)
    index = np.arange(1, n + 1)
    peaks = np.zeros(n + 1)
    peaks[1:] = ndimage.maximum(strength, labels, index)
    cut = mask & (strength >= ratio * peaks[labels])
    sub, _ = ndimage.label(cut, structure=_EIGHT)
    at_peak = ndimage.maximum_position(strength, labels, index)
    keep = np.zeros(sub.max() + 1, bool)
    keep[[sub[p] for p in at_peak]] = True
    keep[0] = False
    return keep[sub]


def threshold_mask(recovered, sigma: float = 5.0, frame_index: int = 0,
                   min_contrast: float = 0.0) -> FrameMask:
    """Union of robust ``sigma``-thresholds on the real and imaginary parts.

    Centre and scale are median and 1.4826*MAD, so the particles themselves
    do not inflate the threshold. A constant channel contributes nothing.
    """
    grid = recovered.field.grid
    return FrameMask(
        threshold_grid(grid, sigma, min_contrast), frame_index, recovered.timestamp,
        recovered.field.pitch,
    )


def label_regions(mask: FrameMask) -> list[Region]:
    labels, n = ndimage.label(mask.mask, structure=_EIGHT)
    regions = []
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        local = labels[sl] == k
        box = (sl[0].start, sl[0].stop, sl[1].start, sl[1].stop)
        regions.append(Region(mask.frame_index, box, local, mask.timestamp))
    return regions


def region_iou(a: Region, b: Region) -> float:
    ay0, ay1, ax0, ax1 = a.box
    by0, by1, bx0, bx1 = b.box
    y0, y1 = max(ay0, by0), min(ay1, by1)
    x0, x1 = max(ax0, bx0), min(ax1, bx1)
    if y0 >= y1 or x0 >= x1:
        return 0.0
    ma = a.mask[y0 - ay0: y1 - ay0, x0 - ax0: x1 - ax0]
    mb = b.mask[y0 - by0: y1 - by0, x0 - bx0: x1 - bx0]
    inter = int(np.count_nonzero(ma & mb))
    if inter == 0:
        return 0.0
    return inter / (a.area + b.area - inter)


def _links(prev: list[Region], cur: list[Region], min_overlap: float):
    succ = [[] for _ in prev]
    pred = [[] for _ in cur]
    if not prev or not cur:
        return succ, pred
    boxes = np.array([r.box for r in cur])
    for i, a in enumerate(prev):
        y0, y1, x0, x1 = a.box
        near = np.nonzero(
            (boxes[:, 0] < y1) & (boxes[:, 1] > y0) & (boxes[:, 2] < x1) & (boxes[:, 3] > x0)
        )[0]
        for j in near:
            if region_iou(a, cur[j]) >= min_overlap:
                succ[i].append(int(j))
                pred[int(j)].append(i)
    return succ, pred


def link_regions(
    frames: Sequence[list[Region]],
    min_overlap: float = 0.3,
    min_trace_frames: int = 5,
    pitch: float = 1.0,
    frame_indices: Sequence[int] | None = None,
) -> list[ParticleTrace]:
    """Chain per-frame regions into traces (one-to-one IoU links only).

    ``frame_indices`` gives the frame number of each entry of ``frames``
    (default: their position); links only form between consecutive numbers.
    """
    if frame_indices is None:
        frame_indices = range(len(frames))
    if len(frame_indices) != len(frames):
        raise InvalidInputError("frame_indices and frames differ in length")
    chains: list[list[Region]] = []
    open_chain: dict[int, int] = {}  # region index in previous frame -> chain index
    prev: list[Region] = []
    prev_index = None
    for index, regions in zip(frame_indices, frames):
        if prev_index is not None and index <= prev_index:
            raise InvalidInputError("frame indices must be strictly increasing")
        if prev_index is not None and index == prev_index + 1:
            succ, pred = _links(prev, regions, min_overlap)
        else:
            succ, pred = [], [[] for _ in regions]
        nxt: dict[int, int] = {}
        for j, region in enumerate(regions):
            p = pred[j]
            if len(p) == 1 and len(succ[p[0]]) == 1 and p[0] in open_chain:
                c = open_chain[p[0]]
                chains[c].append(region)
            else:
                c = len(chains)
                chains.append([region])
            nxt[j] = c
        open_chain = nxt
        prev = regions
        prev_index = index
    kept = [c for c in chains if len(c) >= min_trace_frames]
    kept.sort(key=lambda c: (c[0].frame_index, c[0].box[0], c[0].box[2]))
    return [ParticleTrace(i, c, pitch) for i, c in enumerate(kept)]


def extract_traces(
    masks: Sequence[FrameMask], min_overlap: float = 0.3, min_trace_frames: int = 5
) -> list[ParticleTrace]:
    if min_trace_frames < 1:
        raise InvalidInputError("min_trace_frames must be >= 1")
    if not masks:
        return []
    ordered = sorted(masks, key=lambda m: m.frame_index)
    per_frame = [label_regions(m) for m in ordered]
    return link_regions(
        per_frame, min_overlap, min_trace_frames, ordered[0].pitch,
        [m.frame_index for m in ordered],
    )


@dataclass(frozen=True)
class CropFrame:
    frame_index: int
    timestamp: float
    field: np.ndarray  # complex crop
    region: np.ndarray  # bool mask in crop coordinates


@dataclass(frozen=True)
class CropStack:
    trace_id: int
    window: tuple[int, int, int, int]  # y0, y1, x0, x1
    frames: tuple[CropFrame, ...]
    pitch: float


def crop_window(trace: ParticleTrace, shape: tuple[int, int], pad: int) -> tuple[int, int, int, int]:
    y0 = min(r.box[0] for r in trace.regions) - pad
    y1 = max(r.box[1] for r in trace.regions) + pad
    x0 = min(r.box[2] for r in trace.regions) - pad
    x1 = max(r.box[3] for r in trace.regions) + pad
    ny, nx = shape
    return max(y0, 0), min(y1, ny), max(x0, 0), min(x1, nx)


def _grid_of(item) -> np.ndarray:
    if hasattr(item, "field"):
        return item.field.grid
    if hasattr(item, "grid"):
        return item.grid
    return np.asarray(item)


def crop_sequences(traces, fields, pad: int = 16, warnings: list | None = None) -> list[CropStack]:
    """Cut one fixed window per trace out of every frame the trace spans.

    ``fields`` is indexed by frame index. Traces whose window has zero area
    are skipped; a record is appended to ``warnings`` when given.
    """
    stacks = []
    for trace in traces:
        first = _grid_of(fields[trace.first_frame])
        y0, y1, x0, x1 = crop_window(trace, first.shape, pad)
        if y1 <= y0 or x1 <= x0:
            log.warning("trace %d: degenerate crop window skipped", trace.id)
            if warnings is not None:
                warnings.append({"kind": "skipped_trace", "particle_id": trace.id,
                                 "reason": "degenerate crop window"})
            continue
        frames = []
        for region in trace.regions:
            grid = _grid_of(fields[region.frame_index])
            local = np.zeros((y1 - y0, x1 - x0), bool)
            ry0, ry1, rx0, rx1 = region.box
            local[ry0 - y0: ry1 - y0, rx0 - x0: rx1 - x0] = region.mask
            frames.append(CropFrame(region.frame_index, region.timestamp,
                                    np.array(grid[y0:y1, x0:x1]), local))
        stacks.append(CropStack(trace.id, (y0, y1, x0, x1), tuple(frames), trace.pitch))
    return stacks
