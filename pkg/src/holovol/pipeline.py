"""Batch orchestration behind the CLI: simulate, analyze, report.

Frames are streamed: each one is read, corrected, recovered and thresholded
in turn, and only the recovered field (complex64, on a disk-backed memmap)
is kept for the crop stage. Worker pools fan out over frames and traces;
results are merged in input order, so outputs do not depend on scheduling.
"""

from __future__ import annotations

import logging
import math
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from PIL import Image

from . import io
from .detect import FrameMask, crop_sequences, label_regions, link_regions, threshold_grid
from .errors import (
    ConfigError,
    DegenerateFrameError,
    GeometryInconsistentError,
    InsufficientDataError,
    InvalidInputError,
    NoContentError,
)
from .preprocess import correct_frame
from .quantify import fit_decay_rate, measure_frame, particle_diameter
from .reconstruct import _is_blank, autofocus, reconstruct_frame
from .simulator import render_frame
from .stats import fit_gaussian, fit_lognormal, size_distribution, t_test

log = logging.getLogger(__name__)

PARTICLE_COLUMNS = [
    "particle_id", "x_um", "y_um", "first_frame", "last_frame", "n_frames",
    "first_t_s", "last_t_s", "D_um", "theta0_rad", "K_rad_per_s", "r2", "status",
]
TRACE_COLUMNS = ["particle_id", "frame_index", "t_s", "V_um3", "h_um", "theta_rad", "clamped_samples"]
TRUTH_COLUMNS = ["id", "x_um", "y_um", "a_um", "theta0_rad", "K_rad_per_s", "extinction_s"]
ALPHA = 0.05


def worker_count(requested: int | None = None) -> int:
    """Pool size: ``requested`` or the CPU count, capped by HOLOVOL_THREADS."""
    n = requested or os.cpu_count() or 1
    cap = os.environ.get("HOLOVOL_THREADS")
    if cap:
        try:
            n = min(n, int(cap))
        except ValueError:
            raise ConfigError("HOLOVOL_THREADS must be an integer", "HOLOVOL_THREADS") from None
    return max(1, n)


@contextmanager
def _pool(workers: int):
    if workers <= 1:
        yield None
    else:
        with ThreadPoolExecutor(workers) as ex:
            yield ex


def _map(executor, fn, items):
    return map(fn, items) if executor is None else executor.map(fn, items)


def _num(v):
    """JSON-safe float (NaN and inf become null)."""
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None


class _Timer:
    def __init__(self):
        self.stages: dict[str, float] = {}

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.stages[name] = self.stages.get(name, 0.0) + time.perf_counter() - t0


# ------------------------------------------------------------------- simulate


def run_simulate(scene_path, config_path, out_dir, workers: int | None = None) -> dict:
    """Render the scene's frame stack plus a ground-truth table into ``out_dir``."""
    scene_file = io.load_model(scene_path, io.SceneFile)
    cfg = io.load_config(config_path)
    optical = cfg.optical.to_config()
    scene = scene_file.to_scene()
    sensor = scene_file.sensor.to_model()
    out = io.ensure_dir(out_dir)
    truth = [
        [c.id, float(c.center[0]), float(c.center[1]), float(c.contact_radius_a),
         float(c.theta0), float(c.decay_rate_K), _num(c.extinction_time())]
        for c in scene.droplets
    ]

    def render(k: int):
        return render_frame(scene, optical, sensor, k, cfg.simulate.pad_factor)

    with _pool(worker_count(workers)) as ex:
        frames = _map(ex, render, range(scene_file.n_frames))
        manifest = io.write_frame_stack(
            frames, out, optical.frame_rate, cfg.simulate.frame_format,
            extra={
                "scene_seed": scene.seed,
                "ground_truth": [dict(zip(TRUTH_COLUMNS, row)) for row in truth],
            },
        )
    io.write_csv(out / "ground_truth.csv", TRUTH_COLUMNS, truth)
    return manifest


# -------------------------------------------------------------------- analyze


class _FieldStore:
    """Disk-backed stack of recovered fields, indexed by frame."""

    def __init__(self, n: int, shape: tuple[int, int]):
        self._dir = tempfile.TemporaryDirectory(prefix="holovol-")
        self.data = np.lib.format.open_memmap(
            os.path.join(self._dir.name, "fields.npy"), mode="w+",
            dtype=np.complex64, shape=(n, *shape),
        )

    def __getitem__(self, k: int) -> np.ndarray:
        return self.data[k]

    def __setitem__(self, k: int, grid: np.ndarray) -> None:
        self.data[k] = grid

    def close(self) -> None:
        del self.data
        self._dir.cleanup()


def _to_u8(img: np.ndarray, lo: float, hi: float) -> np.ndarray:
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    return np.clip((img - lo) * scale, 0, 255).astype(np.uint8)


def _dump_debug(out: Path, k: int, grid: np.ndarray, mask: np.ndarray) -> None:
    phase = np.angle(grid)
    gray = _to_u8(phase, -math.pi, math.pi)
    Image.fromarray(gray).save(out / f"phase_{k:06d}.png")
    overlay = np.repeat(gray[..., None], 3, axis=2)
    overlay[mask] = (overlay[mask] // 2) + np.array([127, 0, 0], np.uint8)
    Image.fromarray(overlay).save(out / f"mask_{k:06d}.png")


def _focus(stack, settings, optical, warnings) -> float:
    for k in range(len(stack)):
        try:
            holo = correct_frame(stack[k])
        except DegenerateFrameError:
            continue
        if _is_blank(holo):
            continue
        try:
            return autofocus(holo, settings, optical)
        except NoContentError:
            continue
    raise NoContentError("every frame in the stack is blank")


def _warn(warnings: list, kind: str, **info) -> None:
    log.warning("%s: %s", kind, info)
    warnings.append({"kind": kind, **info})


def _quantify_trace(stack, trace, optical, pitch, min_points, band_limit=None):
    """(row, per-frame records, warnings) for one crop stack."""
    warnings = []
    records = []
    clamped = 0
    for cf in stack.frames:
        try:
            g = measure_frame(cf.field.astype(np.complex128), cf.region, optical,
                              cf.timestamp, cf.frame_index, pitch, band_limit)
        except (GeometryInconsistentError, InvalidInputError) as exc:
            warnings.append({"kind": "skipped_frame", "particle_id": trace.id,
                             "frame_index": cf.frame_index, "reason": str(exc)})
            continue
        clamped += g.clamped_samples
        records.append(g)
    if clamped:
        warnings.append({"kind": "clamped_negative_phase", "particle_id": trace.id, "count": clamped})
    row = {
        "particle_id": trace.id,
        "x_um": trace.centroid[0],
        "y_um": trace.centroid[1],
        "first_frame": trace.first_frame,
        "last_frame": trace.last_frame,
        "n_frames": len(trace),
        "first_t_s": trace.regions[0].timestamp,
        "last_t_s": trace.regions[-1].timestamp,
        "D_um": particle_diameter(stack.frames[0].region, optical, pitch),
        "theta0_rad": None,
        "K_rad_per_s": None,
        "r2": None,
        "status": "ok",
    }
    if len(records) < min_points:
        row["status"] = "too_few_frames"
        warnings.append({"kind": "skipped_trace", "particle_id": trace.id,
                         "reason": f"{len(records)} measurable frames"})
    else:
        fit = fit_decay_rate([(g.timestamp, g.contact_angle_theta) for g in records],
                             trace.id, min_points)
        row.update(theta0_rad=fit.theta0, K_rad_per_s=fit.K, r2=fit.r_squared)
    return row, records, warnings


def _warning_counts(warnings: list) -> dict:
    counts: dict[str, int] = {}
    for w in warnings:
        counts[w["kind"]] = counts.get(w["kind"], 0) + int(w.get("count", 1))
    return dict(sorted(counts.items()))


def _write_empty(out: Path) -> None:
    io.write_csv(out / "particles.csv", PARTICLE_COLUMNS, [])


def run_analyze(input_dir, config_path, out_dir, dump_debug: bool | None = None,
                workers: int | None = None) -> dict:
    """Full analysis of one frame stack; returns the run report record.

    Writes particles.csv, traces.csv, histogram.csv and summary.json (all
    deterministic) plus report.json (timing, warnings, config echo).
    """
    cfg = io.load_config(config_path)
    if Path(input_dir).resolve() == Path(out_dir).resolve():
        raise ConfigError("input and output directories must differ", "io.output_dir")
    optical = cfg.optical.to_config()
    settings = cfg.recon.to_settings()
    det = cfg.detect
    dump = cfg.io.dump_debug if dump_debug is None else dump_debug
    stack = io.FrameStack(input_dir)
    out = io.ensure_dir(out_dir)
    n = len(stack)
    if n < det.min_trace_frames:
        raise InsufficientDataError(f"{n} frames; need at least {det.min_trace_frames}")
    timer = _Timer()
    warnings: list[dict] = []
    pitch = optical.recon_pitch
    band_limit = 1.0 / (2.0 * optical.sensor_pitch) if det.band_limit_correction else None

    try:
        with timer.stage("autofocus"):
            z = _focus(stack, settings, optical, warnings)
    except NoContentError:
        _write_empty(out)
        raise
    log.info("focus at z = %.2f um", z)

    m = stack.manifest
    f = optical.upsample_factor
    store = _FieldStore(n, (m.height * f, m.width * f)) if m.height else None
    debug_dir = io.ensure_dir(out / "debug") if dump else None

    def recover(k: int):
        frame = stack[k]
        try:
            holo = correct_frame(frame)
        except DegenerateFrameError as exc:
            return k, None, [], 0.0, str(exc)
        rec = reconstruct_frame(holo, z, settings, optical)
        grid = rec.field.grid
        mask = threshold_grid(grid, det.sigma, det.min_contrast, det.extent_ratio, det.peak_ratio)
        regions = label_regions(FrameMask(mask, k, frame.timestamp, pitch))
        return k, (grid, mask), regions, rec.residual, None

    per_frame = []
    residuals = []
    try:
        with timer.stage("reconstruct_detect"), _pool(worker_count(workers)) as ex:
            for k, payload, regions, residual, problem in _map(ex, recover, range(n)):
                if problem is not None:
                    _warn(warnings, "degenerate_frame", frame_index=k, reason=problem)
                    if store is not None:
                        store[k] = np.ones(store.data.shape[1:], np.complex64)
                else:
                    grid, mask = payload
                    if store is None:
                        store = _FieldStore(n, grid.shape)
                    store[k] = grid
                    if debug_dir is not None:
                        _dump_debug(debug_dir, k, grid, mask)
                per_frame.append(regions)
                residuals.append(residual)

        with timer.stage("link"):
            traces = link_regions(per_frame, det.min_overlap, det.min_trace_frames, pitch,
                                  list(range(n)))
            crops = crop_sequences(traces, store, det.crop_pad, warnings)

        with timer.stage("quantify"), _pool(worker_count(workers)) as ex:
            trace_by_id = {t.id: t for t in traces}
            results = list(_map(ex, lambda s: _quantify_trace(
                s, trace_by_id[s.trace_id], optical, pitch, det.min_trace_frames, band_limit), crops))
    finally:
        if store is not None:
            store.close()

    rows, trace_rows = [], []
    for row, records, warns in results:
        rows.append(row)
        warnings.extend(warns)
        for g in records:
            trace_rows.append([row["particle_id"], g.frame_index, g.timestamp, g.volume_V,
                               g.height_h, g.contact_angle_theta, g.clamped_samples])

    with timer.stage("stats"):
        summary = _summarize(rows, cfg, warnings)
    summary.update(n_frames=n, z_focus_um=z, max_residual=_num(max(residuals, default=0.0)))
    summary["warning_counts"] = _warning_counts(warnings)
    summary = {"schema_version": io.SCHEMA_VERSION, **summary}

    io.write_csv(out / "particles.csv", PARTICLE_COLUMNS,
                 [[_cell(r[c]) for c in PARTICLE_COLUMNS] for r in rows])
    io.write_csv(out / "traces.csv", TRACE_COLUMNS, trace_rows)
    vol = summary["volatility"]
    hist_rows = []
    if vol is not None:
        e, c = vol["histogram"]["edges"], vol["histogram"]["counts"]
        hist_rows = [[e[i], e[i + 1], c[i]] for i in range(len(c))]
    io.write_csv(out / "histogram.csv", ["K_lo", "K_hi", "count"], hist_rows)
    io.dump_json(summary, out / "summary.json")

    report = {
        "schema_version": io.SCHEMA_VERSION,
        "input_dir": str(input_dir),
        "config": cfg.model_dump(mode="json"),
        "timing_s": {k: round(v, 6) for k, v in timer.stages.items()},
        "n_traces": len(rows),
        "warnings": warnings,
        "warning_counts": summary["warning_counts"],
        "outputs": ["particles.csv", "traces.csv", "histogram.csv", "summary.json"],
    }
    io.dump_json(report, out / "report.json")
    return {**report, "summary": summary}


def _cell(v):
    if v is None:
        return ""
    return float(v) if isinstance(v, (float, np.floating)) else v


def _summarize(rows: list[dict], cfg: io.PipelineConfig, warnings: list) -> dict:
    st = cfg.stats
    ks = [r["K_rad_per_s"] for r in rows if r["status"] == "ok"]
    volatility = None
    if len(ks) >= 2:
        s = fit_gaussian(ks, st.trim)
        edges, counts = s.histogram
        volatility = {
            "mu_K": s.mu_K, "sigma_K": s.sigma_K, "n": s.n, "trim": s.trim,
            "n_trimmed": s.n_trimmed,
            "histogram": {"edges": [float(e) for e in edges], "counts": [int(c) for c in counts]},
        }
    else:
        _warn(warnings, "no_population_fit", reason=f"{len(ks)} fitted particles")
    dist = size_distribution([r["D_um"] for r in rows], tuple(st.size_range_um), st.bins_per_decade)
    mode = None
    try:
        mode = fit_lognormal(dist)
    except (InsufficientDataError, RuntimeError) as exc:
        _warn(warnings, "no_size_fit", reason=str(exc))
    return {
        "n_traces": len(rows),
        "n_fitted": len(ks),
        "volatility": volatility,
        "size_distribution": {
            "edges_um": [float(e) for e in dist.edges],
            "counts": [int(c) for c in dist.counts],
            "dN_dlogDp": [float(v) for v in dist.dN_dlogDp],
            "overflow": dist.overflow,
            "mode_diameter_um": _num(mode),
        },
        "particles": [{k: (_num(v) if isinstance(v, float) else v) for k, v in r.items()} for r in rows],
    }


# --------------------------------------------------------------------- report


def _k_column(summary: dict, source: str) -> list[float]:
    parts = summary.get("particles")
    if not isinstance(parts, list):
        raise ConfigError(f"{source}: no particle table", "particles")
    ks = []
    for i, p in enumerate(parts):
        if not isinstance(p, dict) or "K_rad_per_s" not in p:
            raise ConfigError(f"{source}: missing K column", f"particles.{i}.K_rad_per_s")
        k = p["K_rad_per_s"]
        if k is None:
            continue
        if not isinstance(k, (int, float)):
            raise ConfigError(f"{source}: K must be numeric", f"particles.{i}.K_rad_per_s")
        ks.append(float(k))
    return ks


def run_report(summary_a, summary_b, mode: str = "welch", alpha: float = ALPHA) -> dict:
    """Compare the K columns of two summaries with a two-sided t-test."""
    if mode not in ("paired", "welch"):
        raise ConfigError(f"unknown mode {mode!r}", "mode")
    a = _k_column(io.read_json(summary_a), str(summary_a))
    b = _k_column(io.read_json(summary_b), str(summary_b))
    if mode == "paired" and len(a) != len(b):
        raise ConfigError(f"paired mode needs equal-length K columns ({len(a)} vs {len(b)})",
                          "particles")
    t, p = t_test(a, b, mode)
    ma, mb = float(np.mean(a)), float(np.mean(b))
    sa, sb = float(np.std(a, ddof=1)), float(np.std(b, ddof=1))
    return {
        "schema_version": io.SCHEMA_VERSION,
        "mode": mode,
        "alpha": alpha,
        "n_a": len(a),
        "n_b": len(b),
        "mean_K_a": ma,
        "mean_K_b": mb,
        "delta_mean_K": ma - mb,
        "relative_delta": (ma - mb) / mb if mb else None,
        "std_K_a": sa,
        "std_K_b": sb,
        "t": t,
        "p": p,
        "significant": bool(p < alpha),
    }
