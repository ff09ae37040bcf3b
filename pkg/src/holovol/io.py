"""File formats: scene and pipeline config schemas, frame stacks, tables.

JSON documents are validated with pydantic; any violation surfaces as a
``ConfigError`` naming the dotted path of the offending field. Every JSON
document carries a ``schema_version``.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterator, Literal

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError, InvalidInputError, PipelineIOError
from .optics import OpticalConfig
from .reconstruct import ReconSettings
from .simulator import DropletCap, Layout, RawFrame, Scene, SensorModel

SCHEMA_VERSION = 1
MANIFEST = "manifest.json"


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ---------------------------------------------------------------- scene file


class DropletSpec(_Model):
    x_um: float
    y_um: float
    a_um: float = Field(gt=0)
    theta0_rad: float = Field(gt=0, lt=math.pi)
    K_rad_per_s: float = Field(default=0.0, ge=0)
    id: int | None = None


class SensorSpec(_Model):
    layout: Layout = Layout.MONO
    channel_gains: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    shade_poly_coeffs: list[list[float]] = [[1.0]]
    shot_noise_scale: float = Field(default=0.0, ge=0)
    bit_depth: int = Field(default=16, ge=2, le=16)

    @field_validator("channel_gains")
    @classmethod
    def _positive(cls, v):
        if min(v) <= 0:
            raise ValueError("channel gains must be positive")
        return v

    def to_model(self) -> SensorModel:
        return SensorModel(
            tuple(self.channel_gains),
            tuple(tuple(r) for r in self.shade_poly_coeffs),
            self.shot_noise_scale,
            self.bit_depth,
            self.layout,
        )


class SceneFile(_Model):
    schema_version: int = SCHEMA_VERSION
    fov_um: tuple[float, float]
    seed: int = 0
    n_frames: int = Field(default=1, ge=1)
    droplets: list[DropletSpec] = []
    sensor: SensorSpec = SensorSpec()

    def to_scene(self) -> Scene:
        caps = [
            DropletCap((d.x_um, d.y_um), d.a_um, d.theta0_rad, d.K_rad_per_s,
                       i if d.id is None else d.id)
            for i, d in enumerate(self.droplets)
        ]
        return Scene(tuple(caps), tuple(self.fov_um), self.seed)


# ----------------------------------------------------------- pipeline config


class OpticalSpec(_Model):
    wavelength: float = Field(default=850.0, gt=0, description="nm")
    sensor_pitch: float = Field(default=1.12, gt=0, description="um")
    delta_n: float = Field(default=0.4, gt=0)
    z_nominal: float = Field(default=750.0, description="um")
    frame_rate: float = Field(default=2.0, gt=0, description="Hz")
    upsample_factor: int = Field(default=2, ge=1)

    def to_config(self) -> OpticalConfig:
        return OpticalConfig(**self.model_dump())


class ReconSpec(_Model):
    z_search: tuple[float, float, float] = (550.0, 950.0, 10.0)
    gs_iterations: int = Field(default=50, ge=1)
    gs_tolerance: float = Field(default=1e-4, ge=0)
    patch_size: int = 512
    support_threshold_sigma: float = Field(default=3.0, gt=0)
    tile_overlap: int = Field(default=32, ge=0)
    pad_factor: float = Field(default=2.0, ge=1)
    focus_iterations: int = Field(default=10, ge=1)
    focus_window: int = Field(default=256, ge=8)

    @field_validator("patch_size")
    @classmethod
    def _pow2(cls, v):
        if v < 8 or v & (v - 1):
            raise ValueError("patch_size must be a power of two >= 8")
        return v

    @field_validator("z_search")
    @classmethod
    def _range(cls, v):
        if not (v[0] < v[1] and v[2] > 0):
            raise ValueError("z_search must be (min, max, step) with min < max and step > 0")
        return v

    def to_settings(self) -> ReconSettings:
        return ReconSettings(**self.model_dump())


class DetectSpec(_Model):
    sigma: float = Field(default=5.0, gt=0)
    min_contrast: float = Field(default=0.12, ge=0)
    extent_ratio: float = Field(default=0.4, ge=0, le=1)
    peak_ratio: float = Field(default=0.1, ge=0, lt=1)
    min_overlap: float = Field(default=0.3, gt=0, le=1)
    min_trace_frames: int = Field(default=5, ge=2)
    crop_pad: int = Field(default=16, ge=0)
    # correct peak heights for the sensor band limit of the reconstruction
    band_limit_correction: bool = True


class StatsSpec(_Model):
    trim: float = Field(default=0.01, ge=0, lt=0.5)
    bins_per_decade: int = Field(default=16, ge=1)
    size_range_um: tuple[float, float] = (0.5, 19.8)

    @field_validator("size_range_um")
    @classmethod
    def _range(cls, v):
        if not 0 < v[0] < v[1]:
            raise ValueError("size range must satisfy 0 < lo < hi")
        return v


class SimulateSpec(_Model):
    pad_factor: float = Field(default=2.0, ge=1)
    frame_format: Literal["png", "raw"] = "png"


class IOSpec(_Model):
    input_dir: str | None = None
    output_dir: str | None = None
    dump_debug: bool = False

    @model_validator(mode="after")
    def _distinct(self):
        if self.input_dir and self.output_dir:
            if Path(self.input_dir).resolve() == Path(self.output_dir).resolve():
                raise ValueError("input_dir and output_dir must differ")
        return self


class PipelineConfig(_Model):
    schema_version: int = SCHEMA_VERSION
    optical: OpticalSpec = OpticalSpec()
    recon: ReconSpec = ReconSpec()
    detect: DetectSpec = DetectSpec()
    stats: StatsSpec = StatsSpec()
    simulate: SimulateSpec = SimulateSpec()
    io: IOSpec = IOSpec()


def _loc(err: dict) -> str:
    return ".".join(str(p) for p in err["loc"]) or "<root>"


def parse_model(data, model: type[BaseModel], source: str = "<data>"):
    try:
        obj = model.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        raise ConfigError(f"{source}: {first['msg']}", _loc(first)) from None
    version = getattr(obj, "schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{source}: unsupported schema_version {version}", "schema_version")
    return obj


def read_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise PipelineIOError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def load_model(path, model: type[BaseModel]):
    return parse_model(read_json(path), model, str(path))


def load_config(path=None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    return load_model(path, PipelineConfig)


def dump_json(data, path) -> None:
    write_text(path, json.dumps(data, indent=2) + "\n")


def write_text(path, text: str) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise PipelineIOError(f"cannot write {path}: {exc.strerror}") from None


def ensure_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PipelineIOError(f"cannot create {path}: {exc.strerror}") from None
    if not path.is_dir():
        raise PipelineIOError(f"{path} is not a directory")
    return path


# -------------------------------------------------------------- frame stacks


def frame_name(k: int, fmt: str) -> str:
    return f"frame_{k:06d}.{fmt}"


def write_frame(frame: RawFrame, path: Path, fmt: str = "png") -> None:
    px = np.ascontiguousarray(frame.pixels, dtype=np.uint16)
    try:
        if fmt == "png":
            Image.fromarray(px).save(path, format="PNG")
        elif fmt == "raw":
            path.write_bytes(px.astype("<u2").tobytes())
            sidecar = {"schema_version": SCHEMA_VERSION, "width": px.shape[1],
                       "height": px.shape[0], "dtype": "<u2", "timestamp_s": frame.timestamp}
            path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")
        else:
            raise ConfigError(f"unknown frame format {fmt!r}", "simulate.frame_format")
    except OSError as exc:
        raise PipelineIOError(f"cannot write {path}: {exc.strerror}") from None


def write_frame_stack(frames, out_dir, frame_rate: float, fmt: str = "png", extra: dict | None = None) -> dict:
    """Write frames one at a time (``frames`` may be a lazy iterator) plus the manifest."""
    out = ensure_dir(out_dir)
    first = None
    times = []
    for k, fr in enumerate(frames):
        write_frame(fr, out / frame_name(k, fmt), fmt)
        first = first or fr
        times.append(fr.timestamp)
    if first is None:
        raise InvalidInputError("frame stack is empty")
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "frame_rate_hz": frame_rate,
        "layout": first.layout.value,
        "bit_depth": first.bit_depth,
        "count": len(times),
        "width": int(first.pixels.shape[1]),
        "height": int(first.pixels.shape[0]),
        "format": fmt,
        "files": [frame_name(k, fmt) for k in range(len(times))],
        "timestamps_s": times,
    }
    if extra:
        manifest.update(extra)
    dump_json(manifest, out / MANIFEST)
    return manifest


class Manifest(_Model):
    model_config = ConfigDict(extra="allow")
    schema_version: int = SCHEMA_VERSION
    frame_rate_hz: float = Field(gt=0)
    layout: Layout
    bit_depth: int = Field(ge=2, le=16)
    count: int = Field(ge=0)
    width: int | None = None
    height: int | None = None
    format: Literal["png", "raw"] = "png"
    files: list[str] | None = None
    timestamps_s: list[float] | None = None


class FrameStack:
    """Lazy reader for a directory written by :func:`write_frame_stack`."""

    def __init__(self, directory):
        self.directory = Path(directory)
        path = self.directory / MANIFEST
        if not path.is_file():
            raise PipelineIOError(f"no {MANIFEST} in {self.directory}")
        self.manifest = load_model(path, Manifest)
        m = self.manifest
        self.files = m.files or [frame_name(k, m.format) for k in range(m.count)]
        if len(self.files) != m.count:
            raise ConfigError("file list length differs from count", "count")
        self.timestamps = m.timestamps_s or [k / m.frame_rate_hz for k in range(m.count)]
        missing = [f for f in self.files if not (self.directory / f).is_file()]
        if missing:
            raise PipelineIOError(f"missing frame files: {', '.join(missing[:5])}")

    def __len__(self) -> int:
        return self.manifest.count

    def __getitem__(self, k: int) -> RawFrame:
        m = self.manifest
        path = self.directory / self.files[k]
        try:
            if m.format == "png":
                with Image.open(path) as img:
                    px = np.array(img)
            else:
                raw = np.frombuffer(path.read_bytes(), dtype="<u2")
                px = raw.reshape(m.height, m.width)
        except (OSError, ValueError) as exc:
            raise PipelineIOError(f"cannot read {path}: {exc}") from None
        return RawFrame(px.astype(np.uint16), float(self.timestamps[k]), m.layout, m.bit_depth)

    def __iter__(self) -> Iterator[RawFrame]:
        for k in range(len(self)):
            yield self[k]


# -------------------------------------------------------------------- tables


def write_csv(path, header: list[str], rows) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_cell(v) for v in row])
    except OSError as exc:
        raise PipelineIOError(f"cannot write {path}: {exc.strerror}") from None


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


def read_csv(path) -> list[dict]:
    try:
        with Path(path).open(newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise PipelineIOError(f"cannot read {path}: {exc.strerror}") from None
