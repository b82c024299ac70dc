"""File formats: key=value run configs, binary datasets and 8-bit PGM images.

Dataset layout (little-endian)::

    b"FMDS"  u16 version
    f64 core_radius, numerical_aperture, wavelength, window_half_width
    u32 grid_resolution, n_modes, count, resolution
    count x (f32 label[2N-1], f32 image[resolution**2] row-major)
"""

from __future__ import annotations

import os
import re
import struct
import tempfile
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigError, FormatError
from .fiber_modes import DEFAULT_WINDOW_FACTOR, FiberSpec, GridSpec
from .field_synth import normalize_max, quantize_8bit

DATASET_MAGIC = b"FMDS"
DATASET_VERSION = 1
_DATASET_HEAD = struct.Struct("<4sH4d4I")
DATASET_HEADER_SIZE = _DATASET_HEAD.size


# ----------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class RunConfig:
    """Plain-text run settings; ``core_radius``, ``numerical_aperture`` and
    ``wavelength`` are required, everything else has a default."""

    core_radius: float
    numerical_aperture: float
    wavelength: float
    window_factor: float = DEFAULT_WINDOW_FACTOR
    modes: int = 3
    resolution: int = 64
    preset: str = "compact"
    samples_per_epoch: int = 10_000
    batch_size: int = 64
    epochs: int = 10
    lr_schedule: tuple[tuple[int, float], ...] = ((0, 0.01),)
    seed: int = 0
    noise_sigma: float = 0.0
    holdout_size: int = 200
    eval_count: int = 1000
    noise_levels: tuple[float, ...] = (0.0, 0.08, 0.16, 0.32)

    REQUIRED = ("core_radius", "numerical_aperture", "wavelength")

    @property
    def fiber(self) -> FiberSpec:
        return FiberSpec(self.core_radius, self.numerical_aperture, self.wavelength)

    def grid(self, resolution: int | None = None) -> GridSpec:
        return GridSpec.for_fiber(self.fiber, resolution or self.resolution, self.window_factor)

    def replace(self, **changes) -> "RunConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return RunConfig(**values)


def _parse_schedule(text: str) -> tuple[tuple[int, float], ...]:
    # "0:0.01, 20:0.001"
    out = []
    for item in text.split(","):
        epoch, _, lr = item.partition(":")
        out.append((int(epoch), float(lr)))
    return tuple(out)


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(","))


_PARSERS = {
    "core_radius": float, "numerical_aperture": float, "wavelength": float,
    "window_factor": float, "modes": int, "resolution": int, "preset": str,
    "samples_per_epoch": int, "batch_size": int, "epochs": int,
    "lr_schedule": _parse_schedule, "seed": int, "noise_sigma": float,
    "holdout_size": int, "eval_count": int, "noise_levels": _parse_floats,
}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        if key not in _PARSERS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _PARSERS[key](value)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {value!r}") from None
    missing = [k for k in RunConfig.REQUIRED if k not in values]
    if missing:
        raise ConfigError(f"{source}: missing required keys: {', '.join(missing)}")
    cfg = RunConfig(**values)
    try:
        cfg.fiber
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text(), str(path))


# ----------------------------------------------------------------------------
# atomic output


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write via a temporary file in the same directory, so failures leave no partial file."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


# ----------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class DatasetHeader:
    fiber: FiberSpec
    grid: GridSpec
    n_modes: int
    count: int
    resolution: int

    @property
    def label_size(self) -> int:
        return 2 * self.n_modes - 1

    @property
    def record_size(self) -> int:
        return 4 * (self.label_size + self.resolution ** 2)

    def pack(self) -> bytes:
        f, g = self.fiber, self.grid
        return _DATASET_HEAD.pack(DATASET_MAGIC, DATASET_VERSION, f.core_radius,
                                  f.numerical_aperture, f.wavelength, g.window_half_width,
                                  g.resolution, self.n_modes, self.count, self.resolution)


def encode_dataset(header: DatasetHeader, labels: NDArray, images: NDArray) -> bytes:
    n = header.count
    if labels.shape != (n, header.label_size) or images.shape != (n, header.resolution,
                                                                    header.resolution):
        raise FormatError("labels/images do not match the dataset header")
    body = np.concatenate((labels.reshape(n, header.label_size),
                           images.reshape(n, header.resolution ** 2)), axis=1)
    return header.pack() + np.ascontiguousarray(body, dtype="<f4").tobytes()


def decode_dataset(data: bytes) -> tuple[DatasetHeader, NDArray, NDArray]:
    if len(data) < DATASET_HEADER_SIZE:
        raise FormatError(f"dataset truncated at byte {len(data)} inside the "
                          f"{DATASET_HEADER_SIZE}-byte header")
    magic, version, a, na, lam, half, grid_res, n, count, res = _DATASET_HEAD.unpack_from(data)
    if magic != DATASET_MAGIC:
        raise FormatError("not a dataset file (bad magic)")
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    try:
        header = DatasetHeader(FiberSpec(a, na, lam), GridSpec(grid_res, half), n, count, res)
    except ValueError as exc:
        raise FormatError(f"invalid dataset header: {exc}") from None
    if n < 1:
        raise FormatError("dataset declares zero modes")
    expected = DATASET_HEADER_SIZE + count * header.record_size
    if len(data) < expected:
        record = (len(data) - DATASET_HEADER_SIZE) // header.record_size
        raise FormatError(f"dataset truncated at byte {len(data)}: record {record} of {count} "
                          f"incomplete (expected {expected} bytes)")
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes after {count} records")
    body = np.frombuffer(data, dtype="<f4", offset=DATASET_HEADER_SIZE).astype(np.float32)
    body = body.reshape(count, header.label_size + res * res)
    labels = body[:, :header.label_size]
    images = body[:, header.label_size:].reshape(count, res, res)
    return header, labels, images


def write_dataset(path, header, labels, images) -> None:
    atomic_write_bytes(path, encode_dataset(header, labels, images))


def read_dataset(path) -> tuple[DatasetHeader, NDArray, NDArray]:
    return decode_dataset(Path(path).read_bytes())


# ----------------------------------------------------------------------------
# PGM


_PGM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def encode_pgm(image: NDArray) -> bytes:
    """Max-normalize, quantize to 8 bits and emit binary P5."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise FormatError(f"PGM needs a 2-D image, got shape {image.shape}")
    pixels = np.rint(quantize_8bit(image) * 255).astype(np.uint8)
    h, w = image.shape
    return f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes()


def decode_pgm(data: bytes) -> NDArray:
    """Parse binary P5 (maxval < 256) and return the max-normalized float image."""
    pos = 0
    tokens = []
    for what in ("magic", "width", "height", "maxval"):
        m = _PGM_TOKEN.match(data, pos)
        if m is None:
            raise FormatError(f"PGM header truncated at byte {pos} (expected {what})")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {tokens[0][:8]!r} at byte 0)")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"non-numeric PGM header field before byte {pos}") from None
    if width < 1 or height < 1 or not 0 < maxval < 256:
        raise FormatError(f"unsupported PGM geometry {width}x{height} maxval {maxval}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError(f"PGM header not terminated by whitespace at byte {pos}")
    pos += 1
    need = width * height
    if len(data) - pos < need:
        raise FormatError(f"PGM payload truncated at byte {len(data)}: expected {need} pixel "
                          f"bytes from offset {pos}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    return normalize_max(pixels.reshape(height, width).astype(float))


def write_image(path, image: NDArray) -> None:
    atomic_write_bytes(path, encode_pgm(image))


def read_image(path) -> NDArray:
    return decode_pgm(Path(path).read_bytes())
