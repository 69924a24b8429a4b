"""Synthetic degradations: bicubic downsampling, additive Gaussian noise, compositions.

The bicubic resampler follows the MATLAB ``imresize`` conventions used for
super-resolution benchmarks: cubic convolution kernel with a = -0.5, kernel
support stretched by the scale factor when shrinking (antialiasing), weights
renormalized per output sample, and symmetric (mirror) boundary extension.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Union

import numpy as np

from patchforge.errors import ConfigError, DimensionError, FormatError, InputError
from patchforge.ingest import Image, Patch, PatchSource, as_hwc, save_png
from patchforge.manifest import Manifest

log = logging.getLogger(__name__)

SUPPORTED_SCALES = (2, 3, 4)
U64 = (1 << 64) - 1


@dataclass(frozen=True)
class BicubicDown:
    scale: int

    def __post_init__(self):
        if self.scale not in SUPPORTED_SCALES:
            raise ConfigError(f"bicubic scale must be one of {SUPPORTED_SCALES}, got {self.scale}")


@dataclass(frozen=True)
class AWGN:
    sigma: float
    seed: int = 0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ConfigError(f"noise sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class Compose:
    steps: tuple

    def __post_init__(self):
        if not self.steps:
            raise ConfigError("compose needs at least one step")


DegradationSpec = Union[BicubicDown, AWGN, Compose]


def spec_to_dict(spec: DegradationSpec) -> dict:
    if isinstance(spec, BicubicDown):
        return {"model": "bicubic_down", "scale": spec.scale}
    if isinstance(spec, AWGN):
        return {"model": "awgn", "sigma": float(spec.sigma), "seed": int(spec.seed)}
    return {"model": "compose", "steps": [spec_to_dict(s) for s in spec.steps]}


def spec_from_dict(d: dict) -> DegradationSpec:
    model = d.get("model")
    if model == "bicubic_down":
        return BicubicDown(int(d["scale"]))
    if model == "awgn":
        return AWGN(float(d["sigma"]), int(d.get("seed", 0)))
    if model == "compose":
        return Compose(tuple(spec_from_dict(s) for s in d["steps"]))
    raise ConfigError(f"unknown degradation model {model!r}")


def total_scale(spec: DegradationSpec) -> int:
    if isinstance(spec, BicubicDown):
        return spec.scale
    if isinstance(spec, Compose):
        out = 1
        for s in spec.steps:
            out *= total_scale(s)
        return out
    return 1


def with_seed(spec: DegradationSpec, seed: int) -> DegradationSpec:
    if isinstance(spec, AWGN):
        return AWGN(spec.sigma, seed)
    if isinstance(spec, Compose):
        return Compose(tuple(with_seed(s, seed) for s in spec.steps))
    return spec


def cubic(x):
    """Cubic convolution kernel with a = -0.5."""
    ax = np.abs(x)
    ax2 = ax * ax
    ax3 = ax2 * ax
    return np.where(
        ax <= 1,
        1.5 * ax3 - 2.5 * ax2 + 1.0,
        np.where(ax <= 2, -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0, 0.0),
    )


@lru_cache(maxsize=64)
def resize_matrix(in_len: int, scale: int) -> np.ndarray:
    """(in_len // scale, in_len) matrix mapping one axis to its downsampled version."""
    out_len = in_len // scale
    width = 4.0 * scale
    centers = (np.arange(out_len) + 0.5) * scale - 0.5
    left = np.floor(centers - width / 2).astype(np.int64)
    taps = int(np.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = cubic((centers[:, None] - idx) / scale) / scale
    w = w / w.sum(axis=1, keepdims=True)
    period = 2 * in_len
    m = np.mod(idx, period)
    m = np.where(m < in_len, m, period - 1 - m)
    mat = np.zeros((out_len, in_len))
    rows = np.repeat(np.arange(out_len), taps)
    np.add.at(mat, (rows, m.ravel()), w.ravel())
    mat.flags.writeable = False
    return mat


def _rewrap(data, pixels, scale=1):
    if isinstance(data, Image):
        return Image(id=data.id, pixels=pixels)
    if isinstance(data, Patch):
        return Patch(pixels=pixels, source_id=data.source_id, x=data.x // scale, y=data.y // scale)
    if np.asarray(data).ndim == 2:
        return pixels[:, :, 0]
    return pixels


def bicubic_downsample(data, scale: int):
    """Shrink an Image, Patch or array by an integer factor; output clamped to 0..255."""
    if scale not in SUPPORTED_SCALES:
        raise ConfigError(f"bicubic scale must be one of {SUPPORTED_SCALES}, got {scale}")
    x = as_hwc(data)
    h, w, _ = x.shape
    if h % scale or w % scale:
        raise DimensionError(f"size {w}x{h} is not divisible by scale {scale}")
    # filter offsets from a reference pixel: weights sum to 1 only up to rounding,
    # and this keeps flat regions exactly flat
    ref = x[0, 0, :].copy()
    # rows first, then columns (MATLAB order for equal scale factors)
    tmp = np.einsum("ih,hwc->iwc", resize_matrix(h, scale), x - ref)
    out = np.einsum("jw,iwc->ijc", resize_matrix(w, scale), tmp) + ref
    np.clip(out, 0.0, 255.0, out=out)
    return _rewrap(data, out, scale)


def _noise(shape, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(shape) * sigma


def awgn(data, sigma: float, seed, clip: bool = False):
    """Add i.i.d. N(0, sigma^2) noise from a seeded generator; unclamped unless ``clip``."""
    if not sigma >= 0:
        raise ConfigError(f"noise sigma must be >= 0, got {sigma}")
    x = as_hwc(data)
    if sigma == 0:
        out = x.copy()
    else:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        out = x + _noise(x.shape, sigma, rng)
    if clip:
        np.clip(out, 0.0, 255.0, out=out)
    return _rewrap(data, out)


def degrade(data, spec: DegradationSpec, rng: np.random.Generator | None = None):
    """Apply ``spec`` left to right. With ``rng`` given, every noise step draws from it."""
    if isinstance(spec, BicubicDown):
        return bicubic_downsample(data, spec.scale)
    if isinstance(spec, AWGN):
        return awgn(data, spec.sigma, rng if rng is not None else spec.seed)
    out = data
    for step in spec.steps:
        out = degrade(out, step, rng)
    return out


def patch_seed(global_seed: int, patch_id: str) -> int:
    digest = hashlib.blake2b(patch_id.encode("utf-8"), digest_size=8).digest()
    return (int(global_seed) ^ int.from_bytes(digest, "little")) & U64


# raw float tensors: b"PFT1", u32 H, u32 W, u32 C, then little-endian f32 row-major
PFT_MAGIC = b"PFT1"
_PFT_HEADER = struct.Struct("<4sIII")


def write_pft(pixels, path) -> None:
    x = as_hwc(pixels)
    h, w, c = x.shape
    with open(path, "wb") as fh:
        fh.write(_PFT_HEADER.pack(PFT_MAGIC, h, w, c))
        fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())


def read_pft(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _PFT_HEADER.size:
        raise FormatError(f"{path}: truncated PFT1 header")
    magic, h, w, c = _PFT_HEADER.unpack_from(data)
    if magic != PFT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    expected = _PFT_HEADER.size + 4 * h * w * c
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(data)}")
    arr = np.frombuffer(data, dtype="<f4", offset=_PFT_HEADER.size).reshape(h, w, c)
    return arr.astype(np.float64)


def degrade_manifest(
    manifest: Manifest,
    spec: DegradationSpec,
    out_dir,
    seed: int = 0,
    clip: bool = False,
    raw: bool = False,
    hr_dir=None,
    image_dir=None,
    workers: int = 1,
) -> Manifest:
    """Write one degraded file per record and return the annotated manifest.

    Noise for a record is drawn from ``patch_seed(seed, patch_id)``, so output
    bytes depend only on the record itself, never on scheduling. PNG output is
    always rounded and clamped to 8 bits; ``raw`` writes PFT1 float tensors,
    clamped only when ``clip`` is set.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = int(seed) & U64
    spec = with_seed(spec, seed)
    spec_dict = spec_to_dict(spec)
    scale = total_scale(spec)
    bad_size = [r.patch_id for r in manifest.records if r.size % scale]
    if bad_size:
        raise DimensionError(
            f"{len(bad_size)} patch(es) not divisible by scale {scale}: {', '.join(bad_size[:10])}"
        )
    ext = ".pft" if raw else ".png"

    def work(rec, patch):
        s = patch_seed(seed, rec.patch_id)
        out = degrade(patch.pixels, spec, np.random.default_rng(s))
        if clip:
            out = np.clip(out, 0.0, 255.0)
        name = f"{rec.patch_id}{ext}"
        if raw:
            write_pft(out, out_dir / name)
        else:
            save_png(out, out_dir / name)
        return {"spec": spec_dict, "seed": s, "clip": bool(clip), "file": name, "shape": list(out.shape)}

    result = manifest.copy()
    source = PatchSource(result, hr_dir=hr_dir, image_dir=image_dir)
    entries, failures = source.map_patches(result.records, work, workers)
    if failures:
        raise InputError(f"missing HR patch data for {len(failures)} record(s):\n  " + "\n  ".join(failures[:50]))
    for rec, entry in zip(result.records, entries):
        rec.degradation = entry
    result.add_stage(
        {"stage": "degrade", "spec": spec_dict, "seed": seed, "clip": bool(clip), "format": "pft" if raw else "png"}
    )
    return result
