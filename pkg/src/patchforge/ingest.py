"""Image decoding and grid patch extraction."""

from __future__ import annotations

import hashlib
import io
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

from patchforge import dihedral
from patchforge.errors import BoundsError, ConfigError, FormatError, InputError
from patchforge.manifest import Manifest, PatchRecord, make_patch_id, new_provenance
from patchforge.parallel import ordered_map

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")
_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


@dataclass(frozen=True, eq=False)
class Image:
    """A decoded raster; ``pixels`` is float64 (H, W, C) on the 0..255 scale."""

    id: str
    pixels: np.ndarray

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[0] < 1 or px.shape[1] < 1 or px.shape[2] not in (1, 3):
            raise FormatError(f"image {self.id!r}: pixels must be HxWx1 or HxWx3, got {px.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass(frozen=True, eq=False)
class Patch:
    """A crop of an image. ``x``/``y`` are the top-left corner in source coordinates."""

    pixels: np.ndarray
    source_id: str = ""
    x: int = 0
    y: int = 0

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class GridSpec:
    patch_size: int = 96
    stride: int = 120
    scale_align: int = 1
    cover_edges: bool = False

    def __post_init__(self):
        if self.patch_size < 2:
            raise ConfigError(f"patch_size must be >= 2, got {self.patch_size}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.scale_align < 1:
            raise ConfigError(f"scale_align must be >= 1, got {self.scale_align}")
        if self.scale_align > 1 and (self.patch_size % self.scale_align or self.stride % self.scale_align):
            raise ConfigError(
                f"patch_size ({self.patch_size}) and stride ({self.stride}) "
                f"must be multiples of scale_align ({self.scale_align})"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(**{k: d[k] for k in ("patch_size", "stride", "scale_align", "cover_edges") if k in d})


def as_hwc(data) -> np.ndarray:
    """Pixel array of a Patch, Image or raw array as float64 (H, W, C)."""
    px = data.pixels if isinstance(data, (Image, Patch)) else data
    px = np.asarray(px, dtype=np.float64)
    if px.ndim == 2:
        px = px[:, :, None]
    if px.ndim != 3:
        raise FormatError(f"expected a 2-D or 3-D pixel array, got shape {px.shape}")
    return px


def _png_bit_depth(head: bytes) -> int | None:
    if head[:8] == _PNG_SIGNATURE and head[12:16] == b"IHDR" and len(head) > 24:
        return head[24]
    return None


def decode_image(data: bytes, image_id: str, name: str = "") -> Image:
    name = name or image_id
    depth = _png_bit_depth(data[:32])
    if depth is not None and depth > 8:
        raise FormatError(f"{name}: {depth}-bit PNG is not supported (8-bit only)")
    try:
        with PILImage.open(io.BytesIO(data)) as im:
            im.load()
            mode = im.mode
            if mode == "1":
                im = im.convert("L")
            elif mode == "P":
                im = im.convert("RGBA" if "transparency" in im.info else "RGB")
            elif mode == "PA":
                im = im.convert("RGBA")
            mode = im.mode
            if mode in ("RGBA", "LA"):
                alpha = np.asarray(im.getchannel("A"))
                if alpha.min() != 255:
                    raise FormatError(f"{name}: images with transparency are not supported")
                im = im.convert("RGB" if mode == "RGBA" else "L")
                mode = im.mode
            if mode not in ("L", "RGB"):
                raise FormatError(f"{name}: unsupported pixel mode {mode!r} (need 8-bit grayscale or RGB)")
            arr = np.asarray(im, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise FormatError(f"{name}: not a decodable image ({exc})") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    pixels = arr.astype(np.float64)
    pixels.flags.writeable = False
    return Image(id=image_id, pixels=pixels)


def load_image(path) -> Image:
    """Decode a PNG/JPEG/BMP file; 8-bit value ``k`` becomes the real value ``k``."""
    path = Path(path)
    with open(path, "rb") as fh:
        data = fh.read()
    return decode_image(data, path.stem, str(path))


def save_png(pixels, path) -> None:
    """Write pixels as an 8-bit PNG (rounded and clamped to 0..255)."""
    px = as_hwc(pixels)
    arr = np.clip(np.rint(px), 0, 255).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    PILImage.fromarray(arr).save(path, format="PNG")


def _axis_positions(length: int, grid: GridSpec) -> list[int]:
    p, s = grid.patch_size, grid.stride
    if length < p:
        return []
    positions = list(range(0, length - p + 1, s))
    if grid.cover_edges:
        flush = (length - p) // grid.scale_align * grid.scale_align
        if flush > positions[-1]:
            positions.append(flush)
    return positions


def enumerate_grid(height: int, width: int, grid: GridSpec) -> list[tuple[int, int]]:
    """Top-left (x, y) crop positions in row-major order (y outer, x inner)."""
    xs = _axis_positions(width, grid)
    return [(x, y) for y in _axis_positions(height, grid) for x in xs]


def crop_patch(image: Image, x: int, y: int, size: int) -> Patch:
    if x < 0 or y < 0 or size < 1 or x + size > image.width or y + size > image.height:
        raise BoundsError(
            f"window x={x}, y={y}, size={size} exceeds image {image.id!r} ({image.width}x{image.height})"
        )
    px = image.pixels[y : y + size, x : x + size, :].copy()
    px.flags.writeable = False
    return Patch(pixels=px, source_id=image.id, x=x, y=y)


def list_image_files(image_dir) -> list[Path]:
    image_dir = Path(image_dir)
    if not image_dir.is_dir():
        raise InputError(f"input directory {image_dir} does not exist")
    files = [p for p in image_dir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS]
    return sorted(files, key=lambda p: (p.stem, p.name))


def _extract_one(args):
    path, grid, save_dir = args
    data = path.read_bytes()
    digest = hashlib.sha256(data).hexdigest()
    try:
        image = decode_image(data, path.stem, path.name)
    except (FormatError, OSError) as exc:
        return path, digest, None, [], f"skipped {path.name}: {exc}"
    positions = enumerate_grid(image.height, image.width, grid)
    records = []
    for x, y in positions:
        pid = make_patch_id(image.id, x, y)
        records.append(PatchRecord(patch_id=pid, source_id=image.id, x=x, y=y, size=grid.patch_size))
        if save_dir is not None:
            save_png(crop_patch(image, x, y, grid.patch_size).pixels, Path(save_dir) / f"{pid}.png")
    warning = None
    if not positions:
        warning = (
            f"{path.name}: image {image.width}x{image.height} is smaller than "
            f"patch size {grid.patch_size}; no patches"
        )
    meta = {"file": path.name, "height": image.height, "width": image.width, "channels": image.channels}
    return path, digest, meta, records, warning


def extract_all(image_dir, grid: GridSpec, workers: int = 1, save_patches=None) -> Manifest:
    """Grid-crop every decodable image in ``image_dir`` into one manifest.

    Images are processed in id order and positions in row-major order, so the
    result does not depend on ``workers``. Undecodable files are skipped with a
    warning that is also kept in the manifest provenance.
    """
    files = list_image_files(image_dir)
    if not files:
        raise InputError(f"no image files ({', '.join(IMAGE_EXTENSIONS)}) in {image_dir}")
    if save_patches is not None:
        Path(save_patches).mkdir(parents=True, exist_ok=True)

    results = ordered_map(_extract_one, [(p, grid, save_patches) for p in files], workers)

    provenance = new_provenance()
    provenance["source_dir"] = str(image_dir)
    provenance["grid"] = grid.to_dict()
    images = {}
    records = []
    dir_hash = hashlib.sha256()
    for path, digest, meta, recs, warning in results:
        dir_hash.update(f"{path.name}\0{digest}\n".encode())
        if warning:
            log.warning(warning)
            provenance["warnings"].append(warning)
        if meta is None:
            continue
        if path.stem in images:
            msg = f"skipped {path.name}: image id {path.stem!r} already taken by {images[path.stem]['file']}"
            log.warning(msg)
            provenance["warnings"].append(msg)
            continue
        images[path.stem] = dict(meta, sha256=digest)
        records.extend(recs)
    if not images:
        raise InputError(f"no decodable images in {image_dir}")
    provenance["source_digest"] = dir_hash.hexdigest()
    provenance["images"] = images
    provenance["stages"].append({"stage": "extract", "images": len(images), "patches": len(records)})
    return Manifest(records=records, provenance=provenance)


class PatchSource:
    """Loads the clean (HR) pixels of manifest records.

    Pixels come from ``hr_dir/<patch_id>.png`` when a directory of saved
    patches is given, otherwise they are re-cropped from the source images
    named in the manifest provenance. The record's dihedral transform tag is
    applied to the loaded pixels.
    """

    def __init__(self, manifest: Manifest, hr_dir=None, image_dir=None):
        self.hr_dir = Path(hr_dir) if hr_dir is not None else None
        src = image_dir if image_dir is not None else manifest.provenance.get("source_dir")
        self.image_dir = Path(src) if src is not None else None
        self.images = manifest.provenance.get("images", {})

    def load_source(self, source_id: str) -> Image:
        meta = self.images.get(source_id)
        if meta is None or self.image_dir is None:
            raise InputError(f"source image {source_id!r} is not recorded in the manifest provenance")
        path = self.image_dir / meta["file"]
        image = load_image(path)
        return Image(id=source_id, pixels=image.pixels)

    def patch(self, rec: PatchRecord, image: Image | None = None) -> Patch:
        if self.hr_dir is not None:
            path = self.hr_dir / f"{rec.base_id}.png"
            px = load_image(path).pixels
            if px.shape[0] != rec.size or px.shape[1] != rec.size:
                raise InputError(f"{path}: expected {rec.size}x{rec.size} patch, got {px.shape[1]}x{px.shape[0]}")
            patch = Patch(pixels=px, source_id=rec.source_id, x=rec.x, y=rec.y)
        else:
            if image is None:
                image = self.load_source(rec.source_id)
            patch = crop_patch(image, rec.x, rec.y, rec.size)
        if rec.transform:
            patch = Patch(
                pixels=dihedral.apply_array(patch.pixels, rec.transform),
                source_id=patch.source_id,
                x=patch.x,
                y=patch.y,
            )
        return patch

    def group_by_source(self, indices_records):
        """Group ``(index, record)`` pairs by source image, preserving first-seen order."""
        groups: dict[str, list] = {}
        for idx, rec in indices_records:
            groups.setdefault(rec.source_id, []).append((idx, rec))
        return list(groups.items())

    def map_patches(self, records, fn, workers: int = 1):
        """Evaluate ``fn(record, patch)`` for every record; returns results in record order.

        Each worker task decodes one source image once. Failures to obtain a
        record's pixels are collected and returned as ``(results, failed_ids)``
        with ``None`` in the failed slots.
        """

        def run_group(group):
            source_id, items = group
            out = []
            image = None
            if self.hr_dir is None:
                try:
                    image = self.load_source(source_id)
                except (InputError, OSError) as exc:
                    return [(idx, None, f"{rec.patch_id}: {exc}") for idx, rec in items]
            for idx, rec in items:
                try:
                    patch = self.patch(rec, image)
                except (InputError, BoundsError, OSError) as exc:
                    out.append((idx, None, f"{rec.patch_id}: {exc}"))
                    continue
                out.append((idx, fn(rec, patch), None))
            return out

        groups = self.group_by_source(enumerate(records))
        results = [None] * len(records)
        failures = []
        for chunk in ordered_map(run_group, groups, workers):
            for idx, value, err in chunk:
                results[idx] = value
                if err is not None:
                    failures.append((idx, err))
        failures.sort()
        return results, [err for _, err in failures]
