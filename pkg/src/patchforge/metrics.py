"""Per-patch representative values (loss, grad, std, freq) and PSNR.

All metrics take the clean patch on the 0..255 scale. Gradients use circular
forward differences and the frequency band is symmetric in sign on both axes,
which makes grad, std and freq exactly invariant under the eight dihedral
transforms of a square patch.
"""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path

import numpy as np

from patchforge.errors import ConfigError, DimensionError, FormatError, InputError
from patchforge.ingest import PatchSource, as_hwc, load_image
from patchforge.manifest import METRIC_KINDS, Manifest

log = logging.getLogger(__name__)

LOSS_MISSING = "loss_missing"


def _require_2d(x: np.ndarray, name: str) -> None:
    if x.shape[0] < 2 or x.shape[1] < 2:
        raise DimensionError(f"{name} needs at least 2x2 pixels, got {x.shape[0]}x{x.shape[1]}")


def grad_metric(patch) -> float:
    """Mean squared circular forward difference along both axes."""
    x = as_hwc(patch)
    _require_2d(x, "grad_metric")
    dh = np.roll(x, -1, axis=0) - x
    dw = np.roll(x, -1, axis=1) - x
    total = np.sum(dh * dh) + np.sum(dw * dw)
    return float(total / x.size)


def std_metric(patch) -> float:
    """Population standard deviation over all pixels and channels jointly."""
    d = as_hwc(patch).ravel()
    n = d.size
    # shift by a sample value: keeps 8-bit data in exact integer arithmetic
    d = d - d[0]
    s1 = float(np.sum(d))
    s2 = float(np.dot(d, d))
    num = n * s2 - s1 * s1
    return math.sqrt(num) / n if num > 0 else 0.0


def high_band_mask(height: int, width: int) -> np.ndarray:
    """Boolean (H, W) mask of DFT bins with |omega| >= pi/2 on both axes."""

    def axis(n):
        k = np.arange(n)
        folded = np.minimum(k, n - k)
        # |2*pi*folded/n| >= pi/2  <=>  4*folded >= n
        return 4 * folded >= n

    return axis(height)[:, None] & axis(width)[None, :]


def freq_metric(patch) -> float:
    """Power of the unnormalized 2-D DFT in the high band, divided by H*W*C."""
    x = as_hwc(patch)
    _require_2d(x, "freq_metric")
    h, w, c = x.shape
    # a per-channel constant offset only moves the DC bin, which is outside the band
    x = x - x[:1, :1, :]
    spec = np.fft.fft2(x, axes=(0, 1))
    power = spec.real**2 + spec.imag**2
    return float(np.sum(power[high_band_mask(h, w)]) / (h * w * c))


def mse_loss(clean, restored) -> float:
    a, b = as_hwc(clean), as_hwc(restored)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: clean {a.shape} vs restored {b.shape}")
    d = a - b
    return float(np.sum(d * d) / d.size)


def psnr(a, b, peak: float = 255.0) -> float:
    """PSNR in dB; identical inputs give ``math.inf``."""
    err = mse_loss(a, b)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def format_db(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.4f}"


METRIC_FUNCS = {"grad": grad_metric, "std": std_metric, "freq": freq_metric}


def parse_metric_list(text) -> list[str]:
    items = text.split(",") if isinstance(text, str) else list(text)
    metrics = [m.strip() for m in items if m.strip()]
    bad = [m for m in metrics if m not in METRIC_KINDS]
    if bad:
        raise ConfigError(f"unknown metric(s): {', '.join(bad)}; choose from {', '.join(METRIC_KINDS)}")
    if not metrics:
        raise ConfigError("no metrics requested")
    return [m for m in METRIC_KINDS if m in metrics]


def read_loss_csv(path) -> dict[str, float]:
    """Read a ``patch_id,loss`` sidecar file into a dict."""
    out = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["patch_id", "loss"]:
            raise FormatError(f"{path}: expected header 'patch_id,loss', got {header!r}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise FormatError(f"{path}: line {line_no}: expected 2 fields, got {len(row)}")
            try:
                value = float(row[1])
            except ValueError:
                raise FormatError(f"{path}: line {line_no}: loss {row[1]!r} is not a number") from None
            if not math.isfinite(value) or value < 0:
                raise FormatError(f"{path}: line {line_no}: loss must be finite and >= 0, got {row[1]}")
            out[row[0]] = value
    return out


def score_manifest(
    manifest: Manifest,
    metrics,
    loss_csv=None,
    restored_dir=None,
    hr_dir=None,
    image_dir=None,
    workers: int = 1,
) -> Manifest:
    """Return a copy of ``manifest`` with the requested metric scores added.

    ``loss`` needs either ``loss_csv`` (a ``patch_id,loss`` sidecar) or
    ``restored_dir`` holding ``<patch_id>.png`` network outputs. Records the
    source has no entry for get the ``loss_missing`` flag instead of a score.
    """
    metrics = parse_metric_list(metrics)
    if "loss" in metrics and loss_csv is None and restored_dir is None:
        raise ConfigError("metric 'loss' needs --loss-csv or --restored-dir")
    if loss_csv is not None and restored_dir is not None:
        raise ConfigError("give only one of --loss-csv / --restored-dir")

    out = manifest.copy()
    records = out.records
    if "loss" in metrics:
        for rec in records:
            rec.scores.pop("loss", None)
    pixel_metrics = [m for m in metrics if m in METRIC_FUNCS]
    want_restored = "loss" in metrics and restored_dir is not None

    if pixel_metrics or want_restored:
        restored_dir = Path(restored_dir) if restored_dir is not None else None

        def compute(rec, patch):
            vals = {m: METRIC_FUNCS[m](patch) for m in pixel_metrics}
            if want_restored:
                path = restored_dir / f"{rec.patch_id}.png"
                if path.is_file():
                    vals["loss"] = mse_loss(patch, load_image(path))
            return vals

        source = PatchSource(out, hr_dir=hr_dir, image_dir=image_dir)
        results, failures = source.map_patches(records, compute, workers)
        if failures:
            raise InputError("cannot load HR pixels for scoring:\n  " + "\n  ".join(failures[:20]))
        for rec, vals in zip(records, results):
            rec.scores.update(vals)

    if "loss" in metrics and loss_csv is not None:
        table = read_loss_csv(loss_csv)
        for rec in records:
            value = table.get(rec.patch_id)
            if value is None and rec.transform:
                value = table.get(rec.base_id)
            if value is not None:
                rec.scores["loss"] = value
        stray = sorted(set(table) - {r.patch_id for r in records} - {r.base_id for r in records})
        if stray:
            msg = f"loss CSV {Path(loss_csv).name}: {len(stray)} id(s) not in manifest (e.g. {', '.join(stray[:5])})"
            log.warning(msg)
            out.add_warning(msg)

    n_missing = 0
    if "loss" in metrics:
        for rec in records:
            if "loss" in rec.scores:
                if LOSS_MISSING in rec.flags:
                    rec.flags.remove(LOSS_MISSING)
            else:
                n_missing += 1
                if LOSS_MISSING not in rec.flags:
                    rec.flags.append(LOSS_MISSING)
        if n_missing:
            msg = f"{n_missing} record(s) have no loss value in the loss source"
            log.warning(msg)
            out.add_warning(msg)

    entry = {"stage": "score", "metrics": metrics}
    if "loss" in metrics:
        entry["loss_source"] = "csv" if loss_csv is not None else "restored_dir"
        entry["loss_missing"] = n_missing
    out.add_stage(entry)
    return out
