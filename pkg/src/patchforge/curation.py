"""Ranking, selection, dihedral augmentation and guideline auditing of manifests."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from patchforge import dihedral
from patchforge.errors import ConfigError, InvarianceNotAcknowledged, PatchforgeError, ScoringGapError
from patchforge.ingest import Patch, PatchSource, save_png
from patchforge.manifest import AUGMENT_SEP, METRIC_KINDS, Manifest, PatchRecord

log = logging.getLogger(__name__)

MIN_PATCHES = 30_000
HALF_BAND = (0.4, 0.7)
SELECTION_MODES = ("keep_fraction", "top_k", "threshold", "random")


@dataclass(frozen=True)
class SelectionPolicy:
    metric: str = "grad"
    mode: str = "keep_fraction"
    value: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in SELECTION_MODES:
            raise ConfigError(f"unknown selection mode {self.mode!r}")
        if self.mode != "random" and self.metric not in METRIC_KINDS:
            raise ConfigError(f"unknown metric {self.metric!r}")
        if self.mode == "keep_fraction" and not 0 < self.value <= 1:
            raise ConfigError(f"keep fraction must be in (0, 1], got {self.value}")
        if self.mode in ("top_k", "random") and (self.value < 1 or int(self.value) != self.value):
            raise ConfigError(f"{self.mode} needs an integer count >= 1, got {self.value}")
        if self.mode == "threshold" and not self.value >= 0:
            raise ConfigError(f"threshold must be >= 0, got {self.value}")

    @classmethod
    def keep_fraction(cls, metric, f):
        return cls(metric, "keep_fraction", float(f))

    @classmethod
    def top_k(cls, metric, k):
        return cls(metric, "top_k", int(k))

    @classmethod
    def threshold(cls, metric, t):
        return cls(metric, "threshold", float(t))

    @classmethod
    def random(cls, k, seed):
        return cls("grad", "random", int(k), int(seed))

    def to_dict(self) -> dict:
        d = {"mode": self.mode, "value": self.value}
        if self.mode == "random":
            d["seed"] = self.seed
        else:
            d["metric"] = self.metric
        return d


def _id_key(rec: PatchRecord):
    # augmented copies sort right after their base patch
    return rec.base_id, rec.transform


def rank(records, metric: str) -> list[PatchRecord]:
    """Records by score descending, ties by ascending patch id."""
    return sorted(records, key=lambda r: (-r.scores[metric], _id_key(r)))


def keep_count(fraction: float, n: int) -> int:
    # decimal reading of the fraction, so 0.1 * 30 is exactly 3
    return math.ceil(Fraction(repr(float(fraction))) * n)


def select(manifest: Manifest, policy: SelectionPolicy, prune: bool = False) -> Manifest:
    """Rank the currently selected records and keep the policy's share of them.

    Records dropped here (or by an earlier selection) stay in the manifest with
    ``selected = False`` unless ``prune`` is set.
    """
    out = manifest.copy()
    candidates = [r for r in out.records if r.selected]
    previously_dropped = [r for r in out.records if not r.selected]
    n = len(candidates)

    if policy.mode == "random":
        ordered = sorted(candidates, key=_id_key)
        perm = np.random.default_rng(policy.seed).permutation(n)
        ranked = [ordered[i] for i in perm]
        kept = min(int(policy.value), n)
    else:
        missing = [r.patch_id for r in candidates if policy.metric not in r.scores]
        if missing:
            raise ScoringGapError(policy.metric, missing)
        ranked = rank(candidates, policy.metric)
        if policy.mode == "keep_fraction":
            kept = keep_count(policy.value, n)
        elif policy.mode == "top_k":
            kept = min(int(policy.value), n)
        else:
            kept = sum(1 for r in ranked if r.scores[policy.metric] >= policy.value)

    for i, rec in enumerate(ranked):
        rec.selected = i < kept
    records = ranked + previously_dropped
    if prune:
        records = [r for r in records if r.selected]
    out.records = records
    out.add_stage(dict(policy.to_dict(), stage="select", candidates=n, kept=kept, pruned=bool(prune)))
    return out


def dihedral_apply(patch: Patch, t: int) -> Patch:
    return Patch(pixels=dihedral.apply_array(patch.pixels, t), source_id=patch.source_id, x=patch.x, y=patch.y)


def parse_transforms(text) -> list[int]:
    items = text.split(",") if isinstance(text, str) else list(text)
    try:
        ids = sorted({int(str(t).strip()) for t in items if str(t).strip()})
    except ValueError:
        raise ConfigError(f"transform ids must be integers 0..7, got {text!r}") from None
    if not ids or any(t not in dihedral.ALL_TRANSFORMS for t in ids):
        raise ConfigError(f"transform ids must be integers 0..7, got {text!r}")
    return ids


INVARIANCE_MESSAGE = (
    "refusing to augment: flip/rotation augmentation is only valid when the restoration task "
    "is itself invariant to flips and rotations (spatially symmetric degradation operator, "
    "pixel-wise independent noise). Confirm this with --assert-invariant."
)


def augment_manifest(
    manifest: Manifest,
    transforms,
    invariance_ack: bool,
    materialize_dir=None,
    hr_dir=None,
    image_dir=None,
    workers: int = 1,
) -> Manifest:
    """Expand every selected record into one record per dihedral transform.

    Scores are copied: grad, std and freq are dihedral invariant. The identity
    copy keeps the original id; other copies get a ``#t<id>`` suffix.
    """
    if not invariance_ack:
        raise InvarianceNotAcknowledged(INVARIANCE_MESSAGE)
    transforms = parse_transforms(transforms)
    already = [r.patch_id for r in manifest.records if r.transform]
    if already:
        raise PatchforgeError(f"manifest is already augmented ({len(already)} transformed records)")

    out = manifest.copy()
    records = []
    for rec in out.records:
        if not rec.selected:
            records.append(rec)
            continue
        for t in transforms:
            copy_ = PatchRecord(
                patch_id=rec.patch_id if t == 0 else f"{rec.patch_id}{AUGMENT_SEP}{t}",
                source_id=rec.source_id,
                x=rec.x,
                y=rec.y,
                size=rec.size,
                scores=dict(rec.scores),
                selected=True,
                transform=t,
                degradation=rec.degradation,
                flags=list(rec.flags),
                extras=dict(rec.extras),
            )
            records.append(copy_)
    out.records = records

    if materialize_dir is not None:
        mdir = Path(materialize_dir)
        mdir.mkdir(parents=True, exist_ok=True)
        todo = [r for r in records if r.selected]

        def write(rec, patch):
            save_png(patch.pixels, mdir / f"{rec.patch_id}.png")

        _, failures = PatchSource(out, hr_dir=hr_dir, image_dir=image_dir).map_patches(todo, write, workers)
        if failures:
            raise PatchforgeError("cannot materialize:\n  " + "\n  ".join(failures[:20]))

    out.add_stage({"stage": "augment", "transforms": transforms, "materialized": materialize_dir is not None})
    return out


@dataclass
class Check:
    name: str
    status: str  # PASS, WARN or FAIL
    code: str
    detail: str

    def to_dict(self):
        return {"name": self.name, "status": self.status, "code": self.code, "detail": self.detail}


@dataclass
class GuidelineReport:
    checks: list[Check] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.status == "PASS" for c in self.checks)

    @property
    def codes(self) -> list[str]:
        return [c.code for c in self.checks if c.status != "PASS"]

    def to_dict(self) -> dict:
        return {"ok": self.ok, "warnings": self.codes, "checks": [c.to_dict() for c in self.checks]}

    def render(self) -> str:
        lines = [f"[{c.status}] {c.name}: {c.detail}" + ("" if c.status == "PASS" else f" ({c.code})") for c in self.checks]
        lines.append("guideline: " + ("all checks pass" if self.ok else "issues: " + ", ".join(self.codes)))
        return "\n".join(lines)


def guideline_check(manifest: Manifest) -> GuidelineReport:
    """Audit a manifest against the patch-mining recommendations.

    Counts are over distinct source patches, so augmented copies do not count
    towards the minimum patch budget.
    """
    report = GuidelineReport()
    selected_bases = {r.base_id for r in manifest.records if r.selected}
    all_bases = {r.base_id for r in manifest.records}
    n_sel = len(selected_bases)

    if n_sel >= MIN_PATCHES:
        report.checks.append(Check("patch budget", "PASS", "OK", f"{n_sel} selected patches (>= {MIN_PATCHES})"))
    else:
        report.checks.append(
            Check("patch budget", "FAIL", "OVERFITTING_RISK", f"only {n_sel} selected patches; at least {MIN_PATCHES} are recommended")
        )

    sel = manifest.last_stage("select")
    lo, hi = HALF_BAND
    if sel is None:
        report.checks.append(Check("selection", "FAIL", "NO_SELECTION", "no selection stage recorded"))
    else:
        total = sel.get("candidates") or len(all_bases)
        frac = n_sel / total if total else 0.0
        metric = sel.get("metric", "random" if sel.get("mode") == "random" else "?")
        if metric != "grad":
            report.checks.append(Check("selection", "WARN", "NOT_GRAD_SELECTION", f"selected by {metric}, gradient magnitude recommended"))
        elif not lo <= frac <= hi:
            report.checks.append(
                Check("selection", "WARN", "NOT_ABOUT_HALF", f"kept {n_sel}/{total} = {frac:.3f}; about half ({lo}-{hi}) recommended")
            )
        else:
            report.checks.append(Check("selection", "PASS", "OK", f"kept {n_sel}/{total} = {frac:.3f} by grad"))

    tags = sorted({r.transform for r in manifest.records if r.selected})
    if tags == list(dihedral.ALL_TRANSFORMS):
        report.checks.append(Check("augmentation", "PASS", "OK", "all 8 flip/rotation transforms present"))
    elif any(tags):
        report.checks.append(Check("augmentation", "WARN", "PARTIAL_AUGMENTATION", f"transforms present: {tags}"))
    else:
        report.checks.append(Check("augmentation", "FAIL", "NO_AUGMENTATION", "no flip/rotation augmentation tags"))

    grid = manifest.provenance.get("grid")
    if not grid:
        report.checks.append(Check("stride", "FAIL", "GRID_UNKNOWN", "no grid settings in provenance"))
    else:
        p, s = grid["patch_size"], grid["stride"]
        if s >= p:
            report.checks.append(Check("stride", "PASS", "OK", f"stride {s} >= patch size {p} (non-overlapping)"))
        else:
            est = len(all_bases) * (s / p) ** 2
            if est >= MIN_PATCHES:
                report.checks.append(
                    Check("stride", "WARN", "OVERLAP_NOT_NEEDED",
                          f"stride {s} < patch size {p}; non-overlapping extraction would still give ~{int(est)} patches")
                )
            else:
                report.checks.append(Check("stride", "PASS", "OK", f"overlapping stride {s} < {p} used for scarce data"))
    return report
