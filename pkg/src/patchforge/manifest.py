"""Manifest data model and JSON-lines persistence.

A manifest file is UTF-8 JSON lines: the first line is a header object
``{"schema": "patchforge/1", "provenance": {...}}`` and every following line is
one patch record. Record keys are always written in the same order and floats
use Python's shortest round-trip repr, so writing the same manifest twice gives
byte-identical files.
"""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from patchforge import SCHEMA_VERSION, __version__
from patchforge.errors import ConfigError, ManifestParseError, SchemaVersionError, ScoringGapError

METRIC_KINDS = ("loss", "grad", "std", "freq")
RECORD_KEYS = (
    "patch_id",
    "source_id",
    "x",
    "y",
    "size",
    "scores",
    "selected",
    "transform",
    "degradation",
    "flags",
)
AUGMENT_SEP = "#t"


def make_patch_id(image_id: str, x: int, y: int) -> str:
    return f"{image_id}_x{x}_y{y}"


@dataclass
class PatchRecord:
    patch_id: str
    source_id: str
    x: int
    y: int
    size: int
    scores: dict[str, float] = field(default_factory=dict)
    selected: bool = True
    transform: int = 0
    degradation: dict | None = None
    flags: list[str] = field(default_factory=list)
    extras: dict[str, Any] = field(default_factory=dict)

    @property
    def base_id(self) -> str:
        """Id of the un-augmented patch this record derives from."""
        if self.transform and AUGMENT_SEP in self.patch_id:
            return self.patch_id.rsplit(AUGMENT_SEP, 1)[0]
        return self.patch_id

    def copy(self) -> "PatchRecord":
        # fields hold JSON values; only the degradation entry nests containers
        return PatchRecord(
            self.patch_id, self.source_id, self.x, self.y, self.size,
            dict(self.scores), self.selected, self.transform,
            copy.deepcopy(self.degradation) if self.degradation else None, list(self.flags),
            copy.deepcopy(self.extras) if self.extras else {},
        )

    def to_json_obj(self) -> dict:
        obj = {
            "patch_id": self.patch_id,
            "source_id": self.source_id,
            "x": self.x,
            "y": self.y,
            "size": self.size,
            "scores": {k: float(self.scores[k]) for k in METRIC_KINDS if k in self.scores},
            "selected": self.selected,
            "transform": self.transform,
            "degradation": self.degradation,
            "flags": list(self.flags),
        }
        for key in sorted(self.extras):
            obj[key] = self.extras[key]
        return obj

    @classmethod
    def from_json_obj(cls, obj: dict) -> "PatchRecord":
        missing = [k for k in ("patch_id", "source_id", "x", "y", "size") if k not in obj]
        if missing:
            raise ValueError(f"record missing required key(s): {', '.join(missing)}")
        scores = obj.get("scores") or {}
        unknown = set(scores) - set(METRIC_KINDS)
        if unknown:
            raise ValueError(f"unknown metric(s) in scores: {sorted(unknown)}")
        return cls(
            patch_id=str(obj["patch_id"]),
            source_id=str(obj["source_id"]),
            x=int(obj["x"]),
            y=int(obj["y"]),
            size=int(obj["size"]),
            scores={k: float(v) for k, v in scores.items()},
            selected=bool(obj.get("selected", True)),
            transform=int(obj.get("transform", 0)),
            degradation=obj.get("degradation"),
            flags=list(obj.get("flags") or []),
            extras={k: v for k, v in obj.items() if k not in RECORD_KEYS},
        )


def new_provenance() -> dict:
    return {
        "tool": f"patchforge {__version__}",
        "schema": SCHEMA_VERSION,
        "warnings": [],
        "stages": [],
    }


@dataclass
class Manifest:
    records: list[PatchRecord] = field(default_factory=list)
    provenance: dict = field(default_factory=new_provenance)

    def __len__(self):
        return len(self.records)

    def copy(self) -> "Manifest":
        return Manifest([r.copy() for r in self.records], copy.deepcopy(self.provenance))

    def selected_records(self) -> list[PatchRecord]:
        return [r for r in self.records if r.selected]

    def add_warning(self, message: str) -> None:
        self.provenance.setdefault("warnings", []).append(message)

    def add_stage(self, entry: dict) -> None:
        self.provenance.setdefault("stages", []).append(entry)

    def last_stage(self, name: str) -> dict | None:
        for entry in reversed(self.provenance.get("stages", [])):
            if entry.get("stage") == name:
                return entry
        return None


def _dumps(obj, sort_keys=False) -> str:
    return json.dumps(obj, ensure_ascii=False, allow_nan=False, sort_keys=sort_keys, separators=(",", ":"))


def manifest_lines(manifest: Manifest) -> Iterable[str]:
    yield _dumps({"schema": SCHEMA_VERSION, "provenance": manifest.provenance}, sort_keys=True)
    for rec in manifest.records:
        yield _dumps(rec.to_json_obj())


def write_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    try:
        if path.parent != Path(""):
            path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for line in manifest_lines(manifest):
                fh.write(line)
                fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write manifest {path}: {exc}") from exc


def read_manifest(path) -> Manifest:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line.strip():
            raise ManifestParseError(path, 1, "missing header line")
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise ManifestParseError(path, 1, f"invalid JSON ({exc.msg})") from exc
        if not isinstance(header, dict) or "schema" not in header:
            raise ManifestParseError(path, 1, "header object lacks 'schema'")
        if header["schema"] != SCHEMA_VERSION:
            raise SchemaVersionError(
                f"{path}: schema {header['schema']!r} is not supported (expected {SCHEMA_VERSION!r})"
            )
        provenance = header.get("provenance") or new_provenance()
        records = []
        for line_no, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(path, line_no, f"invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise ManifestParseError(path, line_no, "record is not a JSON object")
            try:
                records.append(PatchRecord.from_json_obj(obj))
            except (ValueError, TypeError) as exc:
                raise ManifestParseError(path, line_no, str(exc)) from exc
    return Manifest(records=records, provenance=provenance)


CSV_COLUMNS = ("patch_id", "base_id", "source_id", "x", "y", "size", "selected", "transform") + METRIC_KINDS


def _csv_value(rec: PatchRecord, column: str) -> str:
    if column in METRIC_KINDS:
        v = rec.scores.get(column)
        return "" if v is None else repr(float(v))
    if column == "base_id":
        return rec.base_id
    v = getattr(rec, column)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def export_csv(manifest: Manifest, columns, path) -> None:
    columns = list(columns)
    unknown = [c for c in columns if c not in CSV_COLUMNS]
    if unknown:
        raise ConfigError(f"unknown CSV column(s): {', '.join(unknown)}; choose from {', '.join(CSV_COLUMNS)}")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(columns)
        for rec in manifest.records:
            writer.writerow([_csv_value(rec, c) for c in columns])


def metric_column(manifest: Manifest, metric: str, selected_only: bool = False) -> list[float]:
    """Collect one metric across records; raises ScoringGapError if any record lacks it."""
    records = manifest.selected_records() if selected_only else manifest.records
    missing = [r.patch_id for r in records if metric not in r.scores]
    if missing:
        raise ScoringGapError(metric, missing)
    values = [r.scores[metric] for r in records]
    if not all(math.isfinite(v) for v in values):
        raise ValueError(f"non-finite values in metric '{metric}'")
    return values
