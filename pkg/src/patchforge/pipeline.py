"""Declarative multi-stage runner.

A pipeline config is a TOML file::

    input_dir = "DIV2K_train_HR"     # relative paths resolve against the config file
    output_root = "runs/grad_half"
    seed = 0
    workers = 8                      # optional, default: logical CPUs
    strict = false                   # exit 2 when the guideline check is not clean

    [[stages]]
    name = "extract"                 # patch_size, stride, scale_align, cover_edges, save_patches
    [[stages]]
    name = "degrade"                 # model = "bicubic" | "awgn" | "bicubic+awgn", scale, sigma, clip, raw
    [[stages]]
    name = "score"                   # metrics = [...], loss_csv | restored_dir
    [[stages]]
    name = "select"                  # metric, keep_fraction | top_k | threshold | random, seed, prune
    [[stages]]
    name = "augment"                 # transforms = [0, ..., 7], assert_invariant, materialize
    [[stages]]
    name = "report"                  # histogram, bins, log, transform, correlate, summary, selected_only

Stages run in the order listed, which must follow
extract -> degrade -> score -> select -> augment -> report (degrade, augment and
report are optional). Stage ``n`` writes ``stage_<n>.jsonl`` into
``output_root``; the run ends with ``guideline.json`` / ``guideline.txt``.
"""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from patchforge import curation, degradation, metrics, report
from patchforge.errors import ConfigError, PatchforgeError
from patchforge.ingest import GridSpec, extract_all
from patchforge.manifest import Manifest, metric_column, write_manifest
from patchforge.parallel import default_workers

log = logging.getLogger(__name__)

STAGE_ORDER = ("extract", "degrade", "score", "select", "augment", "report")
STAGE_PARAMS = {
    "extract": {"patch_size", "stride", "scale_align", "cover_edges", "save_patches"},
    "degrade": {"model", "scale", "sigma", "clip", "raw"},
    "score": {"metrics", "loss_csv", "restored_dir"},
    "select": {"metric", "keep_fraction", "top_k", "threshold", "random", "seed", "prune"},
    "augment": {"transforms", "assert_invariant", "materialize"},
    "report": {"histogram", "bins", "log", "transform", "correlate", "summary", "selected_only"},
}
TOP_LEVEL = {"input_dir", "output_root", "seed", "workers", "strict", "stages"}

EXIT_OK, EXIT_ERROR, EXIT_GUIDELINE = 0, 1, 2


class StageError(PatchforgeError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")


@dataclass
class StageConfig:
    name: str
    params: dict = field(default_factory=dict)


@dataclass
class PipelineConfig:
    input_dir: Path
    output_root: Path
    stages: list[StageConfig]
    seed: int = 0
    workers: int | None = None
    strict: bool = False

    def validate(self) -> None:
        names = [s.name for s in self.stages]
        unknown = [n for n in names if n not in STAGE_ORDER]
        if unknown:
            raise ConfigError(f"unknown stage(s): {', '.join(unknown)}")
        for st in self.stages:
            bad = set(st.params) - STAGE_PARAMS[st.name]
            if bad:
                raise ConfigError(f"stage '{st.name}': unknown parameter(s) {', '.join(sorted(bad))}")
        if not names or names[0] != "extract":
            raise ConfigError("the first stage must be 'extract'")
        if len(set(names)) != len(names):
            raise ConfigError(f"each stage may appear at most once: {names}")
        positions = [STAGE_ORDER.index(n) for n in names]
        if positions != sorted(positions):
            raise ConfigError(f"stage order {' -> '.join(names)} violates {' -> '.join(STAGE_ORDER)}")
        sel = self.stage("select")
        if sel is not None and "random" not in sel.params and "score" not in names:
            raise ConfigError("'select' needs a preceding 'score' stage")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def stage(self, name: str) -> StageConfig | None:
        for s in self.stages:
            if s.name == name:
                return s
        return None


def default_config(input_dir, output_root, seed: int = 0, workers: int | None = None) -> PipelineConfig:
    """Patch 96 / stride 120, grad scoring, keep half by grad, all 8 flips/rotations."""
    return PipelineConfig(
        input_dir=Path(input_dir),
        output_root=Path(output_root),
        seed=seed,
        workers=workers,
        stages=[
            StageConfig("extract", {"patch_size": 96, "stride": 120}),
            StageConfig("score", {"metrics": ["grad"]}),
            StageConfig("select", {"metric": "grad", "keep_fraction": 0.5}),
            StageConfig("augment", {"transforms": list(range(8)), "assert_invariant": True}),
            StageConfig("report", {"histogram": "grad", "bins": 100, "log": True, "summary": "grad"}),
        ],
    )


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    bad = set(data) - TOP_LEVEL
    if bad:
        raise ConfigError(f"{path}: unknown key(s) {', '.join(sorted(bad))}")
    for key in ("input_dir", "output_root"):
        if key not in data:
            raise ConfigError(f"{path}: missing '{key}'")
    base = path.parent

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    stages = []
    for raw in data.get("stages", []):
        raw = dict(raw)
        name = raw.pop("name", None)
        if name is None:
            raise ConfigError(f"{path}: every [[stages]] entry needs a 'name'")
        for key in ("loss_csv", "restored_dir"):
            if key in raw:
                raw[key] = str(resolve(raw[key]))
        stages.append(StageConfig(name, raw))
    cfg = PipelineConfig(
        input_dir=resolve(data["input_dir"]),
        output_root=resolve(data["output_root"]),
        stages=stages,
        seed=int(data.get("seed", 0)),
        workers=data.get("workers"),
        strict=bool(data.get("strict", False)),
    )
    cfg.validate()
    return cfg


def _degradation_spec(p: dict) -> degradation.DegradationSpec:
    model = p.get("model", "bicubic")
    scale = int(p.get("scale", 2))
    sigma = float(p.get("sigma", 25.0))
    if model == "bicubic":
        return degradation.BicubicDown(scale)
    if model == "awgn":
        return degradation.AWGN(sigma)
    if model == "bicubic+awgn":
        return degradation.Compose((degradation.BicubicDown(scale), degradation.AWGN(sigma)))
    raise ConfigError(f"unknown degradation model {model!r} (bicubic, awgn, bicubic+awgn)")


def _selection_policy(p: dict, seed: int) -> curation.SelectionPolicy:
    modes = [k for k in ("keep_fraction", "top_k", "threshold", "random") if k in p]
    if len(modes) > 1:
        raise ConfigError(f"select: give exactly one of keep_fraction/top_k/threshold/random, got {modes}")
    metric = p.get("metric", "grad")
    if not modes or modes[0] == "keep_fraction":
        return curation.SelectionPolicy.keep_fraction(metric, p.get("keep_fraction", 0.5))
    if modes[0] == "top_k":
        return curation.SelectionPolicy.top_k(metric, p["top_k"])
    if modes[0] == "threshold":
        return curation.SelectionPolicy.threshold(metric, p["threshold"])
    return curation.SelectionPolicy.random(p["random"], p.get("seed", seed))


def run_report_stage(manifest: Manifest, p: dict, out_dir: Path, prefix: str = "report") -> list[Path]:
    view = report.base_view(manifest, bool(p.get("selected_only", False)))
    written = []
    hist_metric = p.get("histogram")
    if hist_metric:
        values = metric_column(view, hist_metric)
        hist = report.histogram(
            values,
            bins=int(p.get("bins", 100)),
            scale="log10" if p.get("log") else "linear",
            transform=p.get("transform"),
        )
        path = out_dir / f"{prefix}_hist_{hist_metric}.csv"
        report.write_histogram_csv(hist, path)
        svg = out_dir / f"{prefix}_hist_{hist_metric}.svg"
        svg.write_text(report.histogram_svg(hist, title=hist_metric), encoding="utf-8")
        written += [path, svg]
    corr = p.get("correlate")
    if corr:
        names = metrics.parse_metric_list(corr)
        mat = report.metric_correlation_matrix(view, names)
        path = out_dir / f"{prefix}_corr.csv"
        report.write_matrix_csv(names, mat, path)
        written.append(path)
    summ = p.get("summary")
    if summ:
        path = out_dir / f"{prefix}_summary_{summ}.csv"
        report.write_summary_csv(report.metric_summary(view, summ), path)
        written.append(path)
    return written


def run_pipeline(config: PipelineConfig, force: bool = False) -> tuple[int, Manifest | None]:
    """Run every stage, then the guideline check. Returns ``(exit_code, final_manifest)``."""
    config.validate()
    if not Path(config.input_dir).is_dir():
        raise ConfigError(f"input directory {config.input_dir} does not exist")
    root = Path(config.output_root)
    existing = sorted(root.glob("stage_*.jsonl")) if root.is_dir() else []
    if existing and not force:
        raise ConfigError(f"{root} already holds pipeline outputs; pass --force to overwrite")
    root.mkdir(parents=True, exist_ok=True)
    for old in existing:
        old.unlink()
    workers = config.workers or default_workers()

    manifest = None
    for n, st in enumerate(config.stages, start=1):
        p = st.params
        log.info("stage %d/%d: %s", n, len(config.stages), st.name)
        try:
            if st.name == "extract":
                grid = GridSpec(
                    patch_size=int(p.get("patch_size", 96)),
                    stride=int(p.get("stride", 120)),
                    scale_align=int(p.get("scale_align", 1)),
                    cover_edges=bool(p.get("cover_edges", False)),
                )
                save = root / "hr" if p.get("save_patches") else None
                manifest = extract_all(config.input_dir, grid, workers=workers, save_patches=save)
            elif st.name == "degrade":
                manifest = degradation.degrade_manifest(
                    manifest,
                    _degradation_spec(p),
                    root / "degraded",
                    seed=config.seed,
                    clip=bool(p.get("clip", False)),
                    raw=bool(p.get("raw", False)),
                    workers=workers,
                )
            elif st.name == "score":
                manifest = metrics.score_manifest(
                    manifest,
                    p.get("metrics", ["grad"]),
                    loss_csv=p.get("loss_csv"),
                    restored_dir=p.get("restored_dir"),
                    workers=workers,
                )
            elif st.name == "select":
                manifest = curation.select(manifest, _selection_policy(p, config.seed), prune=bool(p.get("prune", False)))
            elif st.name == "augment":
                manifest = curation.augment_manifest(
                    manifest,
                    p.get("transforms", list(range(8))),
                    bool(p.get("assert_invariant", False)),
                    materialize_dir=root / "augmented" if p.get("materialize") else None,
                    workers=workers,
                )
            elif st.name == "report":
                run_report_stage(manifest, p, root)
                continue
        except (PatchforgeError, OSError, ValueError) as exc:
            raise StageError(st.name, exc) from exc
        write_manifest(manifest, root / f"stage_{n}.jsonl")

    check = curation.guideline_check(manifest)
    (root / "guideline.json").write_text(json.dumps(check.to_dict(), indent=2) + "\n", encoding="utf-8")
    (root / "guideline.txt").write_text(check.render() + "\n", encoding="utf-8")
    for line in check.render().splitlines():
        log.info(line)
    if config.strict and not check.ok:
        return EXIT_GUIDELINE, manifest
    return EXIT_OK, manifest
