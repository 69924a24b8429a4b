"""Command-line entry point: ``patchforge <subcommand> ...``.

Exit codes: 0 success, 1 error, 2 guideline check failed under ``--strict``.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import PIL

from patchforge import SCHEMA_VERSION, __version__, curation, degradation, metrics, pipeline, report
from patchforge.errors import ConfigError, PatchforgeError
from patchforge.ingest import GridSpec, extract_all
from patchforge.manifest import CSV_COLUMNS, export_csv, metric_column, read_manifest, write_manifest
from patchforge.parallel import default_workers

log = logging.getLogger("patchforge")

EXIT_OK, EXIT_ERROR, EXIT_GUIDELINE = 0, 1, 2


def version_info() -> dict:
    return {
        "tool": "patchforge",
        "version": __version__,
        "schema": SCHEMA_VERSION,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "pillow": PIL.__version__,
    }


def version_and_provenance(as_json: bool = False) -> str:
    info = version_info()
    if as_json:
        return json.dumps(info, sort_keys=True)
    return (
        f"patchforge {info['version']} (manifest schema {info['schema']}; "
        f"python {info['python']}, numpy {info['numpy']}, pillow {info['pillow']})"
    )


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname, "logger": record.name, "message": record.getMessage()})


def _setup_logging(quiet: bool, json_logs: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter() if json_logs else logging.Formatter("%(levelname)s: %(message)s"))
    root = logging.getLogger("patchforge")
    root.handlers[:] = [handler]
    root.setLevel(logging.ERROR if quiet else logging.INFO)
    root.propagate = False


def _global_flags() -> argparse.ArgumentParser:
    # SUPPRESS lets these flags appear before or after the subcommand
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--workers", type=int, default=argparse.SUPPRESS, help="worker threads (default: logical CPUs)")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global seed (default 0)")
    g.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)
    g.add_argument("--json-logs", action="store_true", default=argparse.SUPPRESS)
    return g


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="patchforge", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        return sub.add_parser(name, help=help_, parents=[common])

    p = add("extract", "grid-crop patches from a directory of images")
    p.add_argument("--input-dir", required=True)
    p.add_argument("--patch-size", type=int, default=96)
    p.add_argument("--stride", type=int, default=120)
    p.add_argument("--scale-align", type=int, default=1)
    p.add_argument("--cover-edges", action="store_true")
    p.add_argument("--out", required=True, help="output manifest (.jsonl)")
    p.add_argument("--save-patches", metavar="DIR", help="also write each HR patch as <patch_id>.png")

    p = add("degrade", "write degraded (LR / noisy) counterparts of every patch")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", choices=["bicubic", "awgn", "bicubic+awgn"], default="bicubic")
    p.add_argument("--scale", type=int, default=2)
    p.add_argument("--sigma", type=float, default=25.0)
    p.add_argument("--clip", action="store_true", help="clamp to 0..255 (raw output; PNGs are always clamped)")
    p.add_argument("--raw", action="store_true", help="write PFT1 float32 tensors instead of 8-bit PNGs")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--out", required=True)
    _add_source_flags(p)

    p = add("score", "compute representative values per patch")
    p.add_argument("--manifest", required=True)
    p.add_argument("--metrics", default="grad,std,freq")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--restored-dir", help="directory of <patch_id>.png network outputs for the loss metric")
    src.add_argument("--loss-csv", help="CSV with header patch_id,loss")
    p.add_argument("--out", required=True)
    _add_source_flags(p)

    p = add("select", "rank patches by a metric and keep a share of them")
    p.add_argument("--manifest", required=True)
    p.add_argument("--metric", choices=["loss", "grad", "std", "freq"], default="grad")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--keep-fraction", type=float)
    mode.add_argument("--top-k", type=int)
    mode.add_argument("--threshold", type=float)
    mode.add_argument("--random", type=int, metavar="N", help="seeded random choice of N patches")
    p.add_argument("--prune", action="store_true", help="drop unselected records instead of flagging them")
    p.add_argument("--out", required=True)

    p = add("augment", "expand selected patches with flip/rotation transforms")
    p.add_argument("--manifest", required=True)
    tr = p.add_mutually_exclusive_group(required=True)
    tr.add_argument("--dihedral8", action="store_true", help="all 8 transforms")
    tr.add_argument("--transforms", help="comma-separated ids 0..7")
    p.add_argument("--assert-invariant", action="store_true", help="confirm the task is flip/rotation invariant")
    p.add_argument("--materialize", metavar="DIR", help="write transformed patches as PNGs")
    p.add_argument("--out", required=True)
    _add_source_flags(p)

    p = add("check", "audit a manifest against the patch-mining guideline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--json", action="store_true")
    p.add_argument("--strict", action="store_true", help="exit 2 unless every check passes")

    p = add("report", "histograms, summaries and metric correlations")
    p.add_argument("--manifest", required=True)
    p.add_argument("--histogram", metavar="METRIC")
    p.add_argument("--bins", type=int, default=100)
    p.add_argument("--log", action="store_true", help="bin log10 of the values")
    p.add_argument("--transform", choices=["sqrt"])
    p.add_argument("--range", nargs=2, type=float, metavar=("LO", "HI"))
    p.add_argument("--correlate", metavar="METRICS", help="e.g. grad,std,freq")
    p.add_argument("--summary", metavar="METRIC")
    p.add_argument("--selected-only", action="store_true")
    p.add_argument("--out", help="CSV output (suffixed per analysis when several are requested)")
    p.add_argument("--svg", help="SVG bar chart of the histogram")

    p = add("export", "write manifest columns as CSV")
    p.add_argument("--manifest", required=True)
    p.add_argument("--columns", default="patch_id,source_id,x,y,selected,transform,grad,std,freq,loss",
                   help=f"any of: {','.join(CSV_COLUMNS)}")
    p.add_argument("--out", required=True)

    p = add("run", "run a whole pipeline from a TOML config (or the default config)")
    p.add_argument("--config")
    p.add_argument("--input-dir")
    p.add_argument("--out-dir")
    p.add_argument("--strict", action="store_true")
    p.add_argument("--force", action="store_true", help="overwrite an existing output root")

    p = add("version", "print version and schema information")
    p.add_argument("--json", action="store_true")
    return parser


def _add_source_flags(p):
    p.add_argument("--hr-dir", help="read HR patches from <dir>/<patch_id>.png instead of re-cropping sources")
    p.add_argument("--image-dir", help="override the source image directory recorded in the manifest")


def _cmd_extract(args, workers, seed):
    grid = GridSpec(args.patch_size, args.stride, args.scale_align, args.cover_edges)
    m = extract_all(args.input_dir, grid, workers=workers, save_patches=args.save_patches)
    write_manifest(m, args.out)
    log.info("extracted %d patches from %d images -> %s", len(m), len(m.provenance["images"]), args.out)
    return EXIT_OK


def _cmd_degrade(args, workers, seed):
    if args.model == "bicubic":
        spec = degradation.BicubicDown(args.scale)
    elif args.model == "awgn":
        spec = degradation.AWGN(args.sigma)
    else:
        spec = degradation.Compose((degradation.BicubicDown(args.scale), degradation.AWGN(args.sigma)))
    m = degradation.degrade_manifest(
        read_manifest(args.manifest), spec, args.out_dir, seed=seed, clip=args.clip, raw=args.raw,
        hr_dir=args.hr_dir, image_dir=args.image_dir, workers=workers,
    )
    write_manifest(m, args.out)
    log.info("wrote %d degraded patches to %s", len(m), args.out_dir)
    return EXIT_OK


def _cmd_score(args, workers, seed):
    m = metrics.score_manifest(
        read_manifest(args.manifest), args.metrics, loss_csv=args.loss_csv, restored_dir=args.restored_dir,
        hr_dir=args.hr_dir, image_dir=args.image_dir, workers=workers,
    )
    write_manifest(m, args.out)
    log.info("scored %d records (%s)", len(m), args.metrics)
    return EXIT_OK


def _cmd_select(args, workers, seed):
    if args.keep_fraction is not None:
        policy = curation.SelectionPolicy.keep_fraction(args.metric, args.keep_fraction)
    elif args.top_k is not None:
        policy = curation.SelectionPolicy.top_k(args.metric, args.top_k)
    elif args.threshold is not None:
        policy = curation.SelectionPolicy.threshold(args.metric, args.threshold)
    else:
        policy = curation.SelectionPolicy.random(args.random, seed)
    m = curation.select(read_manifest(args.manifest), policy, prune=args.prune)
    write_manifest(m, args.out)
    stage = m.last_stage("select")
    log.info("selected %d of %d candidates", stage["kept"], stage["candidates"])
    return EXIT_OK


def _cmd_augment(args, workers, seed):
    transforms = list(range(8)) if args.dihedral8 else args.transforms
    m = curation.augment_manifest(
        read_manifest(args.manifest), transforms, args.assert_invariant, materialize_dir=args.materialize,
        hr_dir=args.hr_dir, image_dir=args.image_dir, workers=workers,
    )
    write_manifest(m, args.out)
    log.info("augmented manifest has %d records", len(m))
    return EXIT_OK


def _cmd_check(args, workers, seed):
    rep = curation.guideline_check(read_manifest(args.manifest))
    print(json.dumps(rep.to_dict(), indent=2) if args.json else rep.render())
    if args.strict and not rep.ok:
        return EXIT_GUIDELINE
    return EXIT_OK


def _out_path(base, suffix, several):
    if base is None:
        return None
    base = Path(base)
    return base.with_name(f"{base.stem}_{suffix}{base.suffix or '.csv'}") if several else base


def _cmd_report(args, workers, seed):
    view = report.base_view(read_manifest(args.manifest), args.selected_only)
    requested = [x for x in (args.histogram, args.correlate, args.summary) if x]
    if not requested:
        raise ConfigError("nothing to report: give --histogram, --correlate and/or --summary")
    several = len(requested) > 1
    if args.histogram:
        hist = report.histogram(
            metric_column(view, args.histogram), bins=args.bins, scale="log10" if args.log else "linear",
            range=args.range, transform=args.transform,
        )
        out = _out_path(args.out, "hist", several)
        if out:
            report.write_histogram_csv(hist, out)
        else:
            print(f"histogram of {args.histogram} ({hist.scale}{', ' + hist.transform if hist.transform else ''})")
            for i, c in enumerate(hist.counts):
                print(f"  ({hist.edges[i]:.6g}, {hist.edges[i + 1]:.6g}]  {c}")
            print(f"  underflow {hist.underflow} (zeros {hist.zeros}), overflow {hist.overflow}")
        if args.svg:
            Path(args.svg).write_text(report.histogram_svg(hist, title=args.histogram), encoding="utf-8")
    if args.correlate:
        names = metrics.parse_metric_list(args.correlate)
        mat = report.metric_correlation_matrix(view, names)
        out = _out_path(args.out, "corr", several)
        if out:
            report.write_matrix_csv(names, mat, out)
        else:
            print("pearson correlation")
            print("        " + "".join(f"{n:>10}" for n in names))
            for n, row in zip(names, mat):
                print(f"{n:>8}" + "".join(f"{v:10.4f}" for v in row))
    if args.summary:
        stats = report.metric_summary(view, args.summary)
        out = _out_path(args.out, "summary", several)
        if out:
            report.write_summary_csv(stats, out)
        else:
            print(f"summary of {args.summary}")
            for k, v in stats.items():
                print(f"  {k:>6}: {v:.6g}" if isinstance(v, float) else f"  {k:>6}: {v}")
    return EXIT_OK


def _cmd_export(args, workers, seed):
    export_csv(read_manifest(args.manifest), [c.strip() for c in args.columns.split(",") if c.strip()], args.out)
    return EXIT_OK


def _cmd_run(args, workers, seed):
    if args.config:
        cfg = pipeline.load_config(args.config)
        if args.workers_given:
            cfg.workers = workers
        if args.seed_given:
            cfg.seed = seed
    else:
        if not args.input_dir or not args.out_dir:
            raise ConfigError("run needs --config, or --input-dir and --out-dir for the default pipeline")
        cfg = pipeline.default_config(args.input_dir, args.out_dir, seed=seed, workers=workers)
    cfg.strict = cfg.strict or args.strict
    code, _ = pipeline.run_pipeline(cfg, force=args.force)
    return code


def _cmd_version(args, workers, seed):
    print(version_and_provenance(args.json))
    return EXIT_OK


COMMANDS = {
    "extract": _cmd_extract,
    "degrade": _cmd_degrade,
    "score": _cmd_score,
    "select": _cmd_select,
    "augment": _cmd_augment,
    "check": _cmd_check,
    "report": _cmd_report,
    "export": _cmd_export,
    "run": _cmd_run,
    "version": _cmd_version,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(getattr(args, "quiet", False), getattr(args, "json_logs", False))
    args.workers_given = hasattr(args, "workers")
    args.seed_given = hasattr(args, "seed")
    workers = getattr(args, "workers", None) or default_workers()
    seed = getattr(args, "seed", 0)
    try:
        return COMMANDS[args.command](args, workers, seed)
    except (PatchforgeError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
