import json
import subprocess
import sys

import numpy as np
import pytest

from patchforge.cli import main
from patchforge.degradation import read_pft
from patchforge.ingest import load_image
from patchforge.manifest import read_manifest


def run(*argv):
    return main(["--quiet", *[str(a) for a in argv]])


@pytest.fixture
def scored(toy_dir, tmp_path):
    m0 = tmp_path / "m0.jsonl"
    assert run("extract", "--input-dir", toy_dir, "--out", m0) == 0
    m1 = tmp_path / "m1.jsonl"
    assert run("score", "--manifest", m0, "--metrics", "grad,std,freq", "--out", m1) == 0
    return m1


def test_extract_writes_manifest(toy_dir, tmp_path):
    out = tmp_path / "m.jsonl"
    assert run("extract", "--input-dir", toy_dir, "--patch-size", 96, "--stride", 120, "--out", out,
               "--save-patches", tmp_path / "hr") == 0
    m = read_manifest(out)
    assert len(m) == 8 and m.provenance["grid"]["stride"] == 120
    assert len(list((tmp_path / "hr").glob("*.png"))) == 8


def test_extract_bad_grid(toy_dir, tmp_path):
    assert run("extract", "--input-dir", toy_dir, "--patch-size", 1, "--out", tmp_path / "m.jsonl") == 1


def test_extract_missing_dir(tmp_path):
    assert run("extract", "--input-dir", tmp_path / "nope", "--out", tmp_path / "m.jsonl") == 1


def test_score_select_augment_check(scored, tmp_path):
    sel = tmp_path / "sel.jsonl"
    assert run("select", "--manifest", scored, "--metric", "grad", "--keep-fraction", 0.5, "--out", sel) == 0
    m = read_manifest(sel)
    assert sum(r.selected for r in m.records) == 4
    aug = tmp_path / "aug.jsonl"
    assert run("augment", "--manifest", sel, "--dihedral8", "--out", aug) == 1
    assert run("augment", "--manifest", sel, "--dihedral8", "--assert-invariant", "--out", aug) == 0
    assert sum(r.selected for r in read_manifest(aug).records) == 32
    assert run("check", "--manifest", aug) == 0
    assert run("check", "--manifest", aug, "--strict") == 2


def test_select_before_score_is_an_error(toy_dir, tmp_path):
    m0 = tmp_path / "m0.jsonl"
    run("extract", "--input-dir", toy_dir, "--out", m0)
    assert run("select", "--manifest", m0, "--top-k", 2, "--out", tmp_path / "s.jsonl") == 1
    assert not (tmp_path / "s.jsonl").exists()


def test_select_random_uses_global_seed(scored, tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert run("--seed", 3, "select", "--manifest", scored, "--random", 3, "--out", a) == 0
    assert run("select", "--manifest", scored, "--random", 3, "--seed", 3, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()


def test_degrade_png_and_raw(scored, tmp_path):
    out = tmp_path / "d.jsonl"
    assert run("degrade", "--manifest", scored, "--model", "bicubic", "--scale", 2, "--out-dir", tmp_path / "lr",
               "--out", out) == 0
    rec = read_manifest(out).records[0]
    assert load_image(tmp_path / "lr" / rec.degradation["file"]).pixels.shape == (48, 48, 3)
    assert run("degrade", "--manifest", scored, "--model", "bicubic+awgn", "--scale", 4, "--sigma", 10, "--raw",
               "--out-dir", tmp_path / "raw", "--out", out) == 0
    rec = read_manifest(out).records[0]
    assert read_pft(tmp_path / "raw" / rec.degradation["file"]).shape == (24, 24, 3)


def test_check_json(scored, tmp_path, capsys):
    capsys.readouterr()
    assert run("check", "--manifest", scored, "--json") == 0
    data = json.loads(capsys.readouterr().out)
    assert data["ok"] is False
    assert data["warnings"] == ["OVERFITTING_RISK", "NO_SELECTION", "NO_AUGMENTATION"]


def test_report_outputs(scored, tmp_path, capsys):
    out = tmp_path / "r.csv"
    assert run("report", "--manifest", scored, "--histogram", "grad", "--bins", 4, "--log", "--correlate",
               "grad,std,freq", "--summary", "std", "--out", out, "--svg", tmp_path / "h.svg") == 0
    assert (tmp_path / "r_hist.csv").read_text().startswith("bin,lo,hi,count")
    assert (tmp_path / "r_corr.csv").read_text().splitlines()[0] == "metric,grad,std,freq"
    assert "median" in (tmp_path / "r_summary.csv").read_text()
    assert (tmp_path / "h.svg").read_text().startswith("<svg")
    capsys.readouterr()
    assert run("report", "--manifest", scored, "--summary", "grad") == 0
    assert "count: 8" in capsys.readouterr().out
    assert run("report", "--manifest", scored) == 1
    assert run("report", "--manifest", scored, "--histogram", "loss") == 1


def test_export(scored, tmp_path):
    out = tmp_path / "e.csv"
    assert run("export", "--manifest", scored, "--columns", "patch_id,grad", "--out", out) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "patch_id,grad" and len(lines) == 9


def test_corrupt_manifest_exit_1(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"schema":"patchforge/1","provenance":{}}\n{"patch_id": \n')
    assert run("check", "--manifest", bad) == 1


def test_version(capsys):
    capsys.readouterr()
    assert run("version") == 0
    assert "patchforge/1" in capsys.readouterr().out
    assert run("version", "--json") == 0
    info = json.loads(capsys.readouterr().out)
    assert info["schema"] == "patchforge/1" and info["numpy"] == np.__version__


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "patchforge", "version"], capture_output=True, text=True, check=True)
    assert "patchforge" in res.stdout


def test_run_default_pipeline(toy_dir, tmp_path):
    out = tmp_path / "run"
    assert run("run", "--input-dir", toy_dir, "--out-dir", out, "--workers", 2) == 0
    assert sorted(p.name for p in out.glob("stage_*.jsonl")) == [f"stage_{i}.jsonl" for i in (1, 2, 3, 4)]
    final = read_manifest(out / "stage_4.jsonl")
    assert sum(r.selected for r in final.records) == 32
    assert json.loads((out / "guideline.json").read_text())["warnings"] == ["OVERFITTING_RISK"]
    assert (out / "report_hist_grad.svg").exists()
    # rerunning into the same root needs --force
    assert run("run", "--input-dir", toy_dir, "--out-dir", out) == 1
    assert run("run", "--input-dir", toy_dir, "--out-dir", out, "--force", "--strict") == 2


def test_run_from_toml(toy_dir, tmp_path):
    cfg = tmp_path / "pipe.toml"
    cfg.write_text(
        f"""
input_dir = "{toy_dir.name}"
output_root = "out"
seed = 5

[[stages]]
name = "extract"
patch_size = 96
stride = 120
save_patches = true

[[stages]]
name = "degrade"
model = "awgn"
sigma = 15.0

[[stages]]
name = "score"
metrics = ["grad", "freq"]

[[stages]]
name = "select"
metric = "freq"
top_k = 3

[[stages]]
name = "report"
correlate = "grad,freq"
"""
    )
    assert run("run", "--config", cfg) == 0
    root = tmp_path / "out"
    m = read_manifest(root / "stage_4.jsonl")
    assert sum(r.selected for r in m.records) == 3
    assert m.last_stage("degrade")["seed"] == 5
    assert len(list((root / "degraded").glob("*.png"))) == 8
    assert (root / "report_corr.csv").exists()


@pytest.mark.parametrize(
    "stages",
    [
        '[[stages]]\nname = "score"\n',
        '[[stages]]\nname = "extract"\n[[stages]]\nname = "select"\ntop_k = 2\n',
        '[[stages]]\nname = "extract"\n[[stages]]\nname = "score"\n[[stages]]\nname = "degrade"\n',
        '[[stages]]\nname = "extract"\nstrde = 3\n',
    ],
)
def test_run_bad_configs(toy_dir, tmp_path, stages):
    cfg = tmp_path / "bad.toml"
    cfg.write_text(f'input_dir = "{toy_dir}"\noutput_root = "{tmp_path / "o"}"\n' + stages)
    assert run("run", "--config", cfg) == 1
