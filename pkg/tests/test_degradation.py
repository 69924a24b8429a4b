import numpy as np
import pytest
from PIL import Image as PILImage

from oracles import bicubic_direct
from patchforge.degradation import (
    AWGN,
    BicubicDown,
    Compose,
    awgn,
    bicubic_downsample,
    degrade,
    degrade_manifest,
    patch_seed,
    read_pft,
    resize_matrix,
    spec_from_dict,
    spec_to_dict,
    total_scale,
    write_pft,
)
from patchforge.errors import ConfigError, DimensionError, FormatError, InputError
from patchforge.ingest import GridSpec, Image, Patch, extract_all, load_image


@pytest.mark.parametrize("s", [2, 3, 4])
@pytest.mark.parametrize("value", [0.0, 37.0, 255.0])
def test_constant_preserved_exactly(s, value):
    out = bicubic_downsample(np.full((12, 12, 3), value), s)
    assert out.shape == (12 // s, 12 // s, 3)
    assert np.all(out == value)


def test_weights_rows_sum_to_one():
    for n, s in [(8, 2), (12, 3), (96, 4), (5 * 3, 3)]:
        assert np.allclose(resize_matrix(n, s).sum(axis=1), 1.0, atol=1e-15)


@pytest.mark.parametrize("size,s", [(8, 2), (12, 3), (12, 4), (16, 4), (9, 3)])
def test_matches_direct_oracle(size, s):
    rng = np.random.default_rng(size * 10 + s)
    for c in (1, 3):
        x = rng.integers(0, 256, (size, size, c)).astype(float)
        assert np.max(np.abs(bicubic_downsample(x, s) - bicubic_direct(x, s))) <= 1e-6


def test_non_square_matches_oracle():
    x = np.random.default_rng(2).random((12, 18, 3)) * 255
    assert np.max(np.abs(bicubic_downsample(x, 3) - bicubic_direct(x, 3))) <= 1e-6


@pytest.mark.parametrize("s", [2, 3, 4])
def test_interior_agrees_with_pillow(s):
    # Pillow treats borders differently, so only compare away from the edges
    x = np.random.default_rng(s).random((48, 48)) * 200 + 20
    ours = bicubic_downsample(x, s)
    theirs = np.asarray(
        PILImage.fromarray(x.astype(np.float32), "F").resize((48 // s, 48 // s), PILImage.BICUBIC), dtype=float
    )
    assert np.max(np.abs(ours - theirs)[3:-3, 3:-3]) < 1e-4


def test_output_clamped():
    x = np.zeros((8, 8, 1))
    x[::2, ::2] = 255
    x[3:5, 3:5] = 255
    out = bicubic_downsample(x, 2)
    assert out.min() >= 0 and out.max() <= 255


def test_patch_coordinates_follow_scale():
    p = Patch(pixels=np.zeros((96, 96, 3)), source_id="img", x=120, y=240)
    lr = bicubic_downsample(p, 2)
    assert isinstance(lr, Patch)
    assert lr.size == 48 and (lr.x, lr.y, lr.source_id) == (60, 120, "img")


def test_image_and_2d_wrapping():
    img = bicubic_downsample(Image("a", np.zeros((8, 6, 1))), 2)
    assert img.id == "a" and img.pixels.shape == (4, 3, 1)
    assert bicubic_downsample(np.zeros((6, 6)), 3).shape == (2, 2)


def test_non_divisible_rejected():
    with pytest.raises(DimensionError):
        bicubic_downsample(np.zeros((10, 10, 1)), 3)
    with pytest.raises(ConfigError):
        bicubic_downsample(np.zeros((10, 10, 1)), 5)


def test_awgn_sigma_zero_is_identity():
    x = np.random.default_rng(0).random((5, 5, 3))
    assert np.array_equal(awgn(x, 0.0, seed=9), x)


def test_awgn_statistics():
    out = awgn(np.zeros((1000, 1000, 1)), 25.0, seed=2024)
    assert abs(out.mean()) <= 0.1
    assert abs(out.std() - 25.0) <= 0.25


def test_awgn_seeded_bit_identical():
    x = np.full((16, 16, 3), 128.0)
    a, b = awgn(x, 10, seed=5), awgn(x, 10, seed=5)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, awgn(x, 10, seed=6))


def test_awgn_unclamped_unless_asked():
    x = np.zeros((32, 32, 1))
    assert awgn(x, 50, seed=1).min() < 0
    assert awgn(x, 50, seed=1, clip=True).min() == 0


def test_awgn_negative_sigma():
    with pytest.raises(ConfigError):
        awgn(np.zeros((2, 2)), -1, seed=0)
    with pytest.raises(ConfigError):
        AWGN(-0.5)


def test_compose_applies_in_order():
    x = np.random.default_rng(3).random((12, 12, 3)) * 255
    spec = Compose((BicubicDown(2), AWGN(5.0)))
    rng = np.random.default_rng(77)
    manual = bicubic_downsample(x, 2) + np.random.default_rng(77).standard_normal((6, 6, 3)) * 5.0
    assert np.array_equal(degrade(x, spec, rng), manual)
    assert total_scale(Compose((BicubicDown(2), Compose((BicubicDown(2),))))) == 4


def test_spec_dict_round_trip():
    spec = Compose((BicubicDown(3), AWGN(15.0, 4)))
    assert spec_from_dict(spec_to_dict(spec)) == spec
    with pytest.raises(ConfigError):
        spec_from_dict({"model": "jpeg"})


def test_patch_seed_depends_on_id_and_seed():
    assert patch_seed(0, "a_x0_y0") == patch_seed(0, "a_x0_y0")
    assert patch_seed(0, "a_x0_y0") != patch_seed(0, "a_x120_y0")
    assert patch_seed(1, "a_x0_y0") != patch_seed(0, "a_x0_y0")
    assert 0 <= patch_seed(-1, "x") < 2**64


def test_pft_round_trip(tmp_path):
    x = np.random.default_rng(1).normal(100, 50, (7, 5, 3)).astype(np.float32).astype(float)
    write_pft(x, tmp_path / "t.pft")
    back = read_pft(tmp_path / "t.pft")
    assert back.shape == (7, 5, 3) and np.array_equal(back, x)
    raw = (tmp_path / "t.pft").read_bytes()
    assert raw[:4] == b"PFT1" and len(raw) == 16 + 7 * 5 * 3 * 4


def test_pft_corrupt(tmp_path):
    p = tmp_path / "bad.pft"
    p.write_bytes(b"PFT1" + b"\x00" * 5)
    with pytest.raises(FormatError):
        read_pft(p)
    p.write_bytes(b"XXXX" + b"\x01\x00\x00\x00" * 3 + b"\x00" * 4)
    with pytest.raises(FormatError):
        read_pft(p)


# manifest level --------------------------------------------------------------


def test_degrade_manifest_bicubic(toy_dir, tmp_path):
    m = extract_all(toy_dir, GridSpec(96, 120))
    out = degrade_manifest(m, BicubicDown(2), tmp_path / "lr")
    files = sorted((tmp_path / "lr").iterdir())
    assert len(files) == 8
    for rec in out.records:
        img = load_image(tmp_path / "lr" / rec.degradation["file"])
        assert img.pixels.shape == (48, 48, 3)
        assert rec.degradation["shape"] == [48, 48, 3]
    assert out.last_stage("degrade")["spec"] == {"model": "bicubic_down", "scale": 2}
    assert m.records[0].degradation is None


def test_degrade_manifest_noise_zero_matches_hr(toy_dir, tmp_path):
    m = extract_all(toy_dir, GridSpec(96, 120), save_patches=tmp_path / "hr")
    degrade_manifest(m, AWGN(0.0), tmp_path / "lr", raw=True)
    for rec in m.records:
        hr = load_image(tmp_path / "hr" / f"{rec.patch_id}.png").pixels
        assert np.array_equal(read_pft(tmp_path / "lr" / f"{rec.patch_id}.pft"), hr)


def test_degrade_manifest_deterministic(toy_dir, tmp_path):
    m = extract_all(toy_dir, GridSpec(96, 120))
    spec = Compose((BicubicDown(2), AWGN(10.0)))
    a = degrade_manifest(m, spec, tmp_path / "a", seed=3, raw=True, workers=1)
    b = degrade_manifest(m, spec, tmp_path / "b", seed=3, raw=True, workers=8)
    assert a == b
    for rec in a.records:
        name = rec.degradation["file"]
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_degrade_noise_independent_of_other_records(toy_dir, tmp_path):
    m = extract_all(toy_dir, GridSpec(96, 120))
    full = degrade_manifest(m, AWGN(20.0), tmp_path / "full", seed=1, raw=True)
    part = m.copy()
    part.records = [m.records[5]]
    degrade_manifest(part, AWGN(20.0), tmp_path / "part", seed=1, raw=True)
    name = full.records[5].degradation["file"]
    assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes()


def test_degrade_missing_source(toy_dir, tmp_path):
    m = extract_all(toy_dir, GridSpec(96, 120))
    (toy_dir / "beta.png").unlink()
    with pytest.raises(InputError, match="beta_x0_y0"):
        degrade_manifest(m, BicubicDown(2), tmp_path / "lr")


def test_degrade_indivisible_patch(toy_dir, tmp_path):
    m = extract_all(toy_dir, GridSpec(95, 120))
    with pytest.raises(DimensionError):
        degrade_manifest(m, BicubicDown(2), tmp_path / "lr")
