import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from p2s.imagecore import (
    CorruptImageHeader,
    DegenerateImage,
    ImageDimensionMismatch,
    ImageGrid,
    UnsupportedImageFormat,
    concentric_phantom,
    crop_even,
    load_image,
    normalize,
    save_image,
)


def test_p2_ascii_parsing(tmp_path):
    path = tmp_path / "tiny.pgm"
    path.write_bytes(b"P2\n2 2\n255\n0 255 128 64\n")
    img = load_image(path)
    assert img.shape == (2, 2)
    expected = np.array([[0.0, 1.0], [128 / 255, 64 / 255]])
    np.testing.assert_array_equal(img.data, expected)


def test_p2_comments_and_whitespace(tmp_path):
    path = tmp_path / "tiny.pgm"
    path.write_bytes(b"P2 # comment\n# another\n 2\t1\n255\n7\n9")
    img = load_image(path)
    np.testing.assert_array_equal(img.data, np.array([[7 / 255, 9 / 255]]))


def test_p5_16bit_saturation(tmp_path):
    path = tmp_path / "sat.pgm"
    path.write_bytes(b"P5\n3 2\n65535\n" + b"\xff" * 12)
    img = load_image(path)
    assert img.shape == (2, 3)
    assert (img.data == 1.0).all()


def test_p5_8bit_values(tmp_path):
    path = tmp_path / "p5.pgm"
    path.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
    img = load_image(path)
    np.testing.assert_array_equal(img.data, np.array([[0, 255], [128, 64]]) / 255.0)


def test_pixel_order_preserved(tmp_path):
    # pixel (r, c) must round-trip to (r, c), no transposition
    arr = np.arange(6, dtype=np.float64).reshape(2, 3) / 10.0
    path = tmp_path / "order.pgm"
    save_image(ImageGrid(arr), path, depth=16)
    back = load_image(path)
    assert back.shape == (2, 3)
    assert back.data[1, 2] == pytest.approx(0.5, abs=1e-4)
    assert back.data[0, 1] == pytest.approx(0.1, abs=1e-4)


@pytest.mark.parametrize("suffix", [".pgm", ".png"])
def test_roundtrip_8bit_exact(tmp_path, suffix, rng):
    # 8-bit quantization levels survive save/load exactly
    levels = rng.integers(0, 256, size=(9, 7))
    img = ImageGrid(levels / 255.0)
    path = tmp_path / f"rt{suffix}"
    save_image(img, path, depth=8)
    back = load_image(path)
    np.testing.assert_array_equal(back.data, img.data)


@pytest.mark.parametrize("suffix", [".pgm", ".png"])
def test_roundtrip_16bit_exact(tmp_path, suffix, rng):
    levels = rng.integers(0, 65536, size=(5, 8))
    img = ImageGrid(levels / 65535.0)
    path = tmp_path / f"rt{suffix}"
    save_image(img, path, depth=16)
    back = load_image(path)
    np.testing.assert_array_equal(back.data, img.data)


@given(st.integers(min_value=0, max_value=2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_roundtrip_random_8bit_grids(seed):
    import tempfile
    from pathlib import Path

    levels = np.random.default_rng(seed).integers(0, 256, size=(6, 6))
    img = ImageGrid(levels / 255.0)
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "x.pgm"
        save_image(img, path, depth=8)
        np.testing.assert_array_equal(load_image(path).data, img.data)


def test_save_quantization_rule(tmp_path):
    # round half away from zero: 0.5*255 = 127.5 -> 128
    img = ImageGrid(np.array([[0.5, 1.0], [-0.1, 0.2]]))
    path = tmp_path / "q.pgm"
    save_image(img, path, depth=8)
    payload = path.read_bytes().split(b"\n", 3)[3]
    assert list(payload) == [128, 255, 0, 51]


def test_save_16bit_extremes(tmp_path):
    img = ImageGrid(np.array([[1.0, 0.0]]))
    path = tmp_path / "x.pgm"
    save_image(img, path, depth=16)
    payload = path.read_bytes().split(b"\n", 3)[3]
    assert payload == b"\xff\xff\x00\x00"


def test_writer_is_deterministic(tmp_path, rng):
    img = ImageGrid(rng.uniform(size=(16, 16)))
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    save_image(img, a, depth=16)
    save_image(img, b, depth=16)
    assert a.read_bytes() == b.read_bytes()
    a2, b2 = tmp_path / "a.pgm", tmp_path / "b.pgm"
    save_image(img, a2, depth=8)
    save_image(img, b2, depth=8)
    assert a2.read_bytes() == b2.read_bytes()


def test_unsupported_magic(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(UnsupportedImageFormat):
        load_image(path)


def test_corrupt_header(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P2\n2 two\n255\n0 0 0 0")
    with pytest.raises(CorruptImageHeader):
        load_image(path)


def test_bad_maxval(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P2\n1 1\n100\n5")
    with pytest.raises(CorruptImageHeader):
        load_image(path)


def test_dimension_mismatch(tmp_path):
    path = tmp_path / "short.pgm"
    path.write_bytes(b"P5\n4 4\n255\n" + b"\x00" * 7)
    with pytest.raises(ImageDimensionMismatch):
        load_image(path)

    path2 = tmp_path / "short2.pgm"
    path2.write_bytes(b"P2\n2 2\n255\n1 2 3")
    with pytest.raises(ImageDimensionMismatch):
        load_image(path2)


def test_rgb_png_rejected(tmp_path):
    from PIL import Image

    path = tmp_path / "rgb.png"
    Image.new("RGB", (4, 4), (10, 20, 30)).save(path)
    with pytest.raises(UnsupportedImageFormat):
        load_image(path)


def test_normalize_basic():
    img = ImageGrid(np.array([[0.0, 2.0, 4.0]]))
    out = normalize(img)
    np.testing.assert_array_equal(out.data, [[0.0, 0.5, 1.0]])


def test_normalize_constant():
    out = normalize(ImageGrid(np.full((3, 3), 0.7)))
    assert (out.data == 1.0).all()


def test_normalize_all_zero_rejected():
    with pytest.raises(DegenerateImage):
        normalize(ImageGrid(np.zeros((2, 2))))


@given(st.integers(min_value=0, max_value=2**31))
@settings(max_examples=20, deadline=None)
def test_normalize_idempotent(seed):
    arr = np.random.default_rng(seed).uniform(0.01, 5.0, size=(4, 4))
    once = normalize(ImageGrid(arr))
    twice = normalize(once)
    np.testing.assert_array_equal(once.data, twice.data)
    assert once.data.max() == 1.0


def test_imagegrid_immutable():
    img = ImageGrid(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        img.data[0, 0] = 1.0


def test_imagegrid_rejects_nonfinite():
    with pytest.raises(ValueError):
        ImageGrid(np.array([[np.nan, 0.0]]))


def test_crop_even():
    img = ImageGrid(np.arange(15, dtype=np.float64).reshape(3, 5))
    out = crop_even(img)
    assert out.shape == (2, 4)
    np.testing.assert_array_equal(out.data, img.data[:2, :4])
    same = crop_even(out)
    np.testing.assert_array_equal(same.data, out.data)


def test_phantom_levels_and_shape():
    ph = concentric_phantom(128, 128)
    assert ph.shape == (128, 128)
    levels = np.unique(ph.data)
    np.testing.assert_array_equal(levels, [0.25, 0.5, 0.75, 1.0])
    # concentric: center is the brightest region, corners the background
    assert ph.data[64, 64] == 1.0
    assert ph.data[0, 0] == 0.25
