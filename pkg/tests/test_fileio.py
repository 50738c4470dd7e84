import numpy as np
import pytest

from sparsect import fileio


def test_image_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.random((12, 17))
    p1 = tmp_path / "a.imgf"
    p2 = tmp_path / "b.imgf"
    fileio.write_image(p1, img)
    back = fileio.read_image(p1)
    assert back.shape == img.shape
    # storage is float32, so a second write reproduces the bytes exactly
    fileio.write_image(p2, back)
    assert p1.read_bytes() == p2.read_bytes()
    assert np.allclose(back, img, rtol=0, atol=1e-7)


def test_sinogram_roundtrip_and_magic_mismatch(tmp_path):
    sino = np.random.default_rng(1).random((5, 9))
    path = tmp_path / "s.sinf"
    fileio.write_sinogram(path, sino)
    assert fileio.read_sinogram(path).shape == (5, 9)
    with pytest.raises(ValueError, match="magic"):
        fileio.read_image(path)


def test_truncated_and_trailing_bytes(tmp_path):
    img = np.zeros((4, 4))
    path = tmp_path / "a.imgf"
    fileio.write_image(path, img)
    raw = path.read_bytes()
    short = tmp_path / "short.imgf"
    short.write_bytes(raw[:-6])
    with pytest.raises(ValueError, match="truncated"):
        fileio.read_image(short)
    longer = tmp_path / "long.imgf"
    longer.write_bytes(raw + b"x")
    with pytest.raises(ValueError, match="trailing"):
        fileio.read_image(longer)


def test_pgm_export(tmp_path):
    img = np.linspace(0.0, 1.0, 64).reshape(8, 8)
    path = tmp_path / "img.pgm"
    fileio.write_pgm16(path, img, window=(0.25, 0.75))
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n8 8\n65535\n")
    pixels = np.frombuffer(raw[raw.index(b"65535\n") + 6:], dtype=">u2").reshape(8, 8)
    assert pixels.min() == 0 and pixels.max() == 65535  # window edges clamp
    assert np.all(np.diff(pixels.reshape(-1).astype(int)) >= 0)
    with pytest.raises(ValueError, match="window"):
        fileio.write_pgm16(path, img, window=(0.5, 0.5))


def test_kv_parsing():
    kv = fileio.parse_kv_text("# comment\na=1\nb = two \n\n")
    assert kv == {"a": "1", "b": "two"}
    with pytest.raises(ValueError, match="key=value"):
        fileio.parse_kv_text("nonsense line")
    text = fileio.format_kv({"b": "2", "a": "1"})
    assert text == "a=1\nb=2\n"
