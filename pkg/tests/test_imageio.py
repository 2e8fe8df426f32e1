import numpy as np
import pytest

from liteseg import imageio as io


def test_ppm_pgm_roundtrip(tmp_path, rng):
    rgb = rng.integers(0, 256, (5, 7, 3)).astype(np.uint8)
    io.write_ppm(tmp_path / "a.ppm", rgb)
    assert np.array_equal(io.read_ppm(tmp_path / "a.ppm"), rgb)
    gray = rng.integers(0, 256, (4, 3)).astype(np.uint8)
    io.write_pgm(tmp_path / "a.pgm", gray)
    assert np.array_equal(io.read_pgm(tmp_path / "a.pgm"), gray)


def test_header_comments_and_maxval(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# a comment\n2 1 # trailing\n15\n\x01\x0f")
    assert io.read_pgm(p).tolist() == [[1, 15]]


@pytest.mark.parametrize(
    "data, match",
    [
        (b"P3\n1 1\n255\n000", "magic"),
        (b"P6\n1 1\n65535\n" + b"\0" * 6, "8-bit"),
        (b"P6\n2 2\n255\n\0\0\0", "pixel bytes"),
        (b"P6\n2 x\n255\n", "non-numeric"),
        (b"P6\n2", "header"),
    ],
)
def test_bad_images(tmp_path, data, match):
    p = tmp_path / "bad.ppm"
    p.write_bytes(data)
    with pytest.raises(io.ImageFormatError, match=match):
        io.read_ppm(p)


def test_missing_file(tmp_path):
    with pytest.raises(io.ImageFormatError, match="cannot read"):
        io.read_ppm(tmp_path / "none.ppm")


def test_palette(tmp_path):
    p = tmp_path / "pal.txt"
    p.write_text("# id r g b\n0 10 20 30\n2 255 0 0\n")
    pal = io.read_palette(p, 3)
    assert pal.tolist() == [[10, 20, 30], [0, 0, 0], [255, 0, 0]]
    io.write_palette(tmp_path / "b.txt", pal)
    assert np.array_equal(io.read_palette(tmp_path / "b.txt", 3), pal)
    assert io.colorize(np.array([[2, 0]]), pal).tolist() == [[[255, 0, 0], [10, 20, 30]]]
    p.write_text("5 1 2 3\n")
    with pytest.raises(io.ImageFormatError, match=":1:"):
        io.read_palette(p, 3)


def test_image_to_tensor():
    t = io.image_to_tensor(np.full((2, 3, 3), 255, np.uint8))
    assert t.shape == (1, 3, 2, 3) and t.dtype == np.float32 and t.max() == 1.0
