"""Binary PPM (P6) / PGM (P5) images and ``classid R G B`` palette files."""
from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(OSError):
    pass


def _tokens(data: bytes, count: int):
    """Reads ``count`` whitespace-separated header tokens, skipping ``#`` comments.

    Returns the tokens and the offset of the byte after the single whitespace
    that terminates the last one.
    """
    out, i, n = [], 0, len(data)
    while len(out) < count:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i < n and data[i : i + 1] == b"#":
            while i < n and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not data[j : j + 1].isspace() and data[j : j + 1] != b"#":
            j += 1
        if j == i:
            raise ImageFormatError("truncated header")
        out.append(data[i:j])
        i = j
    if i >= n or not data[i : i + 1].isspace():
        raise ImageFormatError("header must end with a single whitespace byte")
    return out, i + 1


def _read(path, magic: bytes, channels: int) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ImageFormatError(f"cannot read {path}: {exc.strerror or exc}") from None
    if data[:2] != magic:
        raise ImageFormatError(f"{path}: expected {magic.decode()} magic, got {data[:2]!r}")
    toks, off = _tokens(data[2:], 3)
    try:
        w, h, maxval = (int(t) for t in toks)
    except ValueError:
        raise ImageFormatError(f"{path}: non-numeric header field") from None
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise ImageFormatError(f"{path}: unsupported header {w}x{h} maxval {maxval} (8-bit only)")
    need = w * h * channels
    body = data[2 + off : 2 + off + need]
    if len(body) < need:
        raise ImageFormatError(f"{path}: expected {need} pixel bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, channels)
    return arr.copy()


def read_ppm(path) -> np.ndarray:
    """Returns an (H, W, 3) uint8 array."""
    return _read(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    """Returns an (H, W) uint8 array."""
    return _read(path, b"P5", 1)[:, :, 0]


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"PPM data must be (H, W, 3), got {rgb.shape}")
    h, w = rgb.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError(f"PGM data must be (H, W), got {gray.shape}")
    if gray.size and (gray.min() < 0 or gray.max() > 255):
        raise ValueError("PGM values must lie in [0, 255]")
    h, w = gray.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(gray, dtype=np.uint8).tobytes())


def image_to_tensor(rgb: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (1, 3, H, W) float32 in [0, 1]."""
    return (rgb.astype(np.float32) / 255.0).transpose(2, 0, 1)[None].copy()


def default_palette(num_classes: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    pal = rng.integers(0, 256, size=(num_classes, 3), dtype=np.int64)
    pal[0] = 0
    return pal.astype(np.uint8)


def read_palette(path, num_classes: int) -> np.ndarray:
    """Parses ``classid R G B`` lines; classes not listed are black."""
    pal = np.zeros((num_classes, 3), dtype=np.uint8)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ImageFormatError(f"cannot read {path}: {exc.strerror or exc}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            cid, r, g, b = (int(t) for t in parts)
        except ValueError:
            raise ImageFormatError(f"{path}:{lineno}: expected 'classid R G B', got {raw.strip()!r}") from None
        if not 0 <= cid < num_classes or not all(0 <= v <= 255 for v in (r, g, b)):
            raise ImageFormatError(f"{path}:{lineno}: class or color out of range")
        pal[cid] = (r, g, b)
    return pal


def write_palette(path, palette: np.ndarray) -> None:
    lines = [f"{i} {r} {g} {b}" for i, (r, g, b) in enumerate(np.asarray(palette, dtype=int))]
    Path(path).write_text("\n".join(lines) + "\n")


def colorize(labels: np.ndarray, palette: np.ndarray) -> np.ndarray:
    return np.asarray(palette, dtype=np.uint8)[labels]
