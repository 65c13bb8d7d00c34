"""Grayscale conversion, jet overlays, captioned panels, line plots and PNG I/O.

Colormap anchors (value -> 8-bit RGB), piecewise linear in between:

    0.00 -> (  0,   0, 128)
    0.25 -> (  0, 128, 255)
    0.50 -> (  0, 255, 128)
    0.75 -> (255, 128,   0)
    1.00 -> (128,   0,   0)

Captions use a built-in 5x7 bitmap font so output pixels are identical on
every platform.
"""
from __future__ import annotations

import math
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DataError, ShapeError
from .persist import atomic_write_bytes

JET_ANCHORS = (
    (0.00, (0, 0, 128)),
    (0.25, (0, 128, 255)),
    (0.50, (0, 255, 128)),
    (0.75, (255, 128, 0)),
    (1.00, (128, 0, 0)),
)


@dataclass
class RgbImage:
    width: int
    height: int
    pixels: np.ndarray  # height x width x 3, uint8

    def __post_init__(self):
        if self.pixels.shape != (self.height, self.width, 3) or self.pixels.dtype != np.uint8:
            raise ShapeError(f"pixel buffer {self.pixels.shape}/{self.pixels.dtype} != {self.height}x{self.width}x3 uint8")

    @classmethod
    def from_array(cls, pixels) -> "RgbImage":
        pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
        return cls(pixels.shape[1], pixels.shape[0], pixels)

    @classmethod
    def blank(cls, width, height, color=(255, 255, 255)) -> "RgbImage":
        px = np.empty((height, width, 3), dtype=np.uint8)
        px[:] = color
        return cls(width, height, px)

    @property
    def buffer(self) -> bytes:
        return self.pixels.tobytes()


def to_byte(x) -> np.ndarray:
    """Round half away from zero onto 0..255."""
    x = np.asarray(x, dtype=np.float64)
    return np.clip(np.sign(x) * np.floor(np.abs(x) + 0.5), 0, 255).astype(np.uint8)


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """Rec.601 luma of a 3 x H x W image."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected 3 x H x W, got {image.shape}")
    src = image.astype(np.float64)
    return np.clip(0.299 * src[0] + 0.587 * src[1] + 0.114 * src[2], 0.0, 1.0).astype(np.float32)


def image_to_rgb(image: np.ndarray) -> RgbImage:
    """3 x H x W float image in [0, 1] to 8-bit."""
    return RgbImage.from_array(to_byte(np.clip(image, 0, 1).transpose(1, 2, 0) * 255.0))


def gray_to_rgb(gray: np.ndarray) -> RgbImage:
    b = to_byte(np.clip(gray, 0, 1) * 255.0)
    return RgbImage.from_array(np.repeat(b[:, :, None], 3, axis=2))


def apply_colormap(heatmap: np.ndarray) -> RgbImage:
    v = np.clip(np.asarray(heatmap, dtype=np.float64), 0.0, 1.0)
    xs = [a for a, _ in JET_ANCHORS]
    chans = [np.interp(v, xs, [c[i] for _, c in JET_ANCHORS]) for i in range(3)]
    return RgbImage.from_array(to_byte(np.stack(chans, axis=-1)))


def overlay(gray: np.ndarray, colored: RgbImage, alpha: float = 0.4) -> RgbImage:
    """Blend (1 - alpha) * gray + alpha * colored per channel."""
    if not 0.0 <= alpha <= 1.0:
        raise ArgumentError(f"alpha must be in [0, 1], got {alpha}")
    if gray.shape != (colored.height, colored.width):
        raise ArgumentError(f"gray {gray.shape} and colour {colored.height}x{colored.width} extents differ")
    g = np.clip(gray.astype(np.float64), 0, 1)[:, :, None] * 255.0
    out = (1.0 - alpha) * g + alpha * colored.pixels.astype(np.float64)
    return RgbImage.from_array(to_byte(out))


# -- text -----------------------------------------------------------------

_GLYPHS = {
    "0": ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    "1": ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    "2": ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    "3": ("11110", "00001", "00001", "01110", "00001", "00001", "11110"),
    "4": ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    "5": ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    "6": ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    "7": ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    "8": ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    "9": ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
    ".": ("00000", "00000", "00000", "00000", "00000", "01100", "01100"),
    "/": ("00001", "00001", "00010", "00100", "01000", "10000", "10000"),
    "-": ("00000", "00000", "00000", "11111", "00000", "00000", "00000"),
    "+": ("00000", "00100", "00100", "11111", "00100", "00100", "00000"),
    "e": ("00000", "00000", "01110", "10001", "11111", "10000", "01110"),
    "?": ("01110", "10001", "00001", "00010", "00100", "00000", "00100"),
    "n": ("00000", "00000", "10110", "11001", "10001", "10001", "10001"),
    "a": ("00000", "00000", "01110", "00001", "01111", "10001", "01111"),
    "i": ("00100", "00000", "01100", "00100", "00100", "00100", "01110"),
    "f": ("00110", "01001", "01000", "11100", "01000", "01000", "01000"),
    " ": ("00000",) * 7,
}
GLYPH_W, GLYPH_H, GLYPH_GAP = 5, 7, 1
_BITMAPS = {ch: np.array([[c == "1" for c in row] for row in rows]) for ch, rows in _GLYPHS.items()}


def text_width(text: str) -> int:
    return max(0, len(text) * (GLYPH_W + GLYPH_GAP) - GLYPH_GAP)


def draw_text(img: RgbImage, text: str, x: int, y: int, color=(0, 0, 0)):
    for i, ch in enumerate(text):
        bm = _BITMAPS.get(ch, _BITMAPS["?"])
        x0 = x + i * (GLYPH_W + GLYPH_GAP)
        ys, xs = np.nonzero(bm)
        ys, xs = ys + y, xs + x0
        keep = (ys >= 0) & (ys < img.height) & (xs >= 0) & (xs < img.width)
        img.pixels[ys[keep], xs[keep]] = color


def format_caption(pred, actual, loss, prob) -> str:
    def num(v):
        return "-" if v is None else f"{v:.4f}"
    return f"{'-' if pred is None else pred}/{'-' if actual is None else actual}/{num(loss)}/{num(prob)}"


CAPTION_STRIP = GLYPH_H + 4
PANEL_MARGIN = 2


def compose_panel(entries, columns: int = 3) -> RgbImage:
    """Grid of tiles, each with a caption strip below the image.

    ``entries`` holds (RgbImage, caption) pairs; caption is a string or a
    (predicted, actual, loss, probability) tuple.
    """
    if not entries:
        raise ArgumentError("compose_panel needs at least one entry")
    if columns < 1:
        raise ArgumentError(f"columns must be >= 1, got {columns}")
    w, h = entries[0][0].width, entries[0][0].height
    captions = []
    for img, cap in entries:
        if (img.width, img.height) != (w, h):
            raise ArgumentError("all panel images must share extents")
        captions.append(cap if isinstance(cap, str) else format_caption(*cap))
    cols = min(columns, len(entries))
    rows = math.ceil(len(entries) / cols)
    cell_w = max(w, max(text_width(c) for c in captions)) + 2 * PANEL_MARGIN
    cell_h = h + CAPTION_STRIP + 2 * PANEL_MARGIN
    out = RgbImage.blank(cols * cell_w, rows * cell_h)
    for n, ((img, _), cap) in enumerate(zip(entries, captions)):
        r, c = divmod(n, cols)
        x0 = c * cell_w + (cell_w - w) // 2
        y0 = r * cell_h + PANEL_MARGIN
        out.pixels[y0:y0 + h, x0:x0 + w] = img.pixels
        draw_text(out, cap, c * cell_w + (cell_w - text_width(cap)) // 2, y0 + h + 2)
    return out


# -- plots ------------------------------------------------------------------

PLOT_LEFT, PLOT_RIGHT, PLOT_TOP, PLOT_BOTTOM = 44, 6, 6, 12


def plot_area(width: int, height: int) -> tuple[int, int, int, int]:
    """(x0, y0, plot_width, plot_height) of the data region inside a plot image."""
    return PLOT_LEFT, PLOT_TOP, width - PLOT_LEFT - PLOT_RIGHT, height - PLOT_TOP - PLOT_BOTTOM


def _line(img: RgbImage, x0, y0, x1, y1, color):
    n = max(abs(x1 - x0), abs(y1 - y0)) + 1
    xs = np.rint(np.linspace(x0, x1, n)).astype(int)
    ys = np.rint(np.linspace(y0, y1, n)).astype(int)
    img.pixels[ys, xs] = color


def plot_series(points, width: int = 320, height: int = 200, color=(31, 119, 180)) -> RgbImage:
    """Polyline of (x, y) points fitted to the axes, with min/max tick labels."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
        raise ArgumentError("plot_series needs at least 2 (x, y) points")
    if not np.all(np.isfinite(pts)):
        raise ArgumentError("plot_series needs finite values")
    x0, y0, pw, ph = plot_area(width, height)
    if pw < 2 or ph < 2:
        raise ArgumentError(f"plot {width}x{height} too small")
    img = RgbImage.blank(width, height)
    axis = (160, 160, 160)
    _line(img, x0 - 1, y0, x0 - 1, y0 + ph, axis)
    _line(img, x0 - 1, y0 + ph, x0 + pw - 1, y0 + ph, axis)
    xs, ys = pts[:, 0], pts[:, 1]
    xmin, xmax, ymin, ymax = xs.min(), xs.max(), ys.min(), ys.max()
    cx = np.zeros_like(xs) if xmax == xmin else (xs - xmin) / (xmax - xmin)
    cy = np.full_like(ys, 0.5) if ymax == ymin else (ys - ymin) / (ymax - ymin)
    px = np.rint(x0 + cx * (pw - 1)).astype(int)
    py = np.rint(y0 + (1.0 - cy) * (ph - 1)).astype(int)
    for i in range(len(px) - 1):
        _line(img, px[i], py[i], px[i + 1], py[i + 1], color)
    fmt = "{:.3g}".format
    draw_text(img, fmt(ymax), max(0, x0 - 3 - text_width(fmt(ymax))), y0)
    draw_text(img, fmt(ymin), max(0, x0 - 3 - text_width(fmt(ymin))), y0 + ph - GLYPH_H)
    draw_text(img, fmt(xmin), x0, y0 + ph + 3)
    draw_text(img, fmt(xmax), x0 + pw - text_width(fmt(xmax)), y0 + ph + 3)
    return img


def read_series_csv(path: str) -> list[tuple[float, float]]:
    """Points from a CSV whose first two columns are ``step,value`` (header row required)."""
    import csv

    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if not rows or len(rows[0]) < 2:
        raise DataError(f"{path}: expected a step,value header")
    try:
        return [(float(r[0]), float(r[1])) for r in rows[1:] if r]
    except (ValueError, IndexError) as e:
        raise DataError(f"{path}: non-numeric row ({e})") from e


# -- PNG ------------------------------------------------------------------

def _chunk(kind: bytes, data: bytes) -> bytes:
    crc = zlib.crc32(data, zlib.crc32(kind)) & 0xFFFFFFFF
    return struct.pack(">I", len(data)) + kind + data + struct.pack(">I", crc)


def png_bytes(pixels: np.ndarray) -> bytes:
    """Encode H x W (gray) or H x W x 3 (RGB) uint8 pixels, filter 0, non-interlaced."""
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    if pixels.ndim == 2:
        color_type, channels = 0, 1
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        color_type, channels = 2, 3
    else:
        raise ShapeError(f"cannot encode pixel array of shape {pixels.shape}")
    h, w = pixels.shape[:2]
    rows = pixels.reshape(h, w * channels)
    raw = np.zeros((h, w * channels + 1), dtype=np.uint8)
    raw[:, 1:] = rows
    header = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    return (b"\x89PNG\r\n\x1a\n" + _chunk(b"IHDR", header)
            + _chunk(b"IDAT", zlib.compress(raw.tobytes(), 9)) + _chunk(b"IEND", b""))


def write_png_array(pixels: np.ndarray, path: str):
    atomic_write_bytes(path, png_bytes(pixels))


def write_png(image: RgbImage, path: str):
    write_png_array(image.pixels, path)


def read_png(path: str, mode: str = "RGB") -> np.ndarray:
    """Decode a PNG to uint8 pixels; ``mode`` 'RGB' demands an RGB file, 'L' converts."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise DataError(f"{os.path.basename(path)}: not a PNG file")
            if mode == "RGB" and im.mode != "RGB":
                raise DataError(f"{os.path.basename(path)}: expected 8-bit RGB, got mode {im.mode}")
            return np.array(im.convert(mode), dtype=np.uint8)
    except (OSError, UnidentifiedImageError, SyntaxError) as e:
        raise DataError(f"{os.path.basename(path)}: unreadable PNG ({e})") from e
