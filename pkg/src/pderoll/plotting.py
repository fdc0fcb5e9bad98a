"""Minimal raster plotter: lines, scatters, histograms, written as PNG.

Deliberately tiny (no plotting dependency): every figure this package emits
is also written as CSV, so these images are conveniences, never the source
of truth. 8-bit RGB PNGs with a built-in 5x7 bitmap font for tick labels.
"""

import struct
import zlib

import numpy as np

WHITE = (255, 255, 255)
BLACK = (20, 20, 20)
GREY = (180, 180, 180)
PALETTE = [(31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40),
           (148, 103, 189), (140, 86, 75), (227, 119, 194), (127, 127, 127)]

# 5x7 glyphs, one int per row, bit 4 = leftmost pixel
_FONT = {
    "0": (0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E),
    "1": (0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E),
    "2": (0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F),
    "3": (0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E),
    "4": (0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02),
    "5": (0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E),
    "6": (0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E),
    "7": (0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08),
    "8": (0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E),
    "9": (0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C),
    "a": (0x00, 0x00, 0x0E, 0x01, 0x0F, 0x11, 0x0F),
    "b": (0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x1E),
    "c": (0x00, 0x00, 0x0E, 0x10, 0x10, 0x11, 0x0E),
    "d": (0x01, 0x01, 0x0D, 0x13, 0x11, 0x11, 0x0F),
    "e": (0x00, 0x00, 0x0E, 0x11, 0x1F, 0x10, 0x0E),
    "f": (0x06, 0x09, 0x08, 0x1C, 0x08, 0x08, 0x08),
    "g": (0x00, 0x0F, 0x11, 0x11, 0x0F, 0x01, 0x0E),
    "h": (0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x11),
    "i": (0x04, 0x00, 0x0C, 0x04, 0x04, 0x04, 0x0E),
    "j": (0x02, 0x00, 0x06, 0x02, 0x02, 0x12, 0x0C),
    "k": (0x10, 0x10, 0x12, 0x14, 0x18, 0x14, 0x12),
    "l": (0x0C, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E),
    "m": (0x00, 0x00, 0x1A, 0x15, 0x15, 0x15, 0x15),
    "n": (0x00, 0x00, 0x16, 0x19, 0x11, 0x11, 0x11),
    "o": (0x00, 0x00, 0x0E, 0x11, 0x11, 0x11, 0x0E),
    "p": (0x00, 0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10),
    "q": (0x00, 0x0F, 0x11, 0x11, 0x0F, 0x01, 0x01),
    "r": (0x00, 0x00, 0x16, 0x19, 0x10, 0x10, 0x10),
    "s": (0x00, 0x00, 0x0F, 0x10, 0x0E, 0x01, 0x1E),
    "t": (0x08, 0x08, 0x1C, 0x08, 0x08, 0x09, 0x06),
    "u": (0x00, 0x00, 0x11, 0x11, 0x11, 0x13, 0x0D),
    "v": (0x00, 0x00, 0x11, 0x11, 0x11, 0x0A, 0x04),
    "w": (0x00, 0x00, 0x15, 0x15, 0x15, 0x15, 0x0A),
    "x": (0x00, 0x00, 0x11, 0x0A, 0x04, 0x0A, 0x11),
    "y": (0x00, 0x11, 0x11, 0x0F, 0x01, 0x11, 0x0E),
    "z": (0x00, 0x00, 0x1F, 0x02, 0x04, 0x08, 0x1F),
    ".": (0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C),
    ",": (0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08),
    "-": (0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00),
    "+": (0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00),
    "=": (0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00),
    ":": (0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00),
    "/": (0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10),
    "(": (0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02),
    ")": (0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08),
    "_": (0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F),
    ">": (0x08, 0x04, 0x02, 0x01, 0x02, 0x04, 0x08),
    "<": (0x02, 0x04, 0x08, 0x10, 0x08, 0x04, 0x02),
    "%": (0x19, 0x19, 0x02, 0x04, 0x08, 0x13, 0x13),
    " ": (0, 0, 0, 0, 0, 0, 0),
}


def write_png(path, rgb):
    """Encode an (H, W, 3) uint8 array as an 8-bit RGB PNG."""
    h, w, _ = rgb.shape
    raw = b"".join(b"\x00" + rgb[r].tobytes() for r in range(h))

    def chunk(tag, payload):
        body = tag + payload
        return struct.pack(">I", len(payload)) + body + struct.pack(">I", zlib.crc32(body))

    with open(path, "wb") as f:
        f.write(b"\x89PNG\r\n\x1a\n")
        f.write(chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)))
        f.write(chunk(b"IDAT", zlib.compress(raw, 6)))
        f.write(chunk(b"IEND", b""))


class Canvas:
    def __init__(self, width=640, height=420):
        self.w, self.h = width, height
        self.px = np.full((height, width, 3), 255, dtype=np.uint8)

    def put(self, x, y, color):
        if 0 <= x < self.w and 0 <= y < self.h:
            self.px[int(y), int(x)] = color

    def line(self, x0, y0, x1, y1, color):
        n = int(max(abs(x1 - x0), abs(y1 - y0))) + 1
        for t in np.linspace(0.0, 1.0, n):
            self.put(round(x0 + (x1 - x0) * t), round(y0 + (y1 - y0) * t), color)

    def rect(self, x0, y0, x1, y1, color):
        x0, x1 = sorted((max(0, int(x0)), min(self.w - 1, int(x1))))
        y0, y1 = sorted((max(0, int(y0)), min(self.h - 1, int(y1))))
        self.px[y0:y1 + 1, x0:x1 + 1] = color

    def marker(self, x, y, color, r=2):
        self.rect(x - r, y - r, x + r, y + r, color)

    def text(self, x, y, s, color=BLACK):
        cx = int(x)
        for ch in str(s).lower():
            rows = _FONT.get(ch, _FONT[" "])
            for ry, bits in enumerate(rows):
                for rx in range(5):
                    if bits & (1 << (4 - rx)):
                        self.put(cx + rx, int(y) + ry, color)
            cx += 6

    def save(self, path):
        write_png(path, self.px)


class Axes:
    """Maps data coordinates to pixels inside a framed plotting region."""

    MARGIN = (56, 16, 28, 40)   # left, right, top, bottom

    def __init__(self, canvas, xlim, ylim, title="", xlabel="", ylabel=""):
        self.c = canvas
        ml, mr, mt, mb = self.MARGIN
        self.x0, self.x1 = ml, canvas.w - mr
        self.y0, self.y1 = canvas.h - mb, mt
        self.xlim = self._pad(xlim)
        self.ylim = self._pad(ylim)
        c = canvas
        c.line(self.x0, self.y0, self.x1, self.y0, BLACK)
        c.line(self.x0, self.y0, self.x0, self.y1, BLACK)
        if title:
            c.text(self.x0, 8, title)
        if xlabel:
            c.text((self.x0 + self.x1) // 2 - 3 * len(xlabel), c.h - 12, xlabel)
        if ylabel:
            c.text(2, self.y1 - 10, ylabel)
        for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
            xv = self.xlim[0] + frac * (self.xlim[1] - self.xlim[0])
            yv = self.ylim[0] + frac * (self.ylim[1] - self.ylim[0])
            xp, yp = self.to_px(xv, self.ylim[0])[0], self.to_px(self.xlim[0], yv)[1]
            c.line(xp, self.y0, xp, self.y0 + 3, BLACK)
            c.text(xp - 10, self.y0 + 6, f"{xv:.3g}")
            c.line(self.x0 - 3, yp, self.x0, yp, BLACK)
            c.text(2, yp - 3, f"{yv:.3g}")

    @staticmethod
    def _pad(lim):
        lo, hi = float(lim[0]), float(lim[1])
        if hi <= lo:
            hi = lo + 1.0
        span = hi - lo
        return lo - 0.03 * span, hi + 0.03 * span

    def to_px(self, x, y):
        fx = (x - self.xlim[0]) / (self.xlim[1] - self.xlim[0])
        fy = (y - self.ylim[0]) / (self.ylim[1] - self.ylim[0])
        return self.x0 + fx * (self.x1 - self.x0), self.y0 + fy * (self.y1 - self.y0)

    def polyline(self, xs, ys, color):
        pts = [self.to_px(x, y) for x, y in zip(xs, ys) if np.isfinite(x) and np.isfinite(y)]
        for (xa, ya), (xb, yb) in zip(pts, pts[1:]):
            self.c.line(xa, ya, xb, yb, color)

    def scatter(self, xs, ys, color, r=2):
        for x, y in zip(xs, ys):
            if np.isfinite(x) and np.isfinite(y):
                self.c.marker(*self.to_px(x, y), color, r=r)


def _finite(values):
    a = np.asarray(list(values), dtype=float)
    a = a[np.isfinite(a)]
    return a if a.size else np.array([0.0, 1.0])


def line_plot(path, series, title="", xlabel="", ylabel="", labels=None):
    """series: list of (xs, ys) pairs drawn in palette order."""
    canvas = Canvas()
    allx = _finite(np.concatenate([np.asarray(s[0], float) for s in series]))
    ally = _finite(np.concatenate([np.asarray(s[1], float) for s in series]))
    ax = Axes(canvas, (allx.min(), allx.max()), (ally.min(), ally.max()),
              title, xlabel, ylabel)
    for i, (xs, ys) in enumerate(series):
        ax.polyline(xs, ys, PALETTE[i % len(PALETTE)])
        if labels:
            canvas.marker(ax.x1 - 110, ax.y1 + 10 + 12 * i, PALETTE[i % len(PALETTE)])
            canvas.text(ax.x1 - 102, ax.y1 + 6 + 12 * i, labels[i])
    canvas.save(path)


def scatter_plot(path, xs, ys, fit=None, title="", xlabel="", ylabel=""):
    canvas = Canvas()
    fx, fy = _finite(xs), _finite(ys)
    ax = Axes(canvas, (fx.min(), fx.max()), (fy.min(), fy.max()), title, xlabel, ylabel)
    ax.scatter(xs, ys, PALETTE[0], r=1)
    if fit is not None:
        slope, intercept = fit
        gx = np.linspace(fx.min(), fx.max(), 64)
        ax.polyline(gx, slope * gx + intercept, PALETTE[3])
    canvas.save(path)


def histogram_plot(path, counts, title="", xlabel="", ylabel="count"):
    """counts: 1-based array of bar heights (index i -> label i+1)."""
    counts = np.asarray(counts, dtype=float)
    canvas = Canvas()
    n = counts.size
    ax = Axes(canvas, (0.5, n + 0.5), (0.0, max(counts.max(), 1.0)),
              title, xlabel, ylabel)
    for i, v in enumerate(counts):
        x0, _ = ax.to_px(i + 1 - 0.35, 0)
        x1, _ = ax.to_px(i + 1 + 0.35, 0)
        _, y1 = ax.to_px(i + 1, v)
        canvas.rect(x0, ax.y0 - 1, x1, y1, PALETTE[0])
    canvas.save(path)
