"""The internal plotter must emit valid PNGs with sane dimensions."""

import struct
import zlib

import numpy as np

from pderoll import plotting


def _check_png(path):
    blob = path.read_bytes()
    assert blob[:8] == b"\x89PNG\r\n\x1a\n"
    w, h = struct.unpack(">II", blob[16:24])
    assert w > 0 and h > 0
    # IDAT payload must inflate
    off = 8
    found = False
    while off < len(blob):
        (ln,) = struct.unpack(">I", blob[off:off + 4])
        tag = blob[off + 4:off + 8]
        if tag == b"IDAT":
            zlib.decompress(blob[off + 8:off + 8 + ln])
            found = True
        off += 12 + ln
    assert found
    return w, h


def test_write_png_roundtrip_dimensions(tmp_path):
    img = np.zeros((31, 47, 3), dtype=np.uint8)
    img[5, 7] = (255, 0, 0)
    p = tmp_path / "x.png"
    plotting.write_png(p, img)
    assert _check_png(p) == (47, 31)


def test_line_scatter_histogram_render(tmp_path, rng):
    xs = np.linspace(0, 10, 50)
    plotting.line_plot(tmp_path / "l.png", [(xs, np.sin(xs)), (xs, np.cos(xs))],
                       labels=["sin", "cos"], title="waves", xlabel="t", ylabel="y")
    _check_png(tmp_path / "l.png")

    plotting.scatter_plot(tmp_path / "s.png", rng.uniform(0, 4, 100),
                          rng.uniform(0, 2, 100), fit=(0.5, 0.1),
                          title="fit", xlabel="eps", ylabel="err")
    _check_png(tmp_path / "s.png")

    plotting.histogram_plot(tmp_path / "h.png", np.array([4, 0, 9, 2, 1, 7]),
                            title="steps", xlabel="s")
    _check_png(tmp_path / "h.png")


def test_plots_tolerate_nan_and_constant_data(tmp_path):
    ys = np.array([np.nan, 1.0, np.nan, 1.0])
    plotting.line_plot(tmp_path / "n.png", [(np.arange(4), ys)])
    _check_png(tmp_path / "n.png")
    plotting.scatter_plot(tmp_path / "c.png", np.ones(5), np.ones(5))
    _check_png(tmp_path / "c.png")
