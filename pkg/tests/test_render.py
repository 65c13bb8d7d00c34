import numpy as np
import pytest
from PIL import Image

from lucidcam.errors import ArgumentError, DataError
from lucidcam.optim import OneCycleSchedule, one_cycle
from lucidcam.render import (CAPTION_STRIP, PANEL_MARGIN, RgbImage, apply_colormap, compose_panel, format_caption,
                             gray_to_rgb, overlay, plot_area, plot_series, read_png, text_width, to_grayscale,
                             write_png)


def test_grayscale_weights():
    img = np.zeros((3, 1, 3), np.float32)
    img[:, 0, 0] = 1
    img[0, 0, 1] = 1
    img[2, 0, 2] = 1
    g = to_grayscale(img)[0]
    assert g[0] == pytest.approx(1.0) and g[1] == pytest.approx(0.299) and g[2] == pytest.approx(0.114)


def test_colormap_anchors():
    px = apply_colormap(np.array([[0.0, 0.25, 0.5, 0.75, 1.0, 0.125]])).pixels[0]
    assert px[:5].tolist() == [[0, 0, 128], [0, 128, 255], [0, 255, 128], [255, 128, 0], [128, 0, 0]]
    assert px[5].tolist() == [0, 64, 192]


def test_overlay_arithmetic():
    gray = np.full((2, 2), 100 / 255)
    colour = RgbImage.from_array(np.full((2, 2, 3), 200, np.uint8))
    assert overlay(gray, colour, 0.0).pixels.tolist() == gray_to_rgb(gray).pixels.tolist()
    assert overlay(gray, colour, 1.0).pixels.tolist() == colour.pixels.tolist()
    assert np.all(overlay(gray, colour, 0.5).pixels == 150)
    with pytest.raises(ArgumentError):
        overlay(gray, colour, 1.5)
    with pytest.raises(ArgumentError):
        overlay(np.zeros((3, 3)), colour)


def test_caption_format():
    assert format_caption(1, 0, 1.2345678, 0.987654) == "1/0/1.2346/0.9877"
    assert format_caption(None, 1, None, 0.5) == "-/1/-/0.5000"


def _tile(v, size=20):
    return RgbImage.from_array(np.full((size, size, 3), v, np.uint8))


def test_panel_grid_extents():
    entries = [(_tile(10 * i), (i % 2, 0, 0.1 * i, 0.5)) for i in range(9)]
    panel = compose_panel(entries, 3)
    cap_w = text_width("1/0/0.8000/0.5000")
    cell_w = max(20, cap_w) + 2 * PANEL_MARGIN
    cell_h = 20 + CAPTION_STRIP + 2 * PANEL_MARGIN
    assert (panel.width, panel.height) == (3 * cell_w, 3 * cell_h)
    for n in range(9):
        r, c = divmod(n, 3)
        x0 = c * cell_w + (cell_w - 20) // 2
        y0 = r * cell_h + PANEL_MARGIN
        assert np.all(panel.pixels[y0:y0 + 20, x0:x0 + 20] == 10 * n)
    caption_rows = panel.pixels[PANEL_MARGIN + 20:cell_h, :cell_w]
    assert (caption_rows == 0).any()


def test_panel_single_and_errors():
    one = compose_panel([(_tile(0), "1/1/0.0100/0.9900")], 3)
    assert one.width == max(20, text_width("1/1/0.0100/0.9900")) + 2 * PANEL_MARGIN
    with pytest.raises(ArgumentError):
        compose_panel([])
    with pytest.raises(ArgumentError):
        compose_panel([(_tile(0), "a"), (_tile(0, 10), "b")])


def _series_pixels(img, colour=(31, 119, 180)):
    return np.all(img.pixels == colour, axis=-1)


def test_plot_two_points_spans_area():
    img = plot_series([(0, 0), (1, 1)], 120, 80)
    x0, y0, pw, ph = plot_area(120, 80)
    on = _series_pixels(img)
    cols = np.nonzero(on.any(axis=0))[0]
    assert cols.min() == x0 and cols.max() == x0 + pw - 1
    assert on[y0 + ph - 1, x0] and on[y0, x0 + pw - 1]


def test_plot_constant_series_mid_height():
    img = plot_series([(i, 3.0) for i in range(10)], 120, 80)
    x0, y0, pw, ph = plot_area(120, 80)
    rows = np.nonzero(_series_pixels(img).any(axis=1))[0]
    assert rows.tolist() == [int(np.rint(y0 + 0.5 * (ph - 1)))]


@pytest.mark.parametrize("pct", [0.5, 0.3])
def test_plot_one_cycle_peak_column(pct):
    total = 400
    s = OneCycleSchedule(total, 2e-2, pct_peak=pct)
    img = plot_series([(i, one_cycle(i, s)[0]) for i in range(total + 1)])
    x0, y0, pw, ph = plot_area(img.width, img.height)
    on = _series_pixels(img)
    top = min(np.nonzero(on[:, c])[0].min() if on[:, c].any() else img.height for c in range(img.width))
    peak_cols = np.nonzero(on[top])[0]
    assert abs(np.median(peak_cols) - (x0 + pw * pct)) <= 2


def test_png_round_trip(tmp_path):
    red = RgbImage.from_array(np.array([[[255, 0, 0]]], np.uint8))
    write_png(red, str(tmp_path / "red.png"))
    assert read_png(str(tmp_path / "red.png")).tolist() == [[[255, 0, 0]]]
    rng = np.random.default_rng(0)
    over = overlay(rng.random((96, 96)), apply_colormap(rng.random((96, 96))))
    write_png(over, str(tmp_path / "o.png"))
    with Image.open(tmp_path / "o.png") as im:
        assert im.mode == "RGB" and np.array_equal(np.array(im), over.pixels)


def test_png_errors(tmp_path):
    with pytest.raises(OSError):
        write_png(_tile(0), str(tmp_path / "no" / "dir" / "x.png"))
    (tmp_path / "junk.png").write_bytes(b"not a png")
    with pytest.raises(DataError):
        read_png(str(tmp_path / "junk.png"))


def test_series_csv(tmp_path):
    from lucidcam.render import read_series_csv
    p = tmp_path / "c.csv"
    p.write_text("step,lr,smoothed_loss\n0,1e-06,0.7\n1,2e-06,0.69\n")
    assert read_series_csv(str(p)) == [(0.0, 1e-6), (1.0, 2e-6)]
    p.write_text("step,value\n0,x\n")
    with pytest.raises(DataError):
        read_series_csv(str(p))
