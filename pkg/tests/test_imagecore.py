import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from chromaflow import imagecore
from chromaflow.errors import FormatError
from chromaflow.imagecore import VideoClip

unit_floats = st.floats(0.0, 1.0, width=32)


def rgb_images(max_side=6):
    return st.tuples(st.integers(1, max_side), st.integers(1, max_side)).flatmap(
        lambda hw: arrays(np.float32, (hw[0], hw[1], 3), elements=unit_floats))


def _write(path, arr, mode):
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode=mode).save(path)


# ---------------------------------------------------------------- PNG

def test_load_png_byte_extremes(tmp_path):
    _write(tmp_path / "w.png", [[255]], "L")
    _write(tmp_path / "b.png", [[0]], "L")
    assert imagecore.load_png(tmp_path / "w.png")[0, 0, 0] == 1.0
    assert imagecore.load_png(tmp_path / "b.png")[0, 0, 0] == 0.0


def test_load_png_rgb_values(tmp_path):
    _write(tmp_path / "c.png", [[[51, 102, 204]]], "RGB")
    img = imagecore.load_png(tmp_path / "c.png")
    assert img.shape == (1, 1, 3) and img.dtype == np.float32
    np.testing.assert_allclose(img[0, 0], [0.2, 0.4, 0.8], atol=1 / 510)


def test_load_png_rejects_alpha_and_palette(tmp_path):
    Image.new("RGBA", (2, 2)).save(tmp_path / "a.png")
    Image.new("LA", (2, 2)).save(tmp_path / "la.png")
    Image.new("P", (2, 2)).save(tmp_path / "p.png")
    Image.new("I;16", (2, 2)).save(tmp_path / "i16.png")
    for name in ("a.png", "la.png", "p.png", "i16.png"):
        with pytest.raises(FormatError):
            imagecore.load_png(tmp_path / name)


def test_load_png_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        imagecore.load_png(tmp_path / "nope.png")


def test_constant_half_stores_nearest_byte(tmp_path):
    imagecore.save_png(np.full((3, 4, 3), 0.5, np.float32), tmp_path / "h.png")
    raw = np.asarray(Image.open(tmp_path / "h.png"))
    assert set(np.unique(raw)) <= {127, 128}


def test_save_rejects_empty_image(tmp_path):
    with pytest.raises(ValueError):
        imagecore.save_png(np.zeros((0, 3, 3), np.float32), tmp_path / "e.png")


def test_save_rejects_out_of_range(tmp_path):
    with pytest.raises(ValueError):
        imagecore.save_png(np.full((2, 2, 3), 1.5, np.float32), tmp_path / "x.png")


@given(rgb_images())
def test_png_round_trip_within_half_step(tmp_path_factory, img):
    path = tmp_path_factory.mktemp("png") / "r.png"
    imagecore.save_png(img, path)
    back = imagecore.load_png(path)
    assert back.shape == img.shape
    assert np.max(np.abs(back.astype(np.float64) - img)) <= 1 / 510 + 1e-7


def test_gray_png_round_trip(tmp_path, rng):
    img = rng.random((5, 7, 1)).astype(np.float32)
    imagecore.save_png(img, tmp_path / "g.png")
    back = imagecore.load_png(tmp_path / "g.png")
    assert back.shape == (5, 7, 1)
    assert np.max(np.abs(back - img)) <= 1 / 510 + 1e-7


def test_video_round_trip_uses_numbered_frames(tmp_path, rng):
    clip = VideoClip([rng.random((4, 4, 3)).astype(np.float32) for _ in range(3)])
    paths = imagecore.save_video(clip, tmp_path / "v")
    assert [p.name for p in paths] == ["000000.png", "000001.png", "000002.png"]
    back = imagecore.load_video(tmp_path / "v")
    assert len(back) == 3
    for a, b in zip(clip, back):
        assert np.max(np.abs(a - b)) <= 1 / 510 + 1e-7


def test_video_clip_invariants():
    with pytest.raises(ValueError):
        VideoClip([])
    with pytest.raises(ValueError):
        VideoClip([np.zeros((2, 2, 3)), np.zeros((2, 3, 3))])
    with pytest.raises(ValueError):
        VideoClip([np.zeros((2, 2, 2))])
    clip = VideoClip([np.zeros((2, 4, 1))], frame_rate=24.0)
    assert (clip.height, clip.width, clip.channels, len(clip)) == (2, 4, 1, 1)


# ---------------------------------------------------------------- colour

@pytest.mark.parametrize("rgb,expected", [((1, 1, 1), 1.0), ((0, 0, 0), 0.0), ((1, 0, 0), 0.299)])
def test_to_grayscale_examples(rgb, expected):
    g = imagecore.to_grayscale(np.array([[rgb]], np.float32))
    assert g.shape == (1, 1, 1)
    assert g[0, 0, 0] == pytest.approx(expected, abs=1e-6)


def test_to_grayscale_needs_rgb():
    with pytest.raises(ValueError):
        imagecore.to_grayscale(np.zeros((2, 2, 1)))


@pytest.mark.parametrize("rgb,expected", [((0.4, 0.4, 0.4), 0.0), ((1, 0, 0), 1.0), ((0.5, 0.25, 0.25), 0.5),
                                          ((0, 0, 0), 0.0)])
def test_saturation_examples(rgb, expected):
    s = imagecore.saturation_map(np.array([[rgb]], np.float32))
    assert s[0, 0, 0] == pytest.approx(expected, abs=1e-7)


def test_saturation_needs_rgb():
    with pytest.raises(ValueError):
        imagecore.saturation_map(np.zeros((2, 2, 1)))


@given(rgb_images())
def test_saturation_of_replicated_gray_is_zero(img):
    g = imagecore.gray_to_rgb(imagecore.to_grayscale(img))
    assert np.all(imagecore.saturation_map(g) == 0)


@given(rgb_images())
def test_outputs_stay_in_unit_range(img):
    for out in (imagecore.to_grayscale(img), imagecore.saturation_map(img)):
        assert out.min() >= 0 and out.max() <= 1


# ---------------------------------------------------------------- luminance replacement

def test_replace_luminance_fixed_point(rng):
    c = rng.uniform(0.2, 0.8, (4, 4, 3)).astype(np.float32)
    g = imagecore.luma(c)[:, :, None]
    np.testing.assert_allclose(imagecore.replace_luminance(c, g), c, atol=1e-6)


def test_replace_luminance_gray_target():
    out = imagecore.replace_luminance(np.full((2, 2, 3), 0.3, np.float32), np.full((2, 2, 1), 0.7, np.float32))
    np.testing.assert_allclose(out, 0.7, atol=1e-6)


def test_replace_luminance_pure_red_unchanged():
    red = np.array([[[1, 0, 0]]], np.float32)
    out = imagecore.replace_luminance(red, np.full((1, 1, 1), 0.299, np.float32))
    np.testing.assert_allclose(out, red, atol=1e-3)


def test_replace_luminance_size_mismatch():
    with pytest.raises(ValueError):
        imagecore.replace_luminance(np.zeros((2, 2, 3)), np.zeros((3, 2, 1)))


@given(rgb_images(), st.data())
def test_replace_luminance_matches_target_luma(img, data):
    g = data.draw(arrays(np.float32, img.shape[:2] + (1,), elements=unit_floats))
    out = imagecore.replace_luminance(img, g)
    assert out.min() >= 0 and out.max() <= 1
    assert np.max(np.abs(imagecore.luma(out) - g[:, :, 0])) <= 1e-3


# ---------------------------------------------------------------- metrics

def test_psnr_cap_and_known_values():
    a = np.zeros((4, 4, 3), np.float32)
    assert imagecore.psnr(a, a) == 99.0
    assert imagecore.psnr_from_mse(0.01) == pytest.approx(20.0)
    assert imagecore.psnr_from_mse(1.0) == pytest.approx(0.0)
    assert imagecore.psnr(a, np.full_like(a, 0.1)) == pytest.approx(20.0, abs=1e-5)


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        imagecore.psnr(np.zeros((2, 2, 3)), np.zeros((2, 2, 1)))


@given(rgb_images(3), st.data())
def test_psnr_symmetric(a, data):
    b = data.draw(arrays(np.float32, a.shape, elements=unit_floats))
    assert imagecore.psnr(a, b) == imagecore.psnr(b, a)
