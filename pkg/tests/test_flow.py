import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from chromaflow import flow as fl
from chromaflow.errors import FormatError
from chromaflow.flow import FlowConfig, WarpOperator
from chromaflow.synthdata import SceneSpec, ShapeSpec, generate_clip

from oracles import hand_flo_bytes, loop_bilinear_warp

finite = st.floats(-1e6, 1e6, width=32, allow_nan=False)


def translation_pair(velocity=(1, 0), seed=3):
    spec = SceneSpec(64, 64, 2, [ShapeSpec("rectangle", 20, (0.9, 0.1, 0.1), (20, 22), velocity)],
                     texture_noise=0.05, seed=seed)
    return generate_clip(spec)


# ---------------------------------------------------------------- .flo

@given(st.integers(1, 6), st.integers(1, 6), st.data())
def test_flo_round_trip_bit_exact(tmp_path_factory, h, w, data):
    f = data.draw(arrays(np.float32, (h, w, 2), elements=finite))
    path = tmp_path_factory.mktemp("flo") / "f.flo"
    fl.write_flo(f, path)
    back = fl.read_flo(path)
    assert back.dtype == np.float32
    assert back.tobytes() == f.tobytes()


def test_flo_hand_encoded_file(tmp_path):
    raw = hand_flo_bytes(1, 1, [(2.0, -1.0)])
    assert len(raw) == 20
    (tmp_path / "h.flo").write_bytes(raw)
    f = fl.read_flo(tmp_path / "h.flo")
    assert f.shape == (1, 1, 2)
    assert tuple(f[0, 0]) == (2.0, -1.0)


def test_flo_writer_matches_hand_layout(tmp_path):
    f = np.array([[[1.5, -2.0], [0.25, 3.0]]], np.float32)  # h=1, w=2
    fl.write_flo(f, tmp_path / "w.flo")
    assert (tmp_path / "w.flo").read_bytes() == hand_flo_bytes(2, 1, [(1.5, -2.0), (0.25, 3.0)])


def test_flo_errors(tmp_path):
    (tmp_path / "m.flo").write_bytes(b"XXXX" + hand_flo_bytes(1, 1, [(0, 0)])[4:])
    with pytest.raises(FormatError):
        fl.read_flo(tmp_path / "m.flo")
    (tmp_path / "t.flo").write_bytes(hand_flo_bytes(2, 2, [(0, 0)]))
    with pytest.raises(FormatError):
        fl.read_flo(tmp_path / "t.flo")
    (tmp_path / "n.flo").write_bytes(hand_flo_bytes(1, 1, [(float("nan"), 0.0)]))
    with pytest.raises(FormatError):
        fl.read_flo(tmp_path / "n.flo")
    with pytest.raises(ValueError):
        fl.write_flo(np.full((1, 1, 2), np.inf, np.float32), tmp_path / "bad.flo")
    with pytest.raises(FileNotFoundError):
        fl.read_flo(tmp_path / "missing.flo")


# ---------------------------------------------------------------- warping

def test_zero_flow_warp_is_identity(rng):
    src = rng.random((7, 9, 3)).astype(np.float32)
    out, valid = fl.backward_warp(src, np.zeros((7, 9, 2), np.float32))
    assert out.tobytes() == src.tobytes()
    assert valid.all()


def test_integer_shift_on_ramp():
    ramp = np.array([[0.0, 1.0, 2.0, 3.0]], np.float32)[:, :, None] / 3
    # samples at x - 1: content moves right, the leftmost column has no source
    out, valid = fl.backward_warp(ramp, np.tile(np.array([-1.0, 0.0], np.float32), (1, 4, 1)))
    np.testing.assert_array_equal(valid[0], [False, True, True, True])
    np.testing.assert_allclose(out[0, 1:, 0], ramp[0, :3, 0])
    assert out[0, 0, 0] == 0
    # the mirrored shift leaves the rightmost column without a source
    out, valid = fl.backward_warp(ramp, np.tile(np.array([1.0, 0.0], np.float32), (1, 4, 1)))
    np.testing.assert_array_equal(valid[0], [True, True, True, False])
    np.testing.assert_allclose(out[0, :3, 0], ramp[0, 1:, 0])


def test_half_pixel_midpoint():
    src = np.array([[0.0, 1.0]], np.float32)[:, :, None]
    out, valid = fl.backward_warp(src, np.tile(np.array([0.5, 0.0], np.float32), (1, 2, 1)))
    assert out[0, 0, 0] == pytest.approx(0.5)
    assert valid[0, 0] and not valid[0, 1]


def test_output_shape_mismatch():
    with pytest.raises(ValueError):
        fl.backward_warp(np.zeros((4, 4, 1)), np.zeros((4, 4, 2)), output_shape=(3, 4))


@given(st.data())
def test_warp_matches_loop_oracle(data):
    h, w = data.draw(st.integers(1, 6)), data.draw(st.integers(1, 6))
    src = data.draw(arrays(np.float32, (h, w, 2), elements=st.floats(0, 1, width=32)))
    flow = data.draw(arrays(np.float32, (h, w, 2), elements=st.floats(-3, 3, width=32)))
    out, valid = fl.backward_warp(src, flow)
    ref, ref_valid = loop_bilinear_warp(src, flow)
    np.testing.assert_array_equal(valid, ref_valid)
    np.testing.assert_allclose(out, ref, atol=1e-6)


@given(st.data())
def test_warp_is_linear_in_source(data):
    h, w = 5, 6
    s1 = data.draw(arrays(np.float32, (h, w, 3), elements=st.floats(0, 1, width=32)))
    s2 = data.draw(arrays(np.float32, (h, w, 3), elements=st.floats(0, 1, width=32)))
    flow = data.draw(arrays(np.float32, (h, w, 2), elements=st.floats(-2, 2, width=32)))
    a, b = data.draw(st.floats(-2, 2)), data.draw(st.floats(-2, 2))
    lhs, v1 = fl.backward_warp(a * s1 + b * s2, flow)
    w1, _ = fl.backward_warp(s1, flow)
    w2, v2 = fl.backward_warp(s2, flow)
    np.testing.assert_array_equal(v1, v2)
    np.testing.assert_allclose(lhs, a * w1 + b * w2, atol=1e-5)


def test_operator_shape_checks():
    op = WarpOperator.from_flow(np.zeros((3, 4, 2)))
    with pytest.raises(ValueError):
        op.apply(np.zeros((4, 3, 1)))


# ---------------------------------------------------------------- occlusion

def test_occlusion_consistent_constant_flow():
    fwd = np.tile(np.array([1.0, 0.0], np.float32), (5, 6, 1))
    mask = fl.occlusion_mask(fwd, -fwd)
    # the last column's forward target leaves the frame
    assert mask[:, :-1].all()
    assert not mask[:, -1].any()


def test_occlusion_inconsistent_flow():
    fwd = np.tile(np.array([2.0, 0.0], np.float32), (4, 8, 1))
    mask = fl.occlusion_mask(fwd, np.zeros_like(fwd))
    assert not mask.any()


def test_occlusion_size_mismatch():
    with pytest.raises(ValueError):
        fl.occlusion_mask(np.zeros((4, 4, 2)), np.zeros((4, 5, 2)))


@given(st.integers(-2, 2), st.integers(-2, 2))
def test_occlusion_all_ones_for_exact_inverse(u, v):
    fwd = np.tile(np.array([u, v], np.float32), (8, 8, 1))
    mask = fl.occlusion_mask(fwd, -fwd)
    yy, xx = np.mgrid[0:8, 0:8]
    inside = (xx + u >= 0) & (xx + u <= 7) & (yy + v >= 0) & (yy + v <= 7)
    np.testing.assert_array_equal(mask, inside)


def test_occlusion_agrees_with_generator_labels():
    clip = translation_pair((2, 1))
    mask = fl.occlusion_mask(clip.flows_fwd[0], clip.flows_bwd[0])
    np.testing.assert_array_equal(mask, clip.occ_fwd[0])


# ---------------------------------------------------------------- estimation

def test_identical_frames_give_no_motion():
    clip = translation_pair((0, 0))
    f = fl.estimate_flow(clip.gray[0], clip.gray[0])
    assert np.hypot(f[..., 0], f[..., 1]).mean() < 0.05


def test_translation_endpoint_error():
    clip = translation_pair((1, 0))
    f = fl.estimate_flow(clip.gray[0], clip.gray[1])
    gt = clip.flows_fwd[0]
    moving = (gt[..., 0] != 0) & clip.occ_fwd[0]
    assert moving.sum() > 100
    assert fl.endpoint_error(f, gt, moving) < 0.5


def test_estimated_flow_aligns_frames():
    clip = translation_pair((1, 0))
    f = fl.estimate_flow(clip.gray[0], clip.gray[1])
    warped, valid = fl.backward_warp(clip.gray[1], f)
    moving = clip.flows_fwd[0][..., 0] != 0
    err_before = np.abs(clip.gray[1] - clip.gray[0])[..., 0]
    err_after = np.abs(warped - clip.gray[0])[..., 0]
    assert err_after[valid].mean() < err_before.mean()
    assert err_after[valid & moving].mean() < 0.25 * err_before[moving].mean()


def test_zero_iterations_give_zero_flow():
    clip = translation_pair((1, 0))
    f = fl.estimate_flow(clip.gray[0], clip.gray[1], FlowConfig(iterations=0))
    assert f.shape == (64, 64, 2) and not f.any()


def test_too_small_for_pyramid():
    with pytest.raises(ValueError):
        fl.estimate_flow(np.zeros((16, 16)), np.zeros((16, 16)))
    fl.estimate_flow(np.zeros((32, 32)), np.zeros((32, 32)))


def test_flow_config_validation():
    for bad in (FlowConfig(levels=0), FlowConfig(iterations=-1), FlowConfig(smoothness=0), FlowConfig(warps=0)):
        with pytest.raises(ValueError):
            bad.validate()
