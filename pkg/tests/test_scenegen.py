"""Scene generator: geometry exactness, determinism, on-disk round trip."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tcdepth import ioutil, scenegen
from tcdepth.ioutil import FormatError
from tcdepth.scenegen import Frame, SceneConfig, generate_sequence, ground_truth_flow


def small_config(**kw):
    base = dict(image_width=96, image_height=32, sequence_length=3, seed=11)
    base.update(kw)
    return SceneConfig(**base)


# --------------------------------------------------------------------------
# config validation

@pytest.mark.parametrize("kw", [
    dict(image_width=100),
    dict(image_height=30),
    dict(num_classes=1),
    dict(num_classes=300),
    dict(sequence_length=1),
    dict(depth_range=(0.0, 50.0)),
    dict(depth_range=(5.0, 5.0)),
])
def test_config_rejects_bad_values(kw):
    with pytest.raises(ValueError):
        small_config(**kw)


# --------------------------------------------------------------------------
# determinism

def test_same_seed_bit_identical():
    a = generate_sequence(small_config())
    b = generate_sequence(small_config())
    for fa, fb in zip(a.frames, b.frames):
        assert np.array_equal(fa.rgb, fb.rgb)
        assert np.array_equal(fa.depth, fb.depth)
        assert np.array_equal(fa.labels, fb.labels)
        if fa.flow_to_next is not None:
            assert np.array_equal(fa.flow_to_next, fb.flow_to_next)


def test_different_seeds_differ():
    firsts = [generate_sequence(small_config(seed=s)).frames[0].rgb for s in range(10)]
    for i in range(len(firsts)):
        for j in range(i + 1, len(firsts)):
            assert not np.array_equal(firsts[i], firsts[j])


# --------------------------------------------------------------------------
# raster invariants

def test_depth_within_range_and_finite():
    cfg = small_config()
    for fr in generate_sequence(cfg).frames:
        assert np.isfinite(fr.depth).all()
        assert (fr.depth >= cfg.depth_range[0]).all()
        assert (fr.depth <= cfg.depth_range[1]).all()
        assert (fr.depth > 0).all()


def test_labels_valid_and_multiclass():
    cfg = small_config(num_objects=8)
    for fr in generate_sequence(cfg).frames:
        assert fr.labels.dtype == np.uint8
        assert fr.labels.max() < cfg.num_classes
        assert len(np.unique(fr.labels)) >= 2


def test_rgb_on_8bit_grid():
    fr = generate_sequence(small_config()).frames[0]
    assert fr.rgb.dtype == np.float32
    assert fr.rgb.min() >= 0.0 and fr.rgb.max() <= 1.0
    scaled = fr.rgb * 255.0
    assert np.allclose(scaled, np.rint(scaled), atol=1e-4)


# --------------------------------------------------------------------------
# flow exactness

def _flat_wall_pair(z=10.0, tx=0.0, tz=0.0, w=64, h=32, focal=32.0):
    """Two views of an infinite fronto-parallel wall at world depth z."""
    pose_a = np.eye(4)
    pose_b = np.eye(4)
    pose_b[0, 3] = tx
    pose_b[2, 3] = tz
    rgb = np.zeros((h, w, 3), dtype=np.float32)
    labels = np.zeros((h, w), dtype=np.uint8)
    da = np.full((h, w), z, dtype=np.float32)
    db = np.full((h, w), z - tz, dtype=np.float32)
    fa = Frame(rgb, da, labels, pose_a, focal, 0)
    fb = Frame(rgb, db, labels, pose_b, focal, 1)
    return fa, fb


def test_flow_matches_pinhole_formula_lateral():
    # oracle: camera shifts +x by tx, image of a wall at depth z shifts by -f*tx/z
    z, tx, focal = 10.0, 0.25, 32.0
    fa, fb = _flat_wall_pair(z=z, tx=tx, focal=focal)
    flow, occ = ground_truth_flow(fa, fb)
    expected_u = -focal * tx / z
    assert np.allclose(flow[..., 0], expected_u, atol=1e-5)
    assert np.allclose(flow[..., 1], 0.0, atol=1e-5)


def test_flow_matches_pinhole_formula_forward():
    # oracle: forward motion tz gives flow_u = (u - cx) * tz / (z - tz), same for v
    z, tz, focal, w, h = 10.0, 0.5, 32.0, 64, 32
    fa, fb = _flat_wall_pair(z=z, tz=tz, w=w, h=h, focal=focal)
    flow, occ = ground_truth_flow(fa, fb)
    u, v = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    assert np.allclose(flow[..., 0], (u - cx) * tz / (z - tz), atol=1e-5)
    assert np.allclose(flow[..., 1], (v - cy) * tz / (z - tz), atol=1e-5)


def test_occlusion_marks_out_of_bounds_exactly():
    z, tx, focal, w, h = 5.0, 1.0, 32.0, 64, 32
    fa, fb = _flat_wall_pair(z=z, tx=tx, focal=focal, w=w, h=h)
    flow, occ = ground_truth_flow(fa, fb)
    u, v = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    ub = u + flow[..., 0]
    vb = v + flow[..., 1]
    expected = (ub < 0) | (ub > w - 1) | (vb < 0) | (vb > h - 1)
    assert np.array_equal(occ, expected)
    assert occ.any()  # the shift is large enough to push a band off-frame


def test_static_camera_zero_flow():
    cfg = small_config(camera_speed=0.0)
    seq = generate_sequence(cfg)
    for fr in seq.frames[:-1]:
        assert np.all(fr.flow_to_next == 0.0)
        assert not fr.occ_to_next.any()


def test_identical_poses_short_circuit():
    fa, fb = _flat_wall_pair(tx=0.0, tz=0.0)
    flow, occ = ground_truth_flow(fa, fb)
    assert np.all(flow == 0.0) and not occ.any()


def test_flow_rejects_non_consecutive():
    fa, fb = _flat_wall_pair()
    fb.time_index = 2
    with pytest.raises(ValueError):
        ground_truth_flow(fa, fb)


def test_flow_reverse_direction_allowed():
    fa, fb = _flat_wall_pair(tx=0.25)
    flow_ba, _ = ground_truth_flow(fb, fa)
    assert np.allclose(flow_ba[..., 0], 32.0 * 0.25 / 10.0, atol=1e-5)


def test_warp_consistency_on_generated_scene():
    # flow must carry frame n's appearance onto frame n+1 wherever visible
    seq = generate_sequence(SceneConfig(
        image_width=96, image_height=64, sequence_length=5, seed=4))
    for fa, fb in zip(seq.frames[:-1], seq.frames[1:]):
        h, w = fa.shape
        u, v = np.meshgrid(np.arange(w), np.arange(h))
        samp = scenegen._bilinear_sample(
            fb.rgb.astype(np.float64),
            u + fa.flow_to_next[..., 0],
            v + fa.flow_to_next[..., 1],
        )
        vis = ~fa.occ_to_next
        assert vis.mean() > 0.5
        mae = np.abs(samp - fa.rgb)[vis].mean()
        assert mae < 0.05, f"warp MAE {mae}"


# --------------------------------------------------------------------------
# on-disk round trip

def test_sequence_round_trip(tmp_path):
    seq = generate_sequence(small_config())
    scenegen.write_sequence(seq, tmp_path / "seq")
    back = scenegen.read_sequence(tmp_path / "seq")
    assert len(back) == len(seq)
    assert back.config.num_classes == seq.config.num_classes
    for fa, fb in zip(seq.frames, back.frames):
        assert np.array_equal(fa.rgb, fb.rgb)
        assert np.array_equal(fa.depth, fb.depth)
        assert np.array_equal(fa.labels, fb.labels)
        assert np.array_equal(fa.pose, fb.pose)
        if fa.flow_to_next is not None:
            assert np.array_equal(fa.flow_to_next, fb.flow_to_next)
            assert np.array_equal(fa.occ_to_next, fb.occ_to_next)
        else:
            assert fb.flow_to_next is None


def test_truncated_depth_file_rejected(tmp_path):
    seq = generate_sequence(small_config())
    scenegen.write_sequence(seq, tmp_path)
    target = tmp_path / "frame_0001.depth.f32"
    target.write_bytes(target.read_bytes()[:20])
    with pytest.raises(FormatError) as err:
        scenegen.read_sequence(tmp_path)
    assert "frame_0001" in str(err.value)


def test_bad_magic_rejected(tmp_path):
    seq = generate_sequence(small_config())
    scenegen.write_sequence(seq, tmp_path)
    target = tmp_path / "frame_0000.depth.f32"
    data = bytearray(target.read_bytes())
    data[:4] = b"JUNK"
    target.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        scenegen.read_sequence(tmp_path)


def test_manifest_bad_class_count_rejected(tmp_path):
    seq = generate_sequence(small_config())
    scenegen.write_sequence(seq, tmp_path)
    manifest = ioutil.read_kv(tmp_path / "manifest.txt")
    manifest["K"] = 0
    ioutil.write_kv(tmp_path / "manifest.txt", manifest)
    with pytest.raises(FormatError):
        scenegen.read_sequence(tmp_path)


def test_manifest_unknown_version_rejected(tmp_path):
    seq = generate_sequence(small_config())
    scenegen.write_sequence(seq, tmp_path)
    manifest = ioutil.read_kv(tmp_path / "manifest.txt")
    manifest["version"] = 99
    ioutil.write_kv(tmp_path / "manifest.txt", manifest)
    with pytest.raises(FormatError):
        scenegen.read_sequence(tmp_path)


def test_manifest_missing_key_rejected(tmp_path):
    seq = generate_sequence(small_config())
    scenegen.write_sequence(seq, tmp_path)
    manifest = ioutil.read_kv(tmp_path / "manifest.txt")
    del manifest["focal_length"]
    ioutil.write_kv(tmp_path / "manifest.txt", manifest)
    with pytest.raises(FormatError):
        scenegen.read_sequence(tmp_path)


def test_sequence_dirs_listing(tmp_path):
    for name in ("b", "a", "c"):
        scenegen.write_sequence(generate_sequence(small_config()), tmp_path / name)
    found = scenegen.sequence_dirs(tmp_path)
    assert [p.name for p in found] == ["a", "b", "c"]
    assert scenegen.sequence_dirs(tmp_path / "a") == [tmp_path / "a"]


# --------------------------------------------------------------------------
# kv format

@settings(deadline=None, max_examples=50)
@given(st.floats(allow_nan=False, allow_infinity=False),
       st.integers(min_value=-10**12, max_value=10**12))
def test_kv_round_trip_exact(tmp_path_factory, x, n):
    path = tmp_path_factory.mktemp("kv") / "f.txt"
    ioutil.write_kv(path, {"x": x, "n": n})
    back = ioutil.read_kv(path)
    assert float(back["x"]) == x
    assert int(back["n"]) == n


def test_kv_malformed_line_rejected(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("version=1\nnot a pair\n")
    with pytest.raises(FormatError):
        ioutil.read_kv(path)
