import filecmp
import json

import numpy as np
import pytest

import uva.renderer
from uva.body_model import BodySpec, Pose, build_default_body, forward_kinematics, pose_mesh
from uva.camera import look_at
from uva.synth_data import (
    Dataset,
    SceneSpec,
    default_cameras,
    default_poses,
    default_texture,
    generate_dataset,
    oracle_render,
    pose_brightness,
)

QUAD_FACES = np.array([[0, 1, 2], [0, 2, 3]])


def frontal_quad(d=2.0, W=32, H=24, fov=40.0):
    cam = look_at([0, 0, d], [0, 0, 0], width=W, height=H, fov_y_deg=fov)
    ax = d * (W / 2) / cam.fx
    ay = d * (H / 2) / cam.fy
    verts = np.array([[-ax, -ay, 0], [ax, -ay, 0], [ax, ay, 0], [-ax, ay, 0]], dtype=float)
    uvs = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    return cam, verts, uvs


def test_quad_reproduces_resampled_texture(rng):
    cam, verts, uvs = frontal_quad()
    # texture at twice the image resolution: bilinear lookup at pixel centres is a 2x2 box average
    tex = rng.random((48, 64, 3))
    image, alpha, _ = oracle_render(verts, QUAD_FACES, uvs, tex, cam)
    expected = tex.reshape(24, 2, 32, 2, 3).mean((1, 3))
    assert np.all(alpha == 1)
    assert np.abs(image - expected).max() < 1 / 255


def test_frontal_plane_depth_is_constant():
    cam, verts, uvs = frontal_quad(d=2.7)
    _, _, depth = oracle_render(verts * 0.5, QUAD_FACES, uvs, np.zeros((64, 64, 3)), cam)
    hit = np.isfinite(depth)
    assert 0 < hit.sum() < hit.size
    assert np.abs(depth[hit] - 2.7).max() < 1e-6


def test_empty_mesh_is_black():
    cam, _, _ = frontal_quad()
    image, alpha, depth = oracle_render(np.zeros((0, 3)), np.zeros((0, 3), int), np.zeros((0, 2)),
                                        np.ones((64, 64, 3)), cam)
    assert np.all(image == 0) and np.all(alpha == 0) and np.all(np.isinf(depth))


def test_alpha_is_triangle_coverage(body):
    sk, m = body
    cam = default_cameras(48)[0]
    image, alpha, depth = oracle_render(m.vertices, m.faces, m.uvs, default_texture(m, 64), cam)
    assert set(np.unique(alpha)) == {0.0, 1.0}
    np.testing.assert_array_equal(alpha == 1, np.isfinite(depth))
    assert np.all(image[alpha == 0] == 0)


def test_nearest_hit_wins():
    cam, verts, uvs = frontal_quad(d=3.0)
    near = verts * 0.5 + [0, 0, 1.0]
    tex_far, tex_near = np.zeros((64, 64, 3)), np.ones((64, 64, 3))
    both = np.concatenate([verts, near])
    faces = np.concatenate([QUAD_FACES, QUAD_FACES + 4])
    # one texture atlas: far quad samples the left (black) half, near quad the right (white) half
    atlas = np.concatenate([tex_far, tex_near], axis=1)
    uv = np.concatenate([uvs * [0.5, 1] * 0.98 + [0.005, 0.01], uvs * [0.5, 1] * 0.98 + [0.505, 0.01]])
    image, _, depth = oracle_render(both, faces, uv, atlas, cam)
    centre = image[12, 16]
    assert np.allclose(centre, 1.0) and depth[12, 16] == pytest.approx(2.0)
    assert np.allclose(image[0, 0], 0.0) and depth[0, 0] == pytest.approx(3.0)


def test_rest_pose_render_equals_unposed_mesh(body):
    sk, m = body
    cam = default_cameras(32)[1]
    tex = default_texture(m, 64)
    posed = pose_mesh(m, forward_kinematics(sk, Pose.rest(sk.bone_count)))
    a = oracle_render(posed, m.faces, m.uvs, tex, cam)
    b = oracle_render(m.vertices, m.faces, m.uvs, tex, cam)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_oracle_independent_of_volume_renderer(body, monkeypatch):
    sk, m = body
    cam = default_cameras(24)[0]
    tex = default_texture(m, 64)
    before = oracle_render(m.vertices, m.faces, m.uvs, tex, cam)

    def sabotage(*a, **k):
        raise AssertionError("volume renderer used by the oracle")

    for name in ("generate_rays", "compute_bounds", "sample_points", "composite", "render_image"):
        monkeypatch.setattr(uva.renderer, name, sabotage)
    after = oracle_render(m.vertices, m.faces, m.uvs, tex, cam)
    for x, y in zip(before, after):
        assert np.array_equal(x, y)


def test_scene_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(texture_size=32)
    with pytest.raises(ValueError):
        SceneSpec(n_poses=0)


def test_default_poses_bounded_and_smooth():
    poses = default_poses(25, 8, seed=3)
    ang = np.array([np.linalg.norm(p.rotations, axis=1) for p in poses])
    assert ang.max() <= np.radians(45) + 1e-12
    steps = np.abs(np.diff(ang, axis=0))
    assert steps.max() < np.radians(25)


def _tree_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    match, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(_tree_equal(a / d, b / d) for d in cmp.common_dirs)


def test_generation_is_byte_identical(tmp_path):
    spec = SceneSpec(resolution=16, n_poses=3, texture_size=64, seed=11)
    generate_dataset(spec, tmp_path / "a")
    generate_dataset(spec, tmp_path / "b")
    assert _tree_equal(tmp_path / "a", tmp_path / "b")
    generate_dataset(SceneSpec(resolution=16, n_poses=3, texture_size=64, seed=12), tmp_path / "c")
    assert not _tree_equal(tmp_path / "a", tmp_path / "c")


def test_default_split_counts(tmp_path):
    # counting does not depend on resolution; 16 px keeps the 125 renders fast
    ds = generate_dataset(SceneSpec(resolution=16, texture_size=64), tmp_path / "d")
    train, nv, npose = ds.split("train"), ds.split("test_novel_view"), ds.split("test_novel_pose")
    assert len(train) + len(nv) + len(npose) == 125
    assert len(npose) == 20 and len(nv) == 25 and len(train) == 80
    assert not (set(train) & set(nv) or set(train) & set(npose) or set(nv) & set(npose))
    for fid in train[:3] + nv[:3] + npose[:3]:
        d = tmp_path / "d" / "frames" / fid
        for name in ("image.png", "alpha.png", "camera.json", "pose.json"):
            assert (d / name).is_file()
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["version"] == 1 and not (tmp_path / "d" / "manifest.json.tmp").exists()
    f = ds.frame(npose[0])
    assert f.image.shape == (16, 16, 3) and f.alpha.shape == (16, 16)
    with pytest.raises(FileNotFoundError):
        ds.frame("p999_c00")


def test_shaded_variant_scales_by_pose_brightness(tmp_path):
    poses = default_poses(2, 8, seed=0)
    plain = generate_dataset(SceneSpec(resolution=24, n_poses=2, texture_size=64), tmp_path / "p", poses=poses)
    shaded = generate_dataset(SceneSpec(resolution=24, n_poses=2, texture_size=64, shaded=True), tmp_path / "s",
                              poses=poses)
    w = np.asarray(shaded.manifest["brightness_weights"])
    fid = plain.split("train")[0]
    gain = pose_brightness(plain.frame(fid).pose, w)
    assert 0.8 <= gain <= 1.2
    expected = np.clip(plain.frame(fid).image * gain, 0, 1)
    # both images pass through 8-bit quantization
    assert np.abs(shaded.frame(fid).image - expected).max() <= 1.5 / 255


def test_dataset_round_trip(tmp_path):
    spec = SceneSpec(body=BodySpec(), resolution=16, n_poses=2, texture_size=64)
    generate_dataset(spec, tmp_path / "r")
    ds = Dataset.load(tmp_path / "r")
    sk, m = build_default_body()
    assert ds.mesh.topology_hash() == m.topology_hash()
    np.testing.assert_allclose(ds.mesh.vertices, m.vertices, atol=1e-9)
    (tmp_path / "r" / "manifest.json").write_text(json.dumps({"version": 99}))
    with pytest.raises(ValueError):
        Dataset.load(tmp_path / "r")
