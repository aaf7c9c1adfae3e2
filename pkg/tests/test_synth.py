from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pcmesh.body import BodyParams, make_toy_model, posed_mesh
from pcmesh.synth import (
    Camera,
    EmptySampleError,
    GenerateConfig,
    add_noise,
    annotate_gt,
    derive_sample,
    generate_dataset,
    load_shard,
    make_sample,
    occlude_parts,
    render_partial,
    renoise,
    resample_sample,
    sample_fixed,
    sample_indices,
    save_shard,
)


def front_camera(distance=3.0, w=80, h=60):
    return Camera(position=np.array([0.0, 0.0, distance]), target=np.zeros(3), width=w, height=h, focal=60.0)


def square(z, half=0.5):
    verts = np.array([[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]])
    return verts, np.array([[0, 1, 2], [0, 2, 3]])


def test_single_triangle_points_lie_on_its_plane():
    verts = np.array([[-0.6, -0.4, 0.2], [0.7, -0.3, -0.1], [0.0, 0.5, 0.05]])
    pts, face = render_partial(verts, np.array([[0, 1, 2]]), front_camera())
    assert len(pts) > 50 and np.all(face == 0)
    normal = np.cross(verts[1] - verts[0], verts[2] - verts[0])
    normal /= np.linalg.norm(normal)
    np.testing.assert_allclose((pts - verts[0]) @ normal, 0.0, atol=1e-4)


def test_occluded_surface_is_absent():
    fv, ff = square(0.5, half=0.8)
    bv, bf = square(-0.5, half=0.3)
    verts = np.vstack([fv, bv])
    faces = np.vstack([ff, bf + 4])
    pts, face = render_partial(verts, faces, front_camera())
    assert np.all(face < 2)
    np.testing.assert_allclose(pts[:, 2], 0.5, atol=1e-9)
    # without the occluder the back square is visible
    pts_back, _ = render_partial(bv, bf, front_camera())
    assert len(pts_back) > 0


def test_toy_torso_hides_far_limbs():
    body = make_toy_model(16, 400)
    verts, _ = posed_mesh(body, BodyParams.identity(16))
    cam = Camera(position=np.array([4.0, 1.0, 0.0]), target=np.array([0.0, 1.0, 0.0]), width=160, height=120, focal=150)
    pts, face = render_partial(verts, body.faces, cam)
    labels = body.vertex_part_labels[body.faces[face, 0]]
    right_side = [int(i) for i, n in enumerate(body.joint_names) if n.startswith("r_")]
    left_side = [int(i) for i, n in enumerate(body.joint_names) if n.startswith("l_")]
    near, far = (left_side, right_side) if body.template_vertices[body.vertex_part_labels == left_side[0], 0].mean() > 0 else (right_side, left_side)
    assert np.isin(labels, near).sum() > 3 * np.isin(labels, far).sum()


@given(st.integers(8, 64), st.integers(8, 64))
def test_point_count_bounded_by_pixels(w, h):
    verts, faces = square(0.0, half=5.0)
    pts, _ = render_partial(verts, faces, front_camera(w=w, h=h))
    assert 0 < len(pts) <= w * h


def test_invisible_mesh_raises():
    verts, faces = square(5.0)  # behind the camera
    with pytest.raises(EmptySampleError):
        render_partial(verts, faces, front_camera())


def test_annotation_matches_brute_force(toy_body, rng):
    verts, joints = posed_mesh(toy_body, BodyParams.identity(16))
    pts = rng.uniform(verts.min(0), verts.max(0), size=(300, 3))
    labels, offsets = annotate_gt(pts, toy_body, verts, joints)
    d = ((pts[:, None, :] - verts[None, :, :]) ** 2).sum(-1)
    expected = toy_body.vertex_part_labels[np.argmin(d, axis=1)]
    np.testing.assert_array_equal(labels, expected)
    np.testing.assert_allclose(pts + offsets, joints[labels], atol=1e-12)


def test_annotation_at_vertices_and_joints(toy_body):
    verts, joints = posed_mesh(toy_body, BodyParams.identity(16))
    labels, _ = annotate_gt(verts[::7], toy_body, verts, joints)
    np.testing.assert_array_equal(labels, toy_body.vertex_part_labels[::7])
    labels, offsets = annotate_gt(joints, toy_body, verts, joints)
    match = labels == np.arange(16)
    assert match.any()
    np.testing.assert_array_equal(offsets[match], 0.0)


def test_labels_agree_with_source_triangle_on_two_part_body():
    body = make_toy_model(2, 160)
    verts, joints = posed_mesh(body, BodyParams.identity(2))
    cam = Camera(position=np.array([0.0, 0.9, 3.0]), target=np.array([0.0, 0.9, 0.0]), width=120, height=90, focal=110)
    pts, face = render_partial(verts, body.faces, cam)
    labels, _ = annotate_gt(pts, body, verts, joints)
    face_parts = body.vertex_part_labels[body.faces[face]]
    pure = (face_parts == face_parts[:, :1]).all(axis=1)
    assert pure.mean() > 0.8
    np.testing.assert_array_equal(labels[pure], face_parts[pure, 0])


def test_add_noise_statistics():
    pts = np.zeros((100_000, 3))
    np.testing.assert_array_equal(add_noise(pts, 0.0, 1), pts)
    noisy = add_noise(pts, 0.01, 1)
    np.testing.assert_allclose(noisy.std(axis=0), 0.01, rtol=0.05)
    # same seed: the same directions at every sigma
    np.testing.assert_allclose(add_noise(pts, 0.03, 1), 3 * noisy, rtol=1e-12)
    with pytest.raises(ValueError):
        add_noise(pts, -1.0, 0)


@given(st.integers(1, 300), st.integers(1, 300), st.integers(0, 2**32))
def test_sample_indices(count, n, seed):
    idx = sample_indices(count, n, seed)
    assert len(idx) == n and idx.min() >= 0 and idx.max() < count
    np.testing.assert_array_equal(idx, sample_indices(count, n, seed))
    if count >= n:
        assert len(np.unique(idx)) == n
        np.testing.assert_array_equal(sample_indices(count, max(1, n // 2), seed), idx[: max(1, n // 2)])
    else:
        assert set(idx.tolist()) == set(range(count))


def test_sample_fixed_exact_size_is_permutation(rng):
    pts = rng.normal(size=(50, 3))
    lab = np.arange(50)
    out, out_lab = sample_fixed(pts, 50, 7, lab)
    assert sorted(out_lab.tolist()) == list(range(50))
    np.testing.assert_array_equal(out, pts[out_lab])
    with pytest.raises(ValueError):
        sample_indices(0, 5, 0)


def check_sample(body, s):
    K = body.num_joints
    assert s.points.shape == (s.num_points, 3)
    assert np.all((s.gt_part_labels >= 0) & (s.gt_part_labels < K))
    assert np.all(np.isfinite(s.gt_offsets))
    np.testing.assert_allclose(s.points.mean(axis=0), 0.0, atol=1e-5)
    # every sampled point traces back to its rendered pixel
    np.testing.assert_array_equal(s.gt_part_labels, s.raw_labels[s.raw_index])
    np.testing.assert_allclose(s.gt_offsets, s.raw_offsets[s.raw_index], atol=1e-12)
    if s.noise_sigma == 0:
        np.testing.assert_allclose(s.points + s.centroid, s.raw_points[s.raw_index], atol=1e-9)
    # pre-noise every rendered point plus its offset lands on its part's joint
    frame_joints = s.gt_joints + s.centroid
    np.testing.assert_allclose(s.raw_points + s.raw_offsets, frame_joints[s.raw_labels], atol=1e-12)
    # the stored parameters re-pose exactly onto the stored mesh and joints
    v, j = posed_mesh(body, s.gt_params)
    np.testing.assert_allclose(v, s.gt_vertices, atol=1e-9)
    np.testing.assert_allclose(j, s.gt_joints, atol=1e-9)


def test_generated_samples_are_consistent(toy_body, toy_samples):
    for s in toy_samples:
        check_sample(toy_body, s)
        assert s.num_points == 256 and s.noise_sigma == 0.005


def test_view_frame_matches_camera(toy_body):
    rng = np.random.default_rng(5)
    from pcmesh.synth import sample_params

    params = sample_params(toy_body, rng)
    params = replace(params, translation=np.array([0.2, -0.1, 0.4]))
    world_v, _ = posed_mesh(toy_body, params)
    cam = Camera(position=world_v.mean(0) + [2.0, 0.5, 2.0], target=world_v.mean(0))
    s = make_sample(toy_body, params, cam, n=300, sigma=0.0, seed=1)
    np.testing.assert_allclose(s.gt_vertices + s.centroid, cam.to_view(world_v), atol=1e-9)
    check_sample(toy_body, s)
    # the view frame looks down -z: the visible surface is the half nearest +z
    assert np.mean(s.points[:, 2]) > np.mean(s.gt_vertices[:, 2])


def test_derive_sample_keeps_ground_truth(toy_body, toy_samples):
    s = toy_samples[0]
    d = derive_sample(s, 100, 0.02, [0, 1])
    check_sample(toy_body, d)
    assert d.num_points == 100 and d.noise_sigma == 0.02
    np.testing.assert_allclose(d.gt_vertices + d.centroid, s.gt_vertices + s.centroid, atol=1e-12)


@pytest.mark.parametrize("n", [100, 256, 400])
def test_resample_sample_subsamples_or_pads_and_recenters(toy_body, toy_samples, n):
    s = replace(toy_samples[0], noise_sigma=0.0)
    s = derive_sample(s, 256, 0.0, [0, 2])
    r = resample_sample(s, n, [1])
    check_sample(toy_body, r)
    assert r.num_points == n
    # same view-frame geometry, and every point still carries its own label and offset
    world = {tuple(np.round(p, 9)): (l, tuple(np.round(o, 9))) for p, l, o in zip(s.points + s.centroid, s.gt_part_labels, s.gt_offsets)}
    for p, l, o in zip(r.points + r.centroid, r.gt_part_labels, r.gt_offsets):
        assert world[tuple(np.round(p, 9))] == (l, tuple(np.round(o, 9)))
    if n >= s.num_points:
        assert len({tuple(np.round(p, 9)) for p in r.points + r.centroid}) == s.num_points


def test_renoise_keeps_the_points_and_scales_one_noise_draw(toy_body, toy_samples):
    s = toy_samples[0]
    clean = renoise(s, 0.0, [5])
    check_sample(toy_body, clean)
    np.testing.assert_array_equal(clean.raw_index, s.raw_index)
    base = s.raw_points[s.raw_index]
    a = renoise(s, 0.01, [5])
    b = renoise(s, 0.03, [5])
    check_sample(toy_body, a)
    assert a.noise_sigma == 0.01
    np.testing.assert_allclose(b.points + b.centroid - base, 3 * (a.points + a.centroid - base), atol=1e-12)


def test_occlude_parts_drops_exactly_those_points(toy_body, toy_samples):
    s = toy_samples[0]
    parts = [6, 10, 14]
    o = occlude_parts(s, parts)
    check_sample(toy_body, o)
    assert not np.isin(o.gt_part_labels, parts).any()
    assert o.num_points == int(np.sum(~np.isin(s.gt_part_labels, parts)))
    np.testing.assert_allclose(o.points + o.centroid, (s.points + s.centroid)[~np.isin(s.gt_part_labels, parts)])
    np.testing.assert_allclose(o.gt_joints + o.centroid, s.gt_joints + s.centroid, atol=1e-12)
    with pytest.raises(EmptySampleError):
        occlude_parts(s, range(toy_body.num_joints))


def test_generation_is_deterministic_and_worker_independent(toy_body):
    cfg = GenerateConfig(num_samples=3, points=64, cameras=2, seed=11)
    a = generate_dataset(toy_body, cfg)
    b = generate_dataset(toy_body, cfg, workers=2)
    assert len(a) == 3
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.points, y.points)
        np.testing.assert_array_equal(x.gt_vertices, y.gt_vertices)


def test_shard_roundtrip(tmp_path, toy_body, toy_samples):
    path = tmp_path / "d.vhmr"
    save_shard(path, toy_samples)
    back = load_shard(path)
    assert len(back) == len(toy_samples)
    for a, b in zip(toy_samples, back):
        for name in ("points", "gt_part_labels", "gt_offsets", "gt_joints", "gt_vertices", "raw_points"):
            np.testing.assert_allclose(getattr(b, name), getattr(a, name), atol=1e-6)
        np.testing.assert_allclose(b.gt_params.rotations(), a.gt_params.rotations(), atol=1e-6)
        np.testing.assert_allclose(b.camera.as_vector(), a.camera.as_vector(), atol=1e-5)
    with pytest.raises(ValueError):
        save_shard(tmp_path / "e.vhmr", [])
