import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pcmesh import tensor as T
from pcmesh.body import rodrigues
from pcmesh.losses import (
    LossWeights,
    chamfer_distance,
    chamfer_loss,
    format_metrics,
    mesh_metrics,
    orth_loss,
    param_reg_loss,
    parse_metrics,
    seg_loss,
    skeleton_loss,
    smpl_loss,
    vertex_loss,
    vote_reg_loss,
)


def t64(x):
    return T.Tensor(np.asarray(x, float), dtype=np.float64)


def random_rotation(rng):
    v = rng.normal(size=3)
    return rodrigues(v / np.linalg.norm(v) * rng.uniform(0, np.pi))


def test_seg_loss_examples():
    labels = np.array([0, 2, 1])
    assert float(seg_loss(t64(np.eye(3)[labels]), labels).data) == 0.0
    # averaged over points, so uniform scores cost log K per point on average
    np.testing.assert_allclose(float(seg_loss(t64(np.full((3, 4), 0.25)), labels).data), np.log(4))
    with pytest.raises(ValueError):
        seg_loss(t64(np.full((3, 4), 0.25)), np.array([0, 4, 1]))


@given(st.integers(0, 2**32))
def test_seg_loss_matches_loop(seed):
    rng = np.random.default_rng(seed)
    s = rng.dirichlet(np.ones(5), size=20)
    labels = rng.integers(0, 5, 20)
    expected = -sum(np.log(s[i, labels[i]]) for i in range(20)) / 20
    np.testing.assert_allclose(float(seg_loss(t64(s), labels).data), expected, rtol=1e-12)


def test_vote_reg_examples():
    o = np.random.default_rng(0).normal(size=(5, 3))
    assert float(vote_reg_loss(t64(o), o).data) == 0.0
    assert float(vote_reg_loss(t64([[0.5, 0, 0]]), np.zeros((1, 3))).data) == pytest.approx(0.125)
    assert float(vote_reg_loss(t64([[2.0, 0, 0]]), np.zeros((1, 3))).data) == pytest.approx(1.5)


def test_param_reg_examples():
    rng = np.random.default_rng(1)
    rots = np.stack([random_rotation(rng) for _ in range(4)])
    betas = rng.normal(size=10)
    total, parts = param_reg_loss(t64(betas), t64(rots), betas, rots, LossWeights())
    assert float(parts["smpl"].data) == 0.0
    assert float(parts["orth"].data) < 1e-12
    assert float(orth_loss(t64(2 * np.eye(3)[None])).data) == pytest.approx(3 * np.sqrt(3))
    # dataset mode without parameter ground truth
    _, parts = param_reg_loss(t64(betas), t64(rots), betas + 1, rots, LossWeights(smpl=0.0))
    assert "smpl" not in parts
    assert float(smpl_loss(t64(betas), t64(rots), betas + 1, rots).data) == pytest.approx(10.0)


def test_model_fit_zero_case():
    rng = np.random.default_rng(2)
    verts = rng.normal(size=(50, 3))
    pts = verts[rng.integers(0, 50, 30)]
    assert float(vertex_loss(t64(verts), verts).data) == 0.0
    assert float(chamfer_loss(pts, t64(verts)).data) == 0.0
    joints = rng.normal(size=(6, 3))
    assert float(skeleton_loss(t64(joints), joints).data) == 0.0


def test_translated_mesh():
    rng = np.random.default_rng(3)
    verts = rng.normal(size=(40, 3))
    shift = np.array([0.003, 0.004, 0.0])
    np.testing.assert_allclose(float(vertex_loss(t64(verts + shift), verts).data), 0.007)
    joints = verts[:5]
    np.testing.assert_allclose(float(skeleton_loss(t64(joints + shift), joints).data), 0.007)
    assert float(chamfer_loss(verts, t64(verts + shift)).data) >= 0.0
    mask = np.array([1, 0, 0, 0, 0], bool)
    np.testing.assert_allclose(float(skeleton_loss(t64(joints + shift), joints, mask).data), 0.007 / 5)


@pytest.mark.parametrize("seed", range(100))
def test_chamfer_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(int(rng.integers(1, 257)), 3))
    verts = rng.normal(size=(int(rng.integers(1, 120)), 3))
    expected = np.mean([min(np.linalg.norm(p - v) for v in verts) for p in pts])
    np.testing.assert_allclose(float(chamfer_loss(pts, t64(verts)).data), expected, atol=1e-6)
    np.testing.assert_allclose(chamfer_distance(pts, verts), expected, atol=1e-6)


@given(st.integers(0, 2**32))
def test_chamfer_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    pts, verts = rng.normal(size=(30, 3)), rng.normal(size=(20, 3))
    a = float(chamfer_loss(pts, t64(verts)).data)
    b = float(chamfer_loss(pts[rng.permutation(30)], t64(verts)).data)
    np.testing.assert_allclose(a, b, rtol=1e-12)


@given(st.integers(0, 2**32))
def test_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    assert float(seg_loss(t64(rng.dirichlet(np.ones(4), 10)), rng.integers(0, 4, 10)).data) >= 0
    assert float(vote_reg_loss(t64(rng.normal(size=(10, 3))), rng.normal(size=(10, 3))).data) >= 0
    assert float(orth_loss(t64(rng.normal(size=(3, 3, 3)))).data) >= 0
    assert float(vertex_loss(t64(rng.normal(size=(10, 3))), rng.normal(size=(10, 3))).data) >= 0


def test_metrics_examples():
    rng = np.random.default_rng(4)
    v, j = rng.normal(size=(30, 3)), rng.normal(size=(5, 3))
    m = mesh_metrics(v, v, j, j, points=v)
    assert m == {"PVE": 0.0, "PVE_max": 0.0, "MPJPE": 0.0, "CD": 0.0}
    shift = np.array([0.003, 0.004, 0.0])
    m = mesh_metrics(v + shift, v, j + shift, j)
    assert m["PVE"] == pytest.approx(5.0) and m["PVE_max"] == pytest.approx(5.0)
    assert m["MPJPE"] == pytest.approx(5.0) and "CD" not in m


@given(st.integers(0, 2**32))
def test_metrics_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    v, gv = rng.normal(size=(30, 3)), rng.normal(size=(30, 3))
    j, gj = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    R, t = random_rotation(rng), rng.normal(size=3)
    a = mesh_metrics(v, gv, j, gj)
    b = mesh_metrics(v @ R.T + t, gv @ R.T + t, j @ R.T + t, gj @ R.T + t)
    for k in a:
        np.testing.assert_allclose(a[k], b[k], rtol=1e-9)


def test_metric_lines_roundtrip():
    line = format_metrics({"PVE": 1.23456, "n": 3}, sweep="noise", value=10)
    assert line == "sweep=noise value=10 PVE=1.2346 n=3"
    assert parse_metrics(line)["PVE"] == "1.2346"


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(seg=-1.0)
