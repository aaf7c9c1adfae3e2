import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pcmesh import tensor as T
from pcmesh.backbone import GLOBAL_DIM
from pcmesh.body import BodyParams, lbs_forward, make_toy_model, posed_mesh, rodrigues
from pcmesh.regressors import NUM_GLOBAL, GlobalHead, LocalHead, normalized_adjacency, project_rotation, project_rotations


def t64(x):
    return T.Tensor(np.asarray(x, float), dtype=np.float64)


@pytest.fixture(scope="module")
def head():
    return GlobalHead(np.random.default_rng(0)).astype(np.float64)


@given(st.integers(0, 2**32), st.integers(1, 20))
def test_attention_weights_on_simplex(seed, k):
    h = GlobalHead(np.random.default_rng(0)).astype(np.float64)
    rng = np.random.default_rng(seed)
    w, _ = h.attention(t64(rng.normal(size=(1, GLOBAL_DIM))), t64(rng.normal(size=(k, GLOBAL_DIM))))
    assert w.shape == (1, k)
    assert np.all(w.data >= 0)
    np.testing.assert_allclose(w.data.sum(), 1.0, atol=1e-6)


def test_single_joint_attention_returns_its_value(head):
    rng = np.random.default_rng(1)
    q = t64(rng.normal(size=(1, GLOBAL_DIM)))
    w, g = head.attention(t64(rng.normal(size=(1, GLOBAL_DIM))), q)
    np.testing.assert_allclose(w.data, [[1.0]])
    np.testing.assert_allclose(g.data, head.value(q).data, atol=1e-12)


def test_output_length_and_identity_init(head):
    rng = np.random.default_rng(2)
    betas, root = head(t64(rng.normal(size=(1, GLOBAL_DIM))), t64(rng.normal(size=(16, GLOBAL_DIM))))
    assert betas.shape[0] + root.data.size == NUM_GLOBAL
    assert np.abs(root.data - np.eye(3)).max() < 0.5


def test_edge_difference_vanishes_when_attention_equals_a_joint():
    h = GlobalHead(np.random.default_rng(3)).astype(np.float64)
    h.value.weight.data[:] = np.eye(GLOBAL_DIM)
    h.value.bias.data[:] = 0
    q = t64(np.random.default_rng(4).normal(size=(1, GLOBAL_DIM)))
    _, g_att = h.attention(t64(np.ones((1, GLOBAL_DIM))), q)
    np.testing.assert_allclose(g_att.data, q.data)
    # so the edge layer only sees [q, 0]
    betas, root = h(t64(np.ones((1, GLOBAL_DIM))), q)
    edges = np.maximum(np.concatenate([q.data, np.zeros_like(q.data)], 1) @ h.edge.weight.data + h.edge.bias.data, 0)
    phi = edges @ h.out.weight.data + h.out.bias.data
    np.testing.assert_allclose(betas.data, phi[0, :10], atol=1e-12)
    np.testing.assert_allclose(root.data.reshape(9), phi[0, 10:], atol=1e-12)


@given(st.integers(0, 2**32))
def test_global_head_permutation_invariant(seed):
    h = GlobalHead(np.random.default_rng(0)).astype(np.float64)
    rng = np.random.default_rng(seed)
    g, q = rng.normal(size=(1, GLOBAL_DIM)), rng.normal(size=(9, GLOBAL_DIM))
    perm = rng.permutation(9)
    a = h(t64(g), t64(q))
    b = h(t64(g), t64(q[perm]))
    np.testing.assert_allclose(a[0].data, b[0].data, atol=1e-10)
    np.testing.assert_allclose(a[1].data, b[1].data, atol=1e-10)


def test_two_joint_adjacency():
    A = normalized_adjacency(np.array([-1, 0]))
    np.testing.assert_allclose(A, [[0.5, 0.5], [0.5, 0.5]])
    body = make_toy_model(16, 400)
    A = normalized_adjacency(body.parents)
    np.testing.assert_allclose(A, A.T)
    assert np.all(np.linalg.eigvalsh(A) <= 1 + 1e-12)


def test_local_head_shapes_and_equal_rows():
    head = LocalHead(np.array([-1, 0]), np.random.default_rng(5)).astype(np.float64)
    pos = t64(np.ones((2, 3)))
    feat = t64(np.ones((2, GLOBAL_DIM)))
    h = np.concatenate([pos.data, feat.data], axis=1)
    out = head(pos, feat)
    assert out.shape == (1, 3, 3)
    A = head.adjacency
    h1 = np.maximum(A @ (h @ head.gc1.weight.data) + head.gc1.bias.data, 0)
    np.testing.assert_allclose(h1[0], h1[1])


def test_local_head_zero_weights_give_bias():
    body = make_toy_model(8, 100)
    head = LocalHead(body.parents, np.random.default_rng(6)).astype(np.float64)
    head.out.weight.data[:] = 0
    rng = np.random.default_rng(7)
    out = head(t64(rng.normal(size=(8, 3))), t64(rng.normal(size=(8, GLOBAL_DIM))))
    assert out.shape == (7, 3, 3)
    np.testing.assert_allclose(out.data, np.broadcast_to(np.eye(3), (7, 3, 3)), atol=1e-12)


def random_rotation(rng):
    v = rng.normal(size=3)
    return rodrigues(v / np.linalg.norm(v) * rng.uniform(0, np.pi))


def test_project_rotation_examples():
    rng = np.random.default_rng(8)
    R = random_rotation(rng)
    out, ok = project_rotation(R)
    assert ok
    np.testing.assert_allclose(out, R, atol=1e-6)
    np.testing.assert_allclose(project_rotation(2 * np.eye(3))[0], np.eye(3), atol=1e-12)


def test_project_rotation_rank_deficient():
    out, ok = project_rotation(np.zeros((3, 3)))
    assert not ok
    np.testing.assert_array_equal(out, np.eye(3))
    out, ok = project_rotation(np.outer([1, 2, 3], [0, 1, 0]))
    assert not ok
    with pytest.raises(ValueError):
        project_rotation(np.full((3, 3), np.nan))


@given(st.integers(0, 2**32))
def test_project_rotation_is_closest(seed):
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(3, 3))
    R, ok = project_rotation(raw)
    assert ok
    assert np.linalg.norm(R @ R.T - np.eye(3)) < 1e-6
    assert abs(np.linalg.det(R) - 1) < 1e-6
    best = np.linalg.norm(raw - R)
    for _ in range(50):
        cand = rodrigues(rng.normal(scale=0.05, size=3)) @ R
        assert np.linalg.norm(raw - cand) >= best - 1e-9


def test_projected_outputs_pass_the_rotation_invariant():
    body = make_toy_model(8, 120)
    rng = np.random.default_rng(9)
    rots, ok = project_rotations(np.eye(3) + rng.normal(scale=0.3, size=(8, 3, 3)))
    assert ok.all()
    params = BodyParams(np.zeros(10), rots[0], rots[1:], np.zeros(3))
    v, _ = posed_mesh(body, params)
    assert np.all(np.isfinite(v))


def test_regressor_gradients_through_skinning():
    from pcmesh.gradcheck import numeric_grad, rel_err
    from pcmesh.losses import orth_loss, vertex_loss

    body = make_toy_model(4, 60)
    rng = np.random.default_rng(10)
    gh = GlobalHead(rng, dim=GLOBAL_DIM).astype(np.float64)
    lh = LocalHead(body.parents, rng).astype(np.float64)
    g, q = t64(rng.normal(size=(1, GLOBAL_DIM))), t64(rng.normal(size=(4, GLOBAL_DIM)))
    pos = t64(rng.normal(size=(4, 3)))
    gt = posed_mesh(body, BodyParams.identity(4))[0] + 0.05
    leaves = {"g.out.w": gh.out.weight, "g.edge.b": gh.edge.bias, "l.gc1.w": lh.gc1.weight, "l.out.b": lh.out.bias}

    def loss():
        betas, root = gh(g, q)
        local = lh(pos, q)
        v, _ = lbs_forward(body, betas, root, local)
        rots = T.concat([T.reshape(root, (1, 3, 3)), local], axis=0)
        return T.add(vertex_loss(v, gt), orth_loss(rots))

    grads = T.grad(loss(), leaves)
    for name, p in leaves.items():
        flat = p.data.reshape(-1)
        for j in rng.choice(flat.size, size=min(flat.size, 24), replace=False):
            view = flat[j:j + 1]
            num = numeric_grad(lambda: float(loss().data), view)
            assert rel_err(grads[name].reshape(-1)[j], num[0]) < 1e-3, name
