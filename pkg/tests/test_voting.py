import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pcmesh import tensor as T
from pcmesh.backbone import FEATURE_DIM, GLOBAL_DIM, PointFeatures
from pcmesh.gradcheck import numeric_grad, rel_err
from pcmesh.losses import seg_loss, skeleton_loss
from pcmesh.voting import JointCompletion, JointSet, VoteSet, VotingModule, cluster_votes


def vote_set(scores, offsets, features=None):
    n = len(scores)
    features = np.zeros((n, 4)) if features is None else features
    return VoteSet(T.Tensor(np.asarray(scores, float), dtype=np.float64),
                   T.Tensor(np.asarray(offsets, float), dtype=np.float64),
                   T.Tensor(np.asarray(features, float), dtype=np.float64))


def reference_cluster(points, scores, offsets, feats, threshold):
    K = scores.shape[1]
    pos, fea, vis = np.zeros((K, 3)), np.zeros((K, feats.shape[1])), np.zeros(K, bool)
    for k in range(K):
        wsum = sum(scores[i, k] for i in range(len(points)))
        vis[k] = max(scores[:, k]) >= threshold and wsum > 0
        if vis[k]:
            pos[k] = sum(scores[i, k] * (points[i] + offsets[i]) for i in range(len(points))) / wsum
            fea[k] = sum(scores[i, k] * feats[i] for i in range(len(points))) / wsum
    return pos, fea, vis


def random_votes(rng, n, k, f=5):
    logits = rng.normal(scale=2.0, size=(n, k))
    s = np.exp(logits)
    s /= s.sum(1, keepdims=True)
    return rng.normal(size=(n, 3)), s, rng.normal(scale=0.1, size=(n, 3)), rng.normal(size=(n, f))


def test_single_point_cluster():
    js = cluster_votes(np.array([[1.0, 2.0, 3.0]]), vote_set([[1.0, 0.0]], [[0.5, 0, -1]]))
    np.testing.assert_allclose(js.positions.data[0], [1.5, 2.0, 2.0])
    assert js.visible.tolist() == [True, False]
    np.testing.assert_array_equal(js.positions.data[1], 0.0)


def test_weighted_mean_example():
    pts = np.array([[0.0, 0, 0], [2.0, 0, 0]])
    js = cluster_votes(pts, vote_set([[0.75], [0.25]], [[1.0, 0, 0], [0, 0, 0]]))
    np.testing.assert_allclose(js.positions.data[0], [1.25, 0, 0], atol=1e-12)


def test_low_confidence_joint_is_invisible():
    js = cluster_votes(np.zeros((4, 3)), vote_set(np.full((4, 20), 0.05), np.zeros((4, 3))))
    assert not js.visible.any()
    np.testing.assert_array_equal(js.positions.data, 0.0)
    np.testing.assert_array_equal(js.features.data, 0.0)


@pytest.mark.parametrize("seed", range(100))
def test_cluster_matches_reference(seed):
    rng = np.random.default_rng(seed)
    n, k = int(rng.integers(1, 257)), int(rng.integers(1, 17))
    pts, s, o, f = random_votes(rng, n, k)
    js = cluster_votes(pts, vote_set(s, o, f), threshold=0.3)
    pos, fea, vis = reference_cluster(pts, s, o, f, 0.3)
    np.testing.assert_array_equal(js.visible, vis)
    np.testing.assert_allclose(js.positions.data, pos, atol=1e-6)
    np.testing.assert_allclose(js.features.data, fea, atol=1e-6)


@given(st.integers(0, 2**32))
def test_cluster_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    pts, s, o, f = random_votes(rng, 40, 6)
    perm = rng.permutation(40)
    a = cluster_votes(pts, vote_set(s, o, f))
    b = cluster_votes(pts[perm], vote_set(s[perm], o[perm], f[perm]))
    np.testing.assert_allclose(a.positions.data, b.positions.data, atol=1e-6)
    np.testing.assert_allclose(a.features.data, b.features.data, atol=1e-6)
    np.testing.assert_array_equal(a.visible, b.visible)


@given(st.integers(0, 2**32), st.floats(0.1, 10.0))
def test_cluster_scale_consistency(seed, alpha):
    rng = np.random.default_rng(seed)
    pts, s, o, f = random_votes(rng, 30, 5)
    a = cluster_votes(pts, vote_set(s, o, f))
    b = cluster_votes(alpha * pts, vote_set(s, alpha * o, f))
    np.testing.assert_allclose(b.positions.data, alpha * a.positions.data, atol=1e-9 * alpha)
    np.testing.assert_allclose(b.features.data, a.features.data, atol=1e-12)


@given(st.integers(0, 2**32))
def test_visibility_monotone_in_scores(seed):
    rng = np.random.default_rng(seed)
    pts, s, o, f = random_votes(rng, 20, 8)
    before = cluster_votes(pts, vote_set(s, o, f)).visible
    s2 = s.copy()
    i, k = int(rng.integers(20)), int(rng.integers(8))
    s2[i, k] += rng.uniform(0, 1)
    after = cluster_votes(pts, vote_set(s2, o, f)).visible
    assert np.all(after[before])


def test_perfect_votes_recover_gt_joints(toy_samples):
    s = toy_samples[0]
    K = len(s.gt_joints)
    onehot = np.eye(K)[s.gt_part_labels]
    # offsets were computed before noise, so vote from the clean positions
    clean = s.gt_joints[s.gt_part_labels] - s.gt_offsets
    js = cluster_votes(clean, vote_set(onehot, s.gt_offsets))
    seen = np.unique(s.gt_part_labels)
    np.testing.assert_allclose(js.positions.data[seen], s.gt_joints[seen], atol=1e-12)
    assert set(np.nonzero(js.visible)[0].tolist()) == set(seen.tolist())


def point_features(n, rng, dtype=np.float64):
    return PointFeatures(rng.normal(size=(n, 3)),
                         T.Tensor(rng.normal(size=(n, FEATURE_DIM)), dtype=dtype),
                         T.Tensor(rng.normal(size=(1, GLOBAL_DIM)), dtype=dtype))


def test_zero_heads_give_uniform_scores_and_identity_features():
    rng = np.random.default_rng(0)
    vm = VotingModule(7, rng).astype(np.float64)
    for head in (vm.seg_head, vm.feature_head):
        head.weight.data[:] = 0
        head.bias.data[:] = 0
    pf = point_features(25, rng)
    votes = vm(pf)
    np.testing.assert_allclose(votes.seg_scores.data, 1 / 7, atol=1e-12)
    np.testing.assert_array_equal(votes.features.data, pf.features.data)


def test_seg_head_gradient():
    rng = np.random.default_rng(1)
    vm = VotingModule(5, rng).astype(np.float64)
    pf = point_features(12, rng)
    labels = rng.integers(0, 5, 12)
    leaves = {"w": vm.seg_head.weight, "b": vm.seg_head.bias}

    def loss():
        return seg_loss(vm(pf).seg_scores, labels)

    grads = T.grad(loss(), leaves)
    for name, p in leaves.items():
        assert np.max(rel_err(grads[name], numeric_grad(lambda: float(loss().data), p.data))) < 1e-3


def empty_joints(k, dtype=np.float64):
    return JointSet(T.Tensor(np.zeros((k, 3)), dtype=dtype), T.Tensor(np.zeros((k, FEATURE_DIM)), dtype=dtype),
                    np.zeros(k, bool), np.zeros(k))


def test_completion_shapes_and_zero_input():
    jc = JointCompletion(6, np.random.default_rng(2)).astype(np.float64)
    a = jc(empty_joints(6))
    b = jc(empty_joints(6))
    assert a.completed_positions.shape == (6, 3)
    assert a.completed_features.shape == (6, GLOBAL_DIM)
    assert np.all(np.isfinite(a.completed_positions.data))
    assert a.completed_positions.data.tobytes() == b.completed_positions.data.tobytes()
    # zero input: only the bias pathway contributes
    h = np.maximum(jc.hidden.bias.data, 0)
    q = (h @ jc.out.weight.data + jc.out.bias.data).reshape(6, GLOBAL_DIM)
    np.testing.assert_allclose(a.completed_features.data, q, atol=1e-12)


def test_completion_gradient_of_skeleton_loss():
    rng = np.random.default_rng(3)
    jc = JointCompletion(4, rng, hidden=16).astype(np.float64)
    js = empty_joints(4)
    js.positions = T.Tensor(rng.normal(size=(4, 3)), dtype=np.float64)
    js.features = T.Tensor(rng.normal(size=(4, FEATURE_DIM)), dtype=np.float64)
    gt = rng.normal(size=(4, 3))
    leaves = {"h": jc.hidden.weight, "o": jc.out.bias, "p": jc.position_head.weight}

    def loss():
        return skeleton_loss(jc(js).completed_positions, gt)

    grads = T.grad(loss(), leaves)
    for name, p in leaves.items():
        assert np.max(rel_err(grads[name], numeric_grad(lambda: float(loss().data), p.data))) < 1e-3
