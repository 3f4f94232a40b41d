import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchstitch import diffcore as dc
from patchstitch.spatial import (DegenerateNeighborhoodError, GroundTruthCloud, NeighborConfig,
                                 NeighborhoodTooSmallError, NeighborIndex, PredictedCloud, associate_gt,
                                 build_index, constrained_knn, constrained_neighborhoods, covariance_normal,
                                 patch_neighborhood, patch_neighborhoods)

import oracles


def _pred(points, ids, K=None):
    ids = np.asarray(ids)
    return PredictedCloud(np.asarray(points, dtype=float), ids, int(ids.max()) + 1 if K is None else K)


def test_ground_truth_validation():
    pts = np.zeros((4, 3))
    nrm = np.tile([0.0, 0.0, 1.0], (4, 1))
    GroundTruthCloud(pts, nrm, 1.0)
    with pytest.raises(ValueError):
        GroundTruthCloud(pts[:3], nrm[:3], 1.0)
    with pytest.raises(ValueError):
        GroundTruthCloud(pts, nrm * 1.1, 1.0)
    with pytest.raises(ValueError):
        GroundTruthCloud(pts, nrm, 0.0)


def test_predicted_cloud_validation():
    with pytest.raises(ValueError):
        _pred(np.zeros((2, 3)), [0, 3], K=2)
    with pytest.raises(ValueError):
        _pred(np.array([[np.nan, 0, 0]]), [0])


def test_empty_index_rejected():
    with pytest.raises(ValueError):
        build_index(np.zeros((0, 3)))


def test_index_matches_brute_force(backend, rng):
    pts = rng.random((100, 3))
    q = rng.random((20, 3))
    idx, _ = build_index(pts).knn(q, 5)
    np.testing.assert_array_equal(idx, oracles.knn(pts, q, 5)[0])


def test_associate_gt_examples(backend, rng):
    gt = GroundTruthCloud([[0, 0, 0], [0, 0, 1], [5, 5, 5], [6, 6, 6]],
                          [[0, 0, 1], [0, 0, -1], [1, 0, 0], [1, 0, 0]], 1.0)
    idx, nrm = associate_gt(_pred([[0, 0, 0.4], [0, 0, 1]], [0, 0]), gt)
    np.testing.assert_array_equal(idx, [0, 1])
    np.testing.assert_array_equal(nrm[0], [0, 0, 1])
    pred = rng.random((500, 3))
    gpts = rng.random((500, 3))
    g = GroundTruthCloud(gpts, np.tile([0.0, 0, 1], (500, 1)), 1.0)
    np.testing.assert_array_equal(associate_gt(_pred(pred, np.zeros(500, int)), g)[0],
                                  oracles.knn(gpts, pred, 1)[0][:, 0])


def test_patch_neighborhood_same_patch(backend, rng):
    pts = rng.random((60, 3))
    ids = np.repeat([0, 1], 30)
    pred = _pred(pts, ids)
    nb = patch_neighborhood(pred, 3, 5)
    assert np.all(ids[nb] == 0) and 3 not in nb
    all_nb = patch_neighborhoods(pred, 5)
    ref, _ = oracles.knn(pts, pts, 5, lambda q, j: j != q and ids[j] == ids[q])
    np.testing.assert_array_equal(all_nb, ref)


def test_patch_neighborhood_lattice(backend):
    t = np.arange(5.0)
    uu, vv = np.meshgrid(t, t, indexing="ij")
    pts = np.column_stack([uu.ravel(), vv.ravel(), np.zeros(25)])
    nb = patch_neighborhood(_pred(pts, np.zeros(25, int)), 12, 4)
    assert sorted(nb) == [7, 11, 13, 17]


def test_patch_neighborhood_too_small():
    pred = _pred(np.random.default_rng(0).random((6, 3)), [0, 0, 0, 1, 1, 1])
    with pytest.raises(NeighborhoodTooSmallError):
        patch_neighborhood(pred, 0, 3)
    with pytest.raises(NeighborhoodTooSmallError):
        patch_neighborhoods(pred, 3)


def _two_sheets(rng, n=200, gap=0.05):
    top = np.column_stack([rng.random((n, 2)), np.zeros(n)])
    bot = np.column_stack([rng.random((n, 2)), np.full(n, gap)])
    pts = np.vstack([top, bot])
    nrm = np.vstack([np.tile([0, 0, 1.0], (n, 1)), np.tile([0, 0, -1.0], (n, 1))])
    return pts, nrm


def test_constrained_knn_two_sheets(backend, rng):
    pts, nrm = _two_sheets(rng)
    pred = _pred(pts, np.zeros(len(pts), int))
    for q in (0, 17, 150):
        nb, fb = constrained_knn(pred, q, NeighborConfig(8, 120.0), nrm)
        assert not fb and len(nb) == 8 and np.all(nb < 200)
    # exactly opposite normals sit at 180 degrees, outside any theta < 180
    nb, _ = constrained_knn(pred, 0, NeighborConfig(8, 179.9), nrm)
    assert np.all(nb < 200)
    # tilt the lower sheet's normals to 179.8 degrees: now the threshold admits both sheets
    a = math.radians(179.8)
    tilted = nrm.copy()
    tilted[200:] = [math.sin(a), 0.0, math.cos(a)]
    nb, _ = constrained_knn(pred, 0, NeighborConfig(8, 179.9), tilted)
    ref, _ = oracles.knn(pts, pts[:1], 8, lambda q, j: j != 0)
    np.testing.assert_array_equal(nb, ref[0])
    assert np.any(nb >= 200)
    nb, _ = constrained_knn(pred, 0, NeighborConfig(8, 179.7), tilted)
    assert np.all(nb < 200)


def test_constrained_matches_brute_force(backend, rng):
    pts = rng.random((150, 3))
    nrm = rng.normal(size=(150, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    cfg = NeighborConfig(6, 90.0)
    idx, fb = constrained_neighborhoods(_pred(pts, np.zeros(150, int)), nrm, cfg)
    ref, _ = oracles.knn(pts, pts, 6, lambda q, j: j != q and oracles.angle_ok(nrm[q], nrm[j], 90.0))
    np.testing.assert_array_equal(idx[~fb], ref[~fb])


def test_constrained_identical_normals_is_unconstrained(backend, rng):
    pts = rng.random((80, 3))
    nrm = np.tile([0.0, 1.0, 0.0], (80, 1))
    idx, fb = constrained_neighborhoods(_pred(pts, np.zeros(80, int)), nrm, NeighborConfig(5, 180.0 - 1e-9))
    assert not fb.any()
    np.testing.assert_array_equal(idx, oracles.knn(pts, pts, 5, lambda q, j: j != q)[0])


def test_constrained_fallback_when_starved(backend):
    # every other point has the opposite normal: the filter admits nobody
    pts = np.random.default_rng(1).random((10, 3))
    nrm = np.tile([0, 0, 1.0], (10, 1))
    nrm[1:] *= -1
    idx, fb = constrained_neighborhoods(_pred(pts, np.zeros(10, int)), nrm, NeighborConfig(4, 120.0))
    assert fb[0]
    np.testing.assert_array_equal(idx[0], oracles.knn(pts, pts[:1], 4, lambda q, j: j != 0)[0][0])


def test_covariance_normal_planes():
    rng = np.random.default_rng(5)
    xy = rng.random((20, 2))
    n, gap = covariance_normal(np.column_stack([xy, np.zeros(20)]))
    assert abs(abs(n[2]) - 1) < 1e-9 and gap > 0
    # plane x + y + z = 1
    p = np.column_stack([xy, 1 - xy.sum(axis=1)])
    n, _ = covariance_normal(p)
    assert np.allclose(np.abs(n), 1 / math.sqrt(3), atol=1e-9)


def test_covariance_normal_noisy_plane():
    rng = np.random.default_rng(6)
    p = np.column_stack([rng.random((200, 2)), 0.01 * rng.normal(size=200)])
    n, _ = covariance_normal(p)
    ang = math.degrees(math.acos(min(1.0, abs(n[2]))))
    assert ang < 5.0
    assert abs(abs(n @ oracles.plane_normal(p)) - 1) < 1e-9


def test_covariance_normal_degenerate():
    with pytest.raises(DegenerateNeighborhoodError):
        covariance_normal(np.zeros((2, 3)))
    with pytest.raises(DegenerateNeighborhoodError):
        covariance_normal(np.outer(np.arange(5.0), [1, 2, 3]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_covariance_normal_equivariance(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(12, 3)) * [1.0, 0.7, 0.1]
    Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    t = rng.normal(size=3)
    n0, gap = covariance_normal(X)
    n1, _ = covariance_normal(X @ Q.T + t)
    if gap > 1e-3:
        assert abs(abs(n1 @ (Q @ n0)) - 1) < 1e-9
        n2, _ = covariance_normal(X[rng.permutation(12)])
        assert abs(abs(n2 @ n0) - 1) < 1e-9


def test_analytic_normals_degenerate_rows_are_flagged():
    ju = np.array([[1.0, 0, 0], [1.0, 0, 0]])
    jv = np.array([[0.0, 1, 0], [2.0, 0, 0]])
    pred = PredictedCloud(np.zeros((2, 3)), [0, 0], 1, ju=ju, jv=jv)
    n, bad = pred.analytic_normals()
    np.testing.assert_array_equal(bad, [False, True])
    np.testing.assert_array_equal(n.value, [[0, 0, 1], [0, 0, 0]])


def test_neighbor_config_validation():
    with pytest.raises(ValueError):
        NeighborConfig(2, 120.0)
    with pytest.raises(ValueError):
        NeighborConfig(8, 180.0)


def test_index_len_and_nearest():
    idx = NeighborIndex(np.eye(3))
    assert len(idx) == 3
    i, d2 = idx.nearest(np.array([[0.9, 0, 0]]))
    assert i[0] == 0 and abs(d2[0] - 0.01) < 1e-15
