import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cycledeform.errors import DegenerateCloud, LabelSpaceMismatch, LengthMismatch
from cycledeform.geometry import (
    AugmentationTransform,
    KdTree,
    LabeledCloud,
    RigidTransform,
    apply_augmentation,
    chamfer_asym,
    chamfer_sym,
    icp_align,
    miou,
    normalize_bbox,
    project,
    rotation_z,
)

coords = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
clouds = arrays(np.float64, st.tuples(st.integers(2, 30), st.just(3)), elements=coords)


def brute_nn(points, q):
    sq = ((points - q) ** 2).sum(axis=1)
    return int(np.flatnonzero(sq == sq.min())[0])


def brute_chamfer_asym(source, target):
    total = 0.0
    for q in target:
        total += min(np.sqrt(((p - q) ** 2).sum()) for p in source)
    return total / len(target)


# normalize_bbox

def test_normalize_cube_corners_unchanged():
    cube = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], float)
    np.testing.assert_array_equal(normalize_bbox(cube), cube)


def test_normalize_segment():
    out = normalize_bbox([[0, 0, 0], [4, 0, 0]])
    np.testing.assert_allclose(out, [[-1, 0, 0], [1, 0, 0]])


def test_normalize_random_bbox_by_scan():
    pts = np.random.default_rng(3).normal(size=(100, 3)) * [3, 1, 0.5] + 7
    out = normalize_bbox(pts)
    lo = np.array([min(p[a] for p in out) for a in range(3)])
    hi = np.array([max(p[a] for p in out) for a in range(3)])
    np.testing.assert_allclose((lo + hi) / 2, 0, atol=1e-9)
    assert abs((hi - lo).max() - 2) < 1e-9
    # aspect ratios preserved
    src = pts.max(0) - pts.min(0)
    np.testing.assert_allclose((hi - lo) / (hi - lo).max(), src / src.max(), rtol=1e-12)


def test_normalize_degenerate():
    with pytest.raises(DegenerateCloud):
        normalize_bbox(np.ones((5, 3)))


@settings(max_examples=50, deadline=None)
@given(clouds)
def test_normalize_idempotent(pts):
    if np.ptp(pts, axis=0).max() < 1e-3:
        return
    once = normalize_bbox(pts)
    np.testing.assert_allclose(normalize_bbox(once), once, atol=1e-12)


# augmentation

def test_augmentation_identity():
    pts = normalize_bbox(np.random.default_rng(0).normal(size=(50, 3)))
    out = apply_augmentation(pts, AugmentationTransform())
    np.testing.assert_allclose(out, pts, atol=1e-15)


@pytest.mark.parametrize("kwargs", [
    {"theta_z": np.deg2rad(90)},
    {"scale": (0.5, 1, 1)},
    {"scale": (1, 1, 1.3)},
    {"translation": (0.03, 0, 0)},
])
def test_augmentation_out_of_range_rejected(kwargs):
    with pytest.raises(ValueError):
        AugmentationTransform(**kwargs)


def test_augmentation_matches_homogeneous_matrices():
    cube = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], float)
    th = np.deg2rad(30)
    psi = AugmentationTransform(th, (0.8, 1.2, 1.0), (0.01, 0.0, 0.0))
    Rz = np.eye(4)
    Rz[:2, :2] = [[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]]
    S = np.diag([0.8, 1.2, 1.0, 1.0])
    homo = np.c_[cube, np.ones(len(cube))]
    rs = (S @ Rz @ homo.T).T[:, :3]
    lo, hi = rs.min(0), rs.max(0)
    N = np.eye(4)
    N[:3, :3] *= 2 / (hi - lo).max()
    N[:3, 3] = -(lo + hi) / 2 * 2 / (hi - lo).max()
    T = np.eye(4)
    T[:3, 3] = [0.01, 0, 0]
    expected = (T @ N @ S @ Rz @ homo.T).T[:, :3]
    np.testing.assert_allclose(apply_augmentation(cube, psi), expected, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sampled_augmentation_in_range(seed):
    psi = AugmentationTransform.sample(np.random.default_rng(seed))
    assert abs(psi.theta_z) <= np.deg2rad(40)
    assert all(0.75 <= s <= 1.25 for s in psi.scale)
    assert all(abs(t) < 0.03 for t in psi.translation)


# nearest neighbours

def test_project_member_and_nearer_point():
    X = np.array([[1.0, 0, 0], [0, 2, 0]])
    tree = KdTree(X)
    assert project([0, 0, 0], tree)[0] == 0
    np.testing.assert_array_equal(project([0, 0, 0], tree)[1], [1, 0, 0])
    for i, p in enumerate(X):
        j, q = project(p, tree)
        assert j == i and np.array_equal(q, p)


def test_kdtree_matches_brute_force_1000():
    rng = np.random.default_rng(7)
    pts = rng.uniform(-1, 1, (300, 3))
    queries = rng.uniform(-1.2, 1.2, (1000, 3))
    idx, dist = KdTree(pts).query(queries)
    expected = [brute_nn(pts, q) for q in queries]
    np.testing.assert_array_equal(idx, expected)
    np.testing.assert_allclose(dist, np.linalg.norm(pts[expected] - queries, axis=1), rtol=1e-12)


def test_kdtree_ties_smallest_index():
    # grid points create exact ties; duplicates must report their first copy
    grid = np.array([[x, y, 0.0] for x in range(3) for y in range(3)])
    pts = np.vstack([grid[4:], grid, grid[:2]])
    queries = np.array([[0.5, 0.5, 0], [1, 1, 0], [0.5, 0, 0], [1.5, 1.5, 1]])
    idx, _ = KdTree(pts).query(queries)
    np.testing.assert_array_equal(idx, [brute_nn(pts, q) for q in queries])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 25), st.just(3)),
              elements=st.integers(-2, 2).map(float)),
       arrays(np.float64, (10, 3), elements=st.sampled_from([-1.5, -1.0, -0.5, 0.0, 0.5, 1.0])))
def test_kdtree_exhaustive_equivalence_on_lattices(pts, queries):
    idx, _ = KdTree(pts).query(queries)
    np.testing.assert_array_equal(idx, [brute_nn(pts, q) for q in queries])


@settings(max_examples=30, deadline=None)
@given(clouds)
def test_every_member_projects_to_itself(pts):
    tree = KdTree(pts)
    idx, dist = tree.query(pts)
    np.testing.assert_array_equal(pts[idx], pts)
    assert np.all(dist == 0)


# chamfer

def test_chamfer_trivial_cases():
    X = np.random.default_rng(0).normal(size=(20, 3))
    assert chamfer_asym(X, X) == 0.0
    assert chamfer_sym(X, X) == 0.0
    assert chamfer_asym([[0, 0, 0]], [[1, 0, 0]]) == 1.0
    assert chamfer_sym([[0, 0, 0]], [[1, 0, 0]]) == 2.0


def test_chamfer_asym_brute_force_64():
    rng = np.random.default_rng(11)
    a, b = rng.normal(size=(64, 3)), rng.normal(size=(64, 3))
    assert abs(chamfer_asym(a, b) - brute_chamfer_asym(a, b)) < 1e-12
    assert abs(chamfer_asym(b, a) - brute_chamfer_asym(b, a)) < 1e-12


def test_chamfer_normalizes_by_target_size():
    src = np.zeros((1, 3))
    tgt = np.array([[1.0, 0, 0], [3.0, 0, 0]])
    assert chamfer_asym(src, tgt) == 2.0


@settings(max_examples=40, deadline=None)
@given(clouds, clouds, st.randoms(use_true_random=False))
def test_chamfer_sym_symmetric_and_permutation_invariant(a, b, rnd):
    assert chamfer_sym(a, b) == pytest.approx(chamfer_sym(b, a), rel=1e-12, abs=1e-12)
    pa = a[rnd.sample(range(len(a)), len(a))]
    pb = b[rnd.sample(range(len(b)), len(b))]
    assert chamfer_sym(pa, pb) == pytest.approx(chamfer_sym(a, b), rel=1e-12, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(clouds, st.data())
def test_chamfer_zero_iff_subset(X, data):
    rows = data.draw(st.lists(st.integers(0, len(X) - 1), min_size=1, max_size=10))
    Y = X[rows]
    assert chamfer_asym(X, Y) == 0.0
    shifted = Y + np.array([0.0, 0.0, 25.0])
    assert chamfer_asym(X, shifted) > 0.0
    assert chamfer_asym(X, Y) >= 0


# rigid registration

def test_rigid_transform_validates_rotation():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]))
    RigidTransform(rotation_z(0.3))


def test_icp_identity():
    X = np.random.default_rng(1).normal(size=(100, 3))
    res = icp_align(X, X)
    np.testing.assert_allclose(res.transform.rotation, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(res.transform.translation, 0, atol=1e-9)


def test_icp_recovers_known_transform():
    X = normalize_bbox(np.random.default_rng(2).uniform(-1, 1, (512, 3)) * [1, 0.6, 0.3])
    R, t = rotation_z(np.deg2rad(20)), np.array([0.05, 0, 0])
    res = icp_align(X, X @ R.T + t)
    assert res.residuals[-1] < 1e-5
    np.testing.assert_allclose(res.transform.rotation, R, atol=1e-6)
    np.testing.assert_allclose(res.transform.translation, t, atol=1e-6)


def test_icp_non_overlapping_monotone():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(200, 3))
    b = rng.normal(size=(150, 3)) * [2, 0.3, 1] + [5, 0, 0]
    res = icp_align(a, b, max_iters=50)
    r = np.array(res.residuals)
    assert np.isfinite(r).all()
    assert np.all(np.diff(r) <= 1e-12)
    assert res.iterations <= 50


def test_icp_degenerate():
    line = np.c_[np.linspace(0, 1, 10), np.zeros(10), np.zeros(10)]
    with pytest.raises(DegenerateCloud):
        icp_align(line, line + [0.1, 0.2, 0])


# mIoU

def test_miou_hand_cases():
    assert miou([0, 1, 1], [0, 1, 1], 2) == 1.0
    assert miou([0, 0, 1, 1], [0, 1, 1, 1], 2) == pytest.approx((1 / 2 + 2 / 3) / 2, abs=1e-12)
    assert round(miou([0, 0, 1, 1], [0, 1, 1, 1], 2), 5) == 0.58333
    assert miou([0, 0, 0], [1, 1, 1], 2) == 0.0


def test_miou_absent_part_scores_one():
    assert miou([0, 0], [0, 0], 3) == 1.0


def test_miou_length_mismatch():
    with pytest.raises(LengthMismatch):
        miou([0, 1], [0], 2)


@settings(max_examples=50, deadline=None)
@given(st.data())
def test_miou_matches_set_enumeration(data):
    L = data.draw(st.integers(1, 4))
    n = data.draw(st.integers(1, 30))
    pred = data.draw(st.lists(st.integers(0, L - 1), min_size=n, max_size=n))
    gt = data.draw(st.lists(st.integers(0, L - 1), min_size=n, max_size=n))
    ious = []
    for part in range(L):
        p = {i for i, v in enumerate(pred) if v == part}
        g = {i for i, v in enumerate(gt) if v == part}
        ious.append(1.0 if not (p | g) else len(p & g) / len(p | g))
    assert miou(pred, gt, L) == pytest.approx(sum(ious) / L, abs=1e-12)


def test_labeled_cloud_validation():
    pts = np.zeros((3, 3))
    with pytest.raises(LengthMismatch):
        LabeledCloud(pts, [0, 1], 2)
    with pytest.raises(LabelSpaceMismatch):
        LabeledCloud(pts, [0, 1, 2], 2)
    with pytest.raises(DegenerateCloud):
        LabeledCloud(np.zeros((0, 3)), [], 1)
