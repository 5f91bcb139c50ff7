import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmreg.metrics import dice, jacobian_determinant, jacobian_stats
from dmreg.warp import identity_grid


def test_dice_identical_maps():
    rng = np.random.default_rng(0)
    a = rng.integers(0, 4, (6, 6, 6))
    per, mean = dice(a, a)
    assert set(per) == {1, 2, 3}
    assert all(v == 1.0 for v in per.values()) and mean == 1.0


def test_dice_disjoint_masks():
    a = np.zeros((4, 4, 4), dtype=np.uint16)
    b = np.zeros_like(a)
    a[0] = 1
    b[3] = 1
    assert dice(a, b)[0] == {1: 0.0}


def test_dice_shifted_cube():
    a = np.zeros((6, 6, 6), dtype=np.uint16)
    a[1:3, 1:3, 1:3] = 1
    b = np.roll(a, 1, axis=0)
    assert dice(a, b)[0][1] == pytest.approx(0.5)


def test_dice_label_in_one_map_scores_zero_and_absent_omitted():
    a = np.zeros((3, 3, 3), dtype=np.uint16)
    b = np.zeros_like(a)
    a[0, 0, 0] = 5
    a[1, 1, 1] = 2
    b[1, 1, 1] = 2
    per, mean = dice(a, b)
    assert per == {2: 1.0, 5: 0.0}
    assert mean == 0.5


def test_dice_shape_mismatch():
    with pytest.raises(ValueError):
        dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_dice_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 5, (5, 5, 5))
    b = rng.integers(0, 5, (5, 5, 5))
    ab, bb = dice(a, b)[0], dice(b, a)[0]
    assert ab == bb
    assert all(0.0 <= v <= 1.0 for v in ab.values())


def test_dice_mean_improves_with_overlap():
    a = np.zeros((8, 8, 8), dtype=np.uint16)
    a[2:6, 2:6, 2:6] = 1
    far = np.roll(a, 2, axis=1)
    near = np.roll(a, 1, axis=1)
    assert dice(a, near)[1] > dice(a, far)[1]


# -- Jacobian --------------------------------------------------------------------------

def affine_field(A, shape=(6, 7, 5)):
    return np.tensordot(np.asarray(A, dtype=float), identity_grid(shape), axes=1)


def test_identity_field_stats():
    s = jacobian_stats(np.zeros((3, 5, 5, 5)))
    assert s == {"pct_nonpositive": 0.0, "std_det": 0.0}
    assert np.all(jacobian_determinant(np.zeros((3, 5, 5, 5))) == 1.0)


def test_uniform_dilation():
    u = affine_field(0.1 * np.eye(3))
    det = jacobian_determinant(u)
    np.testing.assert_allclose(det, 1.331, atol=1e-5)
    s = jacobian_stats(u)
    assert s["pct_nonpositive"] == 0.0 and s["std_det"] < 1e-5


def test_folding_field():
    A = np.zeros((3, 3))
    A[0, 0] = -2.0
    u = affine_field(A)
    np.testing.assert_allclose(jacobian_determinant(u), -1.0, atol=1e-12)
    assert jacobian_stats(u)["pct_nonpositive"] == 100.0


@settings(max_examples=30, deadline=None)
@given(entries=st.lists(st.floats(-1.5, 1.5), min_size=9, max_size=9))
def test_affine_field_matches_closed_form(entries):
    A = np.array(entries).reshape(3, 3)
    det = jacobian_determinant(affine_field(A))
    assert det.shape == (4, 5, 3)
    np.testing.assert_allclose(det, np.linalg.det(np.eye(3) + A), atol=1e-9)


def test_interior_denominator():
    u = np.zeros((3, 5, 5, 5))
    # a fold confined to one interior voxel's neighbourhood: 1 of 27 interior voxels
    u[0, 1, 2, 2], u[0, 3, 2, 2] = 2.0, -2.0
    det = jacobian_determinant(u)
    assert det.size == 27
    assert jacobian_stats(u)["pct_nonpositive"] == pytest.approx(100 * np.count_nonzero(det <= 0) / 27)
    assert det[1, 1, 1] == pytest.approx(-1.0)


def test_jacobian_rejects_small_or_misshaped():
    with pytest.raises(ValueError):
        jacobian_determinant(np.zeros((3, 2, 5, 5)))
    with pytest.raises(ValueError):
        jacobian_determinant(np.zeros((2, 5, 5, 5)))
