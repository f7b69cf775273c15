import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import cldice_by_hand, components, zhang_suen_loop

from angiomim.metrics import cldice, count_components, dsc, skeletonize, skeletonize_batch

masks_8x8 = arrays(np.uint8, (8, 8), elements=st.integers(0, 1))


def test_dsc_examples():
    a = np.zeros((4, 4), np.uint8)
    a[0, :] = 1
    b = np.zeros((4, 4), np.uint8)
    b[0, :2] = 1
    b[1, :2] = 1
    assert dsc(a, a) == 1.0
    assert dsc(a, 1 - a) == 0.0
    assert dsc(a, b) == 0.5
    assert dsc(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(ValueError):
        dsc(np.zeros((2, 2)), np.zeros((3, 3)))


def test_skeleton_examples():
    assert not skeletonize(np.zeros((5, 5))).any()
    line = np.zeros((7, 7), np.uint8)
    line[3, 1:6] = 1
    np.testing.assert_array_equal(skeletonize(line), line)
    diag = np.eye(6, dtype=np.uint8)
    np.testing.assert_array_equal(skeletonize(diag), diag)
    sq = np.ones((5, 5), np.uint8)
    sk = skeletonize(sq)
    assert sk.sum() <= 5 and np.all(sk <= sq)
    assert count_components(sk) == 1
    np.testing.assert_array_equal(sk, zhang_suen_loop(sq))


def test_two_by_two_block_keeps_a_pixel():
    block = np.zeros((4, 4), np.uint8)
    block[1:3, 1:3] = 1
    # textbook thinning erases the whole block
    assert not zhang_suen_loop(block).any()
    sk = skeletonize(block)
    assert sk.sum() == 1 and sk[1, 1] == 1


def test_cldice_examples():
    a = np.zeros((7, 7), np.uint8)
    a[3, :] = 1
    assert cldice(a, a) == 1.0
    b = np.zeros((7, 7), np.uint8)
    b[0, :] = 1
    assert cldice(a, b) == 0.0
    assert cldice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    assert cldice(a, np.zeros((7, 7))) == 0.0


def test_cldice_7x7_thickened_row():
    gt = np.zeros((7, 7), np.uint8)
    gt[3, :] = 1
    pred = gt.copy()
    pred[2, 3] = 1
    by_hand = cldice_by_hand(pred, gt, zhang_suen_loop(pred), zhang_suen_loop(gt))
    # the loop oracle drops the spur, so both skeletons are the middle row
    assert by_hand == 1.0
    assert cldice(pred, gt) == pytest.approx(1.0, abs=1e-15)


def test_cldice_partial_overlap_by_hand():
    gt = np.zeros((9, 9), np.uint8)
    gt[4, :] = 1
    pred = np.zeros((9, 9), np.uint8)
    pred[4, :5] = 1
    pred[5, 5:] = 1
    expected = cldice_by_hand(pred, gt, zhang_suen_loop(pred), zhang_suen_loop(gt))
    assert cldice(pred, gt) == pytest.approx(expected, rel=1e-12)
    assert 0 < expected < 1


@settings(max_examples=150, deadline=None)
@given(masks_8x8)
def test_thinning_matches_textbook_when_no_component_vanishes(mask):
    textbook = zhang_suen_loop(mask)
    ours = skeletonize(mask)
    if components(textbook) == components(mask):
        np.testing.assert_array_equal(ours, textbook)
    assert count_components(ours) == components(mask)
    assert np.all(ours <= mask)


@settings(max_examples=100, deadline=None)
@given(masks_8x8)
def test_skeleton_idempotent(mask):
    sk = skeletonize(mask)
    np.testing.assert_array_equal(skeletonize(sk), sk)


@settings(max_examples=100, deadline=None)
@given(masks_8x8, masks_8x8)
def test_metric_bounds_and_symmetry(a, b):
    d, c = dsc(a, b), cldice(a, b)
    assert 0.0 <= d <= 1.0 and 0.0 <= c <= 1.0
    assert d == dsc(b, a)
    assert c == pytest.approx(cldice(b, a), abs=1e-15)
    if a.any():
        assert dsc(a, a) == 1.0 and cldice(a, a) == 1.0


def test_batch_equals_single():
    rng = np.random.default_rng(0)
    stack = (rng.random((20, 6, 7)) > 0.5).astype(np.uint8)
    batch = skeletonize_batch(stack)
    for k in range(20):
        np.testing.assert_array_equal(batch[k], skeletonize(stack[k]))
    with pytest.raises(ValueError):
        skeletonize_batch(np.zeros((4, 4)))


def test_count_components_eight_connected():
    m = np.zeros((5, 5), np.uint8)
    m[0, 0] = m[1, 1] = m[4, 4] = 1
    assert count_components(m) == 2
