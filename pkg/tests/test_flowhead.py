import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.ndimage import map_coordinates

from densematch import tensor as T
from densematch.costvol import CostVolume
from densematch.errors import ContractError, NumericError, ShapeError
from densematch.flowhead import (FlowField, KeypointSet, aepe, bilinear_sample, downscale_flow, grid_positions,
                                 hard_argmax_flow, pck, soft_argmax_flow, upsample_flow, warp)

seeds = st.integers(0, 2**31 - 1)


def cv(x, src=(3, 3), trg=(3, 3)):
    return CostVolume(T.const(x), src, trg)


def test_grid_positions_row_major():
    np.testing.assert_array_equal(grid_positions(2, 3), [[0, 0], [1, 0], [2, 0], [0, 1], [1, 1], [2, 1]])


def test_identity_peaks_give_zero_flow():
    c = np.eye(9) * 100
    np.testing.assert_allclose(soft_argmax_flow(cv(c), 0.01).data, 0, atol=1e-12)


def test_soft_argmax_is_expected_displacement(rng):
    c = rng.normal(size=(4, 6))
    w = np.exp(c / 0.7)
    w /= w.sum(1, keepdims=True)
    ref = w @ grid_positions(2, 3) - grid_positions(2, 2)
    np.testing.assert_allclose(soft_argmax_flow(cv(c, (2, 2), (2, 3)), 0.7).data, ref, atol=1e-12)


@given(seeds)
def test_soft_argmax_row_shift_invariance(seed):
    r = np.random.default_rng(seed)
    c = r.normal(size=(9, 9))
    shifted = c + r.normal(scale=20, size=(9, 1))
    a = soft_argmax_flow(cv(c), 0.2).data
    b = soft_argmax_flow(cv(shifted), 0.2).data
    assert np.abs(a - b).max() <= 1e-6


@given(seeds, st.floats(0.1, 10))
def test_rescaling_equals_temperature_change(seed, lam):
    r = np.random.default_rng(seed)
    c = r.normal(size=(9, 9))
    a = soft_argmax_flow(cv(lam * c), 0.3).data
    b = soft_argmax_flow(cv(c), 0.3 / lam).data
    assert np.abs(a - b).max() <= 1e-6


def test_soft_argmax_agrees_with_hard_argmax_on_peaked_volumes(rng):
    c = rng.normal(scale=0.2, size=(16, 16))
    rows, best = np.arange(16), rng.integers(0, 16, size=16)
    c[rows, best] = -np.inf
    c[rows, best] = c.max(axis=1) + 0.1
    soft = soft_argmax_flow(cv(c, (4, 4), (4, 4)), 1e-3).data
    hard = hard_argmax_flow(c, (4, 4), (4, 4))
    assert np.abs(soft - hard).max() <= 0.01


def test_soft_argmax_contracts():
    with pytest.raises(ContractError):
        soft_argmax_flow(cv(np.zeros((9, 9))), 0.0)
    with pytest.raises(NumericError):
        soft_argmax_flow(cv(np.full((9, 9), np.inf)), 1.0)


def test_aepe_hand_example():
    pred = np.array([[[3.0, 4.0], [0.0, 0.0]]])
    gt = np.zeros((1, 2, 2))
    assert aepe(pred, gt) == pytest.approx(2.5)
    assert aepe(pred, gt, np.array([[True, False]])) == pytest.approx(5.0)


@given(seeds)
def test_aepe_symmetric(seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(2, 4, 5, 2))
    assert aepe(a, b) == aepe(b, a)


def test_aepe_tensor_path_matches_numpy(rng):
    a, b = rng.normal(size=(2, 6, 2))
    m = np.array([1, 0, 1, 1, 0, 1], bool)
    assert float(aepe(T.const(a), b, m).data) == pytest.approx(aepe(a, b, m), abs=1e-12)


def test_aepe_empty_mask_and_shape_errors():
    with pytest.raises(ContractError):
        aepe(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), np.zeros((2, 2), bool))
    with pytest.raises(ShapeError):
        aepe(np.zeros((2, 2, 2)), np.zeros((3, 2, 2)))


def test_pck_alpha_zero_counts_exact_matches_only():
    gt = np.array([[10.0, 10.0], [5.0, 5.0], [0.0, 1.0]])
    pred = gt + np.array([[0, 0], [1e-9, 0], [0, 0]])
    assert pck(pred, gt, 0.0, (100, 100)) == pytest.approx(2 / 3)


def test_pck_threshold_uses_longer_side():
    gt = KeypointSet(np.zeros((4, 2)), (50, 200))
    pred = KeypointSet(np.array([[9.9, 0], [10.1, 0], [0, 7], [30, 0]]), (50, 200))
    assert pck(pred, gt, 0.05) == pytest.approx(0.5)  # threshold 10 px


def test_pck_contracts():
    with pytest.raises(ContractError):
        pck(np.zeros((2, 2)), np.zeros((3, 2)), 0.1, (8, 8))
    with pytest.raises(ContractError):
        pck(np.zeros((2, 2)), np.zeros((2, 2)), 0.1)


def test_bilinear_sample_matches_scipy(rng):
    img = rng.random((6, 7, 2))
    ys, xs = rng.uniform(0, 5, size=20), rng.uniform(0, 6, size=20)
    vals, inb = bilinear_sample(img, xs, ys)
    assert inb.all()
    for c in range(2):
        np.testing.assert_allclose(vals[:, c], map_coordinates(img[..., c], [ys, xs], order=1), atol=1e-12)


def test_bilinear_sample_out_of_bounds_is_zero(rng):
    vals, inb = bilinear_sample(rng.random((4, 4, 1)), np.array([-0.5, 3.0, 3.5]), np.array([0.0, 3.0, 1.0]))
    assert list(inb) == [False, True, False]
    assert vals[0, 0] == 0 and vals[2, 0] == 0


def test_warp_integer_translation(rng):
    img = rng.random((5, 6, 3))
    flow = FlowField(np.tile([1.0, 2.0], (5, 6, 1)))
    out, inb = warp(img, flow)
    np.testing.assert_allclose(out[:3, :5], img[2:, 1:])
    assert not inb[3:].any() and not inb[:, 5:].any()


def test_downscale_flow_block_average_and_mask():
    flow = np.zeros((4, 4, 2))
    flow[:2, :2] = [4.0, -2.0]
    mask = np.ones((4, 4), bool)
    mask[3, 3] = False
    f, m = downscale_flow(flow, mask, 2)
    np.testing.assert_allclose(f[0, 0], [2.0, -1.0])
    assert m.tolist() == [[True, True], [True, False]]


def test_upsample_constant_flow_scales_vectors():
    up = upsample_flow(np.tile([1.5, -0.5], (4, 4, 1)), 4)
    assert up.shape == (16, 16, 2)
    np.testing.assert_allclose(up, np.tile([6.0, -2.0], (16, 16, 1)))


def test_flowfield_shape_check():
    with pytest.raises(ShapeError):
        FlowField(np.zeros((3, 3, 3)))
