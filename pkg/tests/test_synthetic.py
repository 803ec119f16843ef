import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from densematch.flowhead import FlowField, warp
from densematch.harness.synthetic import WarpSpec, gen_synthetic_pair, random_texture, sample_homography
from densematch.errors import ContractError

seeds = st.integers(0, 2**31 - 1)


def project(hm, x, y):
    """Point-by-point projective mapping oracle."""
    p = hm @ np.array([x, y, 1.0])
    return p[0] / p[2], p[1] / p[2]


def test_identity_warp_zero_flow_full_mask():
    p = gen_synthetic_pair(3, 32, WarpSpec(kind="identity"))
    assert np.all(p.flow == 0) and p.mask.all()
    np.testing.assert_allclose(p.target, p.source, atol=1e-12)


def test_translation_gives_constant_flow():
    p = gen_synthetic_pair(4, 32, WarpSpec(translation=(2.5, -1.25)))
    np.testing.assert_allclose(p.flow[..., 0], 2.5, atol=1e-12)
    np.testing.assert_allclose(p.flow[..., 1], -1.25, atol=1e-12)
    # x + 2.5 > 31 for x >= 29; y - 1.25 < 0 for y <= 1
    assert not p.mask[:, 29:].any() and not p.mask[:2].any() and p.mask[2:, :29].all()


@pytest.mark.parametrize("kind", ["affine", "homography"])
def test_flow_matches_point_mapping_oracle(kind):
    spec = WarpSpec(kind=kind, max_linear=0.15, max_perspective=1e-3)
    for seed in range(5):
        p = gen_synthetic_pair(seed, 32, spec)
        r = np.random.default_rng(seed)
        for _ in range(40):
            y, x = r.integers(0, 32, size=2)
            tx, ty = project(p.homography, float(x), float(y))
            assert abs(p.flow[y, x, 0] - (tx - x)) <= 1e-4
            assert abs(p.flow[y, x, 1] - (ty - y)) <= 1e-4
            assert p.mask[y, x] == (0 <= tx <= 31 and 0 <= ty <= 31)


@given(seeds, st.sampled_from(["translation", "affine", "homography"]))
def test_warp_consistency(seed, kind):
    p = gen_synthetic_pair(seed, 64, WarpSpec(kind=kind))
    back, inb = warp(p.target, FlowField(p.flow))
    valid = p.mask & inb
    assert np.abs(back - p.source)[valid].mean() <= 0.02


def test_generation_is_deterministic():
    a = gen_synthetic_pair(11, 32, WarpSpec(kind="homography"))
    b = gen_synthetic_pair(11, 32, WarpSpec(kind="homography"))
    assert np.array_equal(a.source, b.source) and np.array_equal(a.target, b.target)
    assert np.array_equal(a.flow, b.flow)
    assert not np.array_equal(a.source, gen_synthetic_pair(12, 32).source)


def test_texture_range_and_band_limit(rng):
    t = random_texture(rng, 64, 64)
    assert t.shape == (64, 64, 3) and t.min() == 0 and t.max() == 1
    # smooth: neighbouring pixels correlate strongly
    assert np.corrcoef(t[:, 1:].ravel(), t[:, :-1].ravel())[0, 1] > 0.8


def test_translation_bounds(rng):
    spec = WarpSpec(max_translation=8)
    for _ in range(50):
        hm = sample_homography(rng, spec, 128)
        assert np.all(np.abs(hm[:2, 2]) <= 8)


def test_degenerate_draws_are_redrawn():
    # a linear range this wide regularly produces near-singular draws; all returned warps stay invertible
    spec = WarpSpec(kind="homography", max_linear=0.9, max_perspective=1e-3)
    r = np.random.default_rng(0)
    for _ in range(30):
        hm = sample_homography(r, spec, 32)
        assert abs(np.linalg.det(hm)) > 1e-3


def test_bad_warp_kind():
    with pytest.raises(ContractError):
        WarpSpec(kind="spline")
