import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dense_poisson_oracle
from synthdet.blending import (
    BlendMode,
    BlendRequest,
    PoissonParams,
    blend,
    dense_poisson_solve,
    guidance_image,
    pad_crop,
    placed_mask,
    poisson_residual,
    seamless_clone,
    simple_superimpose,
    solve_poisson,
    unknown_pixels,
)
from synthdet.errors import NonConvergenceWarning, OutOfBounds


def random_case(rng, size=32, crop=(14, 18)):
    dst = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
    src = rng.integers(0, 256, crop + (3,), dtype=np.uint8)
    yy, xx = np.mgrid[0:crop[0], 0:crop[1]]
    mask = ((yy - crop[0] / 2) / (crop[0] / 2)) ** 2 + ((xx - crop[1] / 2) / (crop[1] / 2)) ** 2 <= 1.0
    mask |= rng.random(crop) < 0.2
    top_left = (int(rng.integers(0, size - crop[0] + 1)), int(rng.integers(0, size - crop[1] + 1)))
    return BlendRequest(src, mask, dst, top_left, BlendMode.BL)


def solve(req, params=PoissonParams()):
    return solve_poisson(guidance_image(req), req.destination, placed_mask(req), params)


def test_si_empty_mask_is_identity():
    dst = np.random.default_rng(0).integers(0, 256, (20, 20, 3), dtype=np.uint8)
    req = BlendRequest(np.zeros((5, 5, 3), np.uint8), np.zeros((5, 5), bool), dst, (3, 3))
    assert np.array_equal(simple_superimpose(req), dst)


def test_si_full_paste():
    rng = np.random.default_rng(1)
    dst = rng.integers(0, 256, (20, 20, 3), dtype=np.uint8)
    src = rng.integers(0, 256, (10, 10, 3), dtype=np.uint8)
    out = simple_superimpose(BlendRequest(src, np.ones((10, 10), bool), dst, (0, 0)))
    assert np.array_equal(out[:10, :10], src)
    assert np.array_equal(out[10:], dst[10:]) and np.array_equal(out[:, 10:], dst[:, 10:])


@pytest.mark.parametrize("top_left", [(-1, 0), (0, -2), (15, 0), (0, 12)])
@pytest.mark.parametrize("mode", ["SI", "BL"])
def test_out_of_bounds(top_left, mode):
    req = BlendRequest(np.zeros((6, 9, 3), np.uint8), np.ones((6, 9), bool),
                       np.zeros((20, 20, 3), np.uint8), top_left, BlendMode(mode))
    with pytest.raises(OutOfBounds):
        blend(req)


def test_identity_source():
    rng = np.random.default_rng(2)
    dst = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    mask = np.ones((12, 12), bool)
    req = BlendRequest(dst[8:20, 10:22].copy(), mask, dst, (8, 10), BlendMode.BL)
    out = seamless_clone(req)
    assert np.abs(out.astype(int) - dst).max() <= 1


def test_constant_colors_converge_to_destination_color():
    dst = np.full((30, 30, 3), (40, 120, 220), np.uint8)
    src = np.full((10, 12, 3), (250, 5, 90), np.uint8)
    mask = np.zeros((10, 12), bool)
    mask[1:-1, 1:-1] = True
    out = seamless_clone(BlendRequest(src, mask, dst, (10, 9), BlendMode.BL))
    assert np.array_equal(out, dst)
    full = BlendRequest(src, np.ones((10, 12), bool), dst, (10, 9), BlendMode.BL)
    assert np.array_equal(seamless_clone(pad_crop(full)), dst)


@pytest.mark.parametrize("seed", range(5))
def test_matches_direct_solve(seed):
    req = random_case(np.random.default_rng(seed))
    f, converged = solve(req)
    assert converged
    oracle = dense_poisson_oracle(req.source, req.destination, req.mask, req.top_left)
    assert np.abs(f - oracle).max() <= 0.5
    # the package's own dense solver agrees with the oracle to rounding error
    pkg = dense_poisson_solve(guidance_image(req), req.destination, placed_mask(req))
    assert np.abs(pkg - oracle).max() < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_residual_within_tol(seed):
    req = random_case(np.random.default_rng(100 + seed))
    p = PoissonParams()
    f, _ = solve(req, p)
    assert np.abs(poisson_residual(f, guidance_image(req), placed_mask(req))).max() <= p.tol


def test_output_is_clamped_rounded_solution():
    req = random_case(np.random.default_rng(7))
    f, _ = solve(req)
    out = seamless_clone(req)
    unk = unknown_pixels(placed_mask(req))
    assert np.array_equal(out[unk], np.clip(np.rint(f[unk]), 0, 255).astype(np.uint8))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["SI", "BL"]))
def test_exterior_preserved(seed, mode):
    req = random_case(np.random.default_rng(seed), size=24, crop=(8, 10))
    req = BlendRequest(req.source, req.mask, req.destination, req.top_left, BlendMode(mode))
    out = blend(req)
    outside = ~placed_mask(req)
    assert np.array_equal(out[outside], req.destination[outside])


def test_mask_on_image_border_stays_pinned():
    rng = np.random.default_rng(4)
    dst = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    src = rng.integers(0, 256, (6, 6, 3), dtype=np.uint8)
    out = seamless_clone(BlendRequest(src, np.ones((6, 6), bool), dst, (0, 0), BlendMode.BL))
    assert np.array_equal(out[0, :6], dst[0, :6]) and np.array_equal(out[:6, 0], dst[:6, 0])


def test_constant_offset_invariance():
    rng = np.random.default_rng(5)
    dst = rng.integers(60, 200, (32, 32, 3), dtype=np.uint8)
    src = rng.integers(60, 140, (12, 12, 3), dtype=np.uint8)
    mask = np.zeros((12, 12), bool)
    mask[2:10, 2:10] = True
    a = seamless_clone(BlendRequest(src, mask, dst, (10, 10), BlendMode.BL))
    b = seamless_clone(BlendRequest(src + 50, mask, dst, (10, 10), BlendMode.BL))
    assert np.abs(a.astype(int) - b).max() <= 1


def test_deterministic():
    req = random_case(np.random.default_rng(9))
    assert np.array_equal(seamless_clone(req), seamless_clone(req))


def test_nonconvergence_warns_and_returns():
    req = random_case(np.random.default_rng(10))
    with pytest.warns(NonConvergenceWarning):
        out = seamless_clone(req, PoissonParams(max_iters=2, check_every=1))
    assert out.shape == req.destination.shape


def test_params_validation():
    with pytest.raises(ValueError):
        PoissonParams(omega=2.0)
    with pytest.raises(ValueError):
        PoissonParams(tol=0)


def test_pad_crop_keeps_placed_pixels():
    rng = np.random.default_rng(12)
    req = random_case(rng, size=24, crop=(8, 10))
    padded = pad_crop(req)
    assert np.array_equal(placed_mask(padded), placed_mask(req))
    assert np.array_equal(simple_superimpose(padded), simple_superimpose(req))
    corner = BlendRequest(req.source, req.mask, req.destination, (0, 0), BlendMode.BL)
    assert pad_crop(corner).top_left == (0, 0)
    assert pad_crop(corner).mask.shape == (9, 11)


def test_pad_crop_hides_crop_edge_jump():
    # a flat source on a flat destination: the padded solve must stay flat
    dst = np.full((20, 20, 3), 100, np.uint8)
    src = np.full((8, 8, 3), 180, np.uint8)
    req = BlendRequest(src, np.ones((8, 8), bool), dst, (6, 6), BlendMode.BL)
    assert np.array_equal(seamless_clone(pad_crop(req)), dst)
    assert not np.array_equal(seamless_clone(req), dst)
