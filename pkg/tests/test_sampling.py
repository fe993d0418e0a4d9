"""Coordinate generation, bilinear extraction, and the RNG contract.

Oracles: a brute-force slicing loop for grid extraction, pure-python
four-corner bilinear arithmetic for worked interpolation values, and
closed-form uniform moments for the sampler statistics.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from randvit.errors import EmptySample, NonDivisibleImage, OutOfBounds
from randvit.sampling import (PatchCoords, PatchGeometry, RunStreams,
                              bilinear_sample, extract_batch, extract_patches,
                              grid_coords, random_coords, round_half_away,
                              stream, token_count)


def slicing_oracle(img, patch):
    """Brute-force P x P block slicing, row-major. Independent of the library."""
    c, h, w = img.shape
    out = []
    for i in range(h // patch):
        for j in range(w // patch):
            out.append(img[:, i * patch:(i + 1) * patch,
                           j * patch:(j + 1) * patch])
    return np.stack(out)


def bilinear_oracle(img, y, x, c):
    """Four-corner weighting straight from the definition."""
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    y1, x1 = min(y0 + 1, img.shape[1] - 1), min(x0 + 1, img.shape[2] - 1)
    fy, fx = y - y0, x - x0
    return ((1 - fy) * (1 - fx) * img[c, y0, x0]
            + (1 - fy) * fx * img[c, y0, x1]
            + fy * (1 - fx) * img[c, y1, x0]
            + fy * fx * img[c, y1, x1])


# ---------------------------------------------------------------------------
# geometry and coordinate generation
# ---------------------------------------------------------------------------

def test_grid_224_p16():
    geom = PatchGeometry(224, 224, 16)
    pc = grid_coords(geom)
    assert pc.n_tokens == 196
    assert pc.origin == "grid"
    assert tuple(pc.coords[0]) == (0.0, 0.0)
    assert tuple(pc.coords[1]) == (0.0, 1.0)
    assert tuple(pc.coords[-1]) == (13.0, 13.0)


def test_grid_single_patch():
    pc = grid_coords(PatchGeometry(16, 16, 16))
    assert pc.n_tokens == 1
    assert tuple(pc.coords[0]) == (0.0, 0.0)


def test_grid_rectangular_enumeration():
    pc = grid_coords(PatchGeometry(32, 48, 16))
    want = [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]
    assert [tuple(map(int, row)) for row in pc.coords] == want


def test_grid_requires_divisibility():
    with pytest.raises(NonDivisibleImage):
        grid_coords(PatchGeometry(30, 32, 16))
    with pytest.raises(NonDivisibleImage):
        grid_coords(PatchGeometry(32, 30, 16))


def test_grid_coords_distinct_integers():
    pc = grid_coords(PatchGeometry(64, 64, 8))
    assert np.array_equal(pc.coords, np.floor(pc.coords))
    assert len({tuple(r) for r in pc.coords.tolist()}) == pc.n_tokens


def test_round_half_away():
    assert round_half_away(3.5) == 4
    assert round_half_away(2.5) == 3  # not banker's rounding
    assert round_half_away(2.4) == 2
    assert round_half_away(-2.5) == -3


@pytest.mark.parametrize("r,want", [(0.5, 98), (1, 196), (2, 392),
                                    (3, 588), (4, 784)])
def test_count_law_base_196(r, want):
    geom = PatchGeometry(224, 224, 16)
    assert token_count(r, geom.tokens) == want
    rng = stream(0, 2, 0, 0, 0)
    assert random_coords(geom, r, rng).n_tokens == want


def test_count_law_fractional():
    # L = 7 with r = 0.5 gives 3.5, which rounds away from zero to 4
    assert token_count(0.5, 7) == 4


def test_empty_sample():
    with pytest.raises(EmptySample):
        token_count(0.001, 100)
    with pytest.raises(EmptySample):
        random_coords(PatchGeometry(32, 32, 16), 0.1, stream(0, 2))


def test_random_coords_deterministic():
    geom = PatchGeometry(224, 224, 16)
    a = random_coords(geom, 2, stream(9, 2, 0, 0, 0))
    b = random_coords(geom, 2, stream(9, 2, 0, 0, 0))
    assert np.array_equal(a.coords, b.coords)
    assert a.origin == "random"
    c = random_coords(geom, 2, stream(10, 2, 0, 0, 0))
    assert not np.array_equal(a.coords, c.coords)


def test_random_coords_moments():
    # z0 ~ U(0, 13): mean 6.5, var 169/12; 1e5 draws, 3 standard errors
    geom = PatchGeometry(224, 224, 16)
    n = 100_000
    draws = np.concatenate([
        random_coords(geom, 4, stream(0, 2, 0, i, 0)).coords
        for i in range(n // 784 + 1)])[:n]
    for axis in (0, 1):
        z = draws[:, axis]
        se_mean = 13.0 / np.sqrt(12 * n)
        assert abs(z.mean() - 6.5) < 3 * se_mean
        # var of the sample variance of U(0,13) is sigma^4 * (2/(n-1) + ...)
        var_true = 169.0 / 12
        se_var = var_true * np.sqrt(2.0 / (n - 1))
        assert abs(z.var(ddof=1) - var_true) < 3 * se_var


def test_streams_are_distinct_and_stable():
    s = RunStreams(42)
    a = s.sampler(0, 0, 0).uniform(size=4)
    b = s.sampler(0, 0, 1).uniform(size=4)
    c = s.sampler(0, 1, 0).uniform(size=4)
    assert not np.array_equal(a, b) and not np.array_equal(a, c)
    assert np.array_equal(a, RunStreams(42).sampler(0, 0, 0).uniform(size=4))
    # purposes do not collide
    assert not np.array_equal(s.init().uniform(size=4),
                              s.shuffle(0).uniform(size=4))


def test_stream_rejects_negative_seed():
    with pytest.raises(ValueError):
        stream(-1, 0)


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------

def test_bilinear_integer_exact():
    rng = np.random.default_rng(0)
    img = rng.normal(size=(3, 5, 7))
    for _ in range(20):
        y, x, c = rng.integers(5), rng.integers(7), rng.integers(3)
        assert bilinear_sample(img, float(y), float(x), c) == img[c, y, x]


def test_bilinear_worked_values():
    img = np.array([[[0.0, 1.0], [2.0, 3.0]]])
    assert bilinear_sample(img, 0.5, 0.5, 0) == pytest.approx(1.5, abs=1e-12)
    assert bilinear_sample(img, 0.0, 0.25, 0) == pytest.approx(0.25, abs=1e-12)


def test_bilinear_matches_oracle():
    rng = np.random.default_rng(1)
    img = rng.normal(size=(2, 9, 11))
    for _ in range(200):
        y = rng.uniform(0, 8)
        x = rng.uniform(0, 10)
        c = int(rng.integers(2))
        assert bilinear_sample(img, y, x, c) == pytest.approx(
            bilinear_oracle(img, y, x, c), rel=1e-12, abs=1e-12)


def test_bilinear_affine_exact():
    # bilinear interpolation reproduces affine surfaces exactly
    a, b, c0 = 0.7, -1.3, 2.0
    ys, xs = np.mgrid[0:10, 0:12]
    img = (a * ys + b * xs + c0)[None]
    rng = np.random.default_rng(2)
    for _ in range(100):
        y = rng.uniform(0, 9)
        x = rng.uniform(0, 11)
        want = a * y + b * x + c0
        assert bilinear_sample(img, y, x, 0) == pytest.approx(want, rel=1e-6)


def test_bilinear_out_of_bounds():
    img = np.zeros((1, 4, 4))
    for y, x in ((-0.01, 0), (0, -0.01), (3.01, 0), (0, 3.01)):
        with pytest.raises(OutOfBounds):
            bilinear_sample(img, y, x, 0)


# ---------------------------------------------------------------------------
# patch extraction
# ---------------------------------------------------------------------------

def test_grid_equivalence_100_images():
    rng = np.random.default_rng(3)
    for i in range(100):
        c = int(rng.integers(1, 4))
        p = int(rng.choice([4, 8]))
        h = p * int(rng.integers(1, 5))
        w = p * int(rng.integers(1, 5))
        img = rng.normal(size=(c, h, w))
        tb = extract_patches(img, grid_coords(PatchGeometry(h, w, p)), p)
        assert np.array_equal(tb.pixels, slicing_oracle(img, p))


def test_extract_ramp_example():
    # 4x4 ramp img[y][x] = 4y + x, one patch at (0.5, 0.5), P=2: the
    # top-left pixel is (1, 1) and the ramp is affine, so values are exact
    ys, xs = np.mgrid[0:4, 0:4]
    img = (4.0 * ys + xs)[None]
    pc = PatchCoords(coords=np.array([[0.5, 0.5]]), origin="random")
    tb = extract_patches(img, pc, 2)
    assert np.allclose(tb.pixels[0, 0], [[5.0, 6.0], [9.0, 10.0]], atol=1e-12)


def test_extract_shape_contract():
    rng = np.random.default_rng(4)
    img = rng.normal(size=(3, 224, 224)).astype(np.float32)
    pc = random_coords(PatchGeometry(224, 224, 16), 4, stream(0, 2))
    tb = extract_patches(img, pc, 16)
    assert tb.pixels.shape == (784, 3, 16, 16)
    assert tb.coords.n_tokens == 784


def test_snap_equivalence():
    rng = np.random.default_rng(5)
    img = rng.normal(size=(2, 32, 32))
    geom = PatchGeometry(32, 32, 8)
    pc = random_coords(geom, 2, stream(1, 2))
    snapped = PatchCoords(coords=np.round(pc.coords), origin="random")
    tb = extract_patches(img, snapped, 8)
    for k, (z0, z1) in enumerate(snapped.coords):
        i, j = int(z0) * 8, int(z1) * 8
        assert np.array_equal(tb.pixels[k], img[:, i:i + 8, j:j + 8])


def test_extract_batch_matches_single():
    rng = np.random.default_rng(6)
    imgs = rng.normal(size=(3, 2, 24, 24)).astype(np.float32)
    geom = PatchGeometry(24, 24, 8)
    coords = np.stack([random_coords(geom, 1, stream(i, 2)).coords
                       for i in range(3)])
    batch = extract_batch(imgs, coords, 8)
    for b in range(3):
        pc = PatchCoords(coords=coords[b], origin="random")
        single = extract_patches(imgs[b], pc, 8)
        assert np.array_equal(batch[b], single.pixels)


def test_extract_rejects_out_of_bounds():
    img = np.zeros((1, 16, 16))
    bad = PatchCoords(coords=np.array([[3.2, 0.0]]), origin="random")
    with pytest.raises(OutOfBounds):
        extract_patches(img, bad, 4)  # rows_max = 3


def test_bound_safety_bulk():
    # 1e6 coordinates across awkward geometries never leave the image
    rng = np.random.default_rng(7)
    total = 0
    while total < 1_000_000:
        p = int(rng.choice([3, 5, 7, 8]))
        h = int(rng.integers(p, 5 * p))
        w = int(rng.integers(p, 5 * p))
        geom = PatchGeometry(h, w, p)
        n = 20_000
        pc = PatchCoords(coords=rng.uniform(0, 1, (n, 2))
                         * [geom.rows_max, geom.cols_max], origin="random")
        top = pc.coords * p
        assert np.all(top >= 0)
        assert np.all(top[:, 0] + p - 1 <= h - 1 + 1e-9)
        assert np.all(top[:, 1] + p - 1 <= w - 1 + 1e-9)
        # the extractor itself must accept them
        img = np.zeros((1, h, w))
        extract_patches(img, pc, p)
        total += n


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(1, 4), st.integers(1, 4),
       st.integers(0, 2 ** 31 - 1))
def test_random_coords_in_range_property(p, hr, wr, seed):
    h, w = p * hr + (seed % p), p * wr + (seed % 3)
    if h < p or w < p:
        return
    geom = PatchGeometry(h, w, p)
    pc = random_coords(geom, 3, stream(seed, 2))
    assert np.all(pc.coords[:, 0] >= 0) and np.all(pc.coords[:, 1] >= 0)
    assert np.all(pc.coords[:, 0] <= geom.rows_max)
    assert np.all(pc.coords[:, 1] <= geom.cols_max)
    extract_patches(np.zeros((1, h, w)), pc, p)  # must not raise
