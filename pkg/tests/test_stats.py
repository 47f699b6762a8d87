import logging
import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from geogan.exceptions import ValidationError
from geogan.stats import (StatsRecord, UrbanFormStats, box_counts, built_area_fraction, city_stats,
                          compare_stats, fractal_dimension, label_patches, patch_size_distribution,
                          pearson_r2)

SIERPINSKI = math.log(3) / math.log(2)


def flood_fill(fg, connectivity):
    """Independent BFS labelling: returns the set of components as frozensets."""
    h, w = fg.shape
    if connectivity == 4:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        steps = [(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1) if (di, dj) != (0, 0)]
    seen = np.zeros_like(fg, dtype=bool)
    comps = set()
    for i in range(h):
        for j in range(w):
            if not fg[i, j] or seen[i, j]:
                continue
            comp, queue = [], deque([(i, j)])
            seen[i, j] = True
            while queue:
                a, b = queue.popleft()
                comp.append((a, b))
                for di, dj in steps:
                    u, v = a + di, b + dj
                    if 0 <= u < h and 0 <= v < w and fg[u, v] and not seen[u, v]:
                        seen[u, v] = True
                        queue.append((u, v))
            comps.add(frozenset(comp))
    return comps


def components_of(lab):
    return {frozenset(zip(*np.nonzero(lab.labels == k))) for k in range(1, lab.n_patches + 1)}


def sierpinski(side=512, depth=8):
    """Pascal's triangle mod 2 at ``depth`` levels, each cell a (side >> depth)-pixel square."""
    cell = side >> depth
    i, j = np.mgrid[0:side, 0:side] // cell
    return ((i & j) == 0).astype(float)


# -- built-area fraction ----------------------------------------------------------

def test_built_area_fraction_cases():
    assert built_area_fraction(np.zeros((4, 4))) == 0
    assert built_area_fraction(np.ones((4, 4))) == 1
    half = np.zeros((4, 4))
    half[:2] = 1
    assert built_area_fraction(half) == 0.5
    with pytest.raises(ValidationError):
        built_area_fraction(np.zeros((0,)))


@given(st.integers(0, 2 ** 32 - 1), st.floats(0, 1))
def test_built_area_fraction_is_linear(seed, c):
    m = np.random.default_rng(seed).random((8, 8))
    assert built_area_fraction(c * m) == pytest.approx(c * built_area_fraction(m), abs=1e-12)


# -- labelling -----------------------------------------------------------------------

def test_diagonal_pixels():
    m = np.array([[1, 0], [0, 1]])
    assert label_patches(m, connectivity=4).n_patches == 2
    assert label_patches(m, connectivity=8).n_patches == 1


def test_all_foreground_and_empty():
    lab = label_patches(np.ones((5, 7)))
    assert lab.n_patches == 1 and lab.sizes[0] == 35
    assert label_patches(np.zeros((3, 3))).n_patches == 0


def test_bad_connectivity():
    with pytest.raises(ValidationError):
        label_patches(np.ones((2, 2)), connectivity=6)


@pytest.mark.parametrize("connectivity", [4, 8])
def test_matches_flood_fill_on_1000_grids(connectivity):
    rng = np.random.default_rng(connectivity)
    for _ in range(1000):
        fg = rng.random((16, 16)) < rng.uniform(0.2, 0.7)
        lab = label_patches(fg.astype(float), connectivity=connectivity)
        assert components_of(lab) == flood_fill(fg, connectivity)


@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([4, 8]), st.integers(1, 20), st.integers(1, 20))
def test_labelling_invariants(seed, connectivity, h, w):
    fg = np.random.default_rng(seed).random((h, w)) < 0.5
    lab = label_patches(fg.astype(float), connectivity=connectivity)
    assert components_of(lab) == flood_fill(fg, connectivity)
    assert lab.sizes.sum() == fg.sum()
    assert np.all(np.diff(lab.sizes) <= 0)
    assert np.array_equal(lab.labels > 0, fg)
    # labels are numbered by first pixel in row-major order
    firsts = [np.flatnonzero(lab.labels.ravel() == k)[0] for k in range(1, lab.n_patches + 1)]
    assert firsts == sorted(firsts)


def test_threshold_applies():
    m = np.array([[0.5, 0.6], [0.4, 0.9]])
    lab = label_patches(m)
    assert lab.sizes.tolist() == [2]


# -- histogram ------------------------------------------------------------------------

def _labeling_with_sizes(sizes):
    m = np.zeros((3, 40))
    col = 0
    for s in sizes:
        m[0, col:col + s] = 1
        col += s + 1
    return label_patches(m)


def test_histogram_bins():
    h = patch_size_distribution(_labeling_with_sizes([1, 1, 2, 4]))
    assert h.bin_lo.tolist() == [1, 2, 4]
    assert h.bin_hi.tolist() == [2, 4, 8]
    assert h.counts.tolist() == [2, 1, 1]


def test_histogram_single_and_empty():
    h = patch_size_distribution(_labeling_with_sizes([1]))
    assert h.counts.tolist() == [1] and h.bin_lo.tolist() == [1]
    empty = patch_size_distribution(label_patches(np.zeros((4, 4))))
    assert empty.counts.size == 0 and empty.top_masks == []


def test_top_k_returns_at_most_k():
    lab = _labeling_with_sizes([3, 1, 2])
    h = patch_size_distribution(lab, top_k=10)
    assert len(h.top_masks) == 3
    assert [int(m.sum()) for m in h.top_masks] == [3, 2, 1]


# -- fractal dimension -----------------------------------------------------------------

def test_filled_square():
    assert fractal_dimension(np.ones((256, 256))).dimension == pytest.approx(2.0, abs=0.02)


def test_horizontal_line():
    m = np.zeros((256, 256))
    m[100] = 1
    assert fractal_dimension(m).dimension == pytest.approx(1.0, abs=0.05)


def test_sierpinski_triangle():
    f = fractal_dimension(sierpinski()).dimension
    assert abs(f - SIERPINSKI) < 0.08


@pytest.mark.parametrize("method", ["gliding", "grid"])
def test_both_counting_methods_hit_fixtures(method):
    assert fractal_dimension(np.ones((128, 128)), method=method).dimension == pytest.approx(2.0, abs=0.02)
    assert abs(fractal_dimension(sierpinski(), method=method).dimension - SIERPINSKI) < 0.08
    with pytest.raises(ValidationError):
        fractal_dimension(np.ones((8, 8)), method="fancy")


def _disk(n=128, r=40):
    i, j = np.mgrid[0:n, 0:n]
    return (((i - n / 2) ** 2 + (j - n / 2) ** 2) < r * r).astype(float)


def _line(n=128, row=40):
    m = np.zeros((n, n))
    m[row] = 1
    return m


FIXTURES = {"line": _line(), "disk": _disk(), "sierpinski": sierpinski(256, 7)}


@settings(max_examples=25)
@given(st.sampled_from(sorted(FIXTURES)), st.integers(0, 511), st.integers(0, 511))
def test_toroidal_shift_invariance(name, dy, dx):
    m = FIXTURES[name]
    base = fractal_dimension(m).dimension
    shifted = np.roll(np.roll(m, dy % m.shape[0], 0), dx % m.shape[1], 1)
    assert abs(fractal_dimension(shifted).dimension - base) < 0.05


@settings(max_examples=30)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from(["gliding", "grid"]))
def test_adding_foreground_never_lowers_counts(seed, method):
    rng = np.random.default_rng(seed)
    fg = rng.random((32, 32)) < 0.1
    more = fg | (rng.random((32, 32)) < 0.1)
    _, c0 = box_counts(fg, method=method)
    _, c1 = box_counts(more, method=method)
    assert np.all(c1 >= c0)


def test_too_few_scales_raises_and_padding():
    with pytest.raises(ValidationError):
        fractal_dimension(np.zeros((64, 64)))
    # a non-power-of-two map is zero-padded rather than rejected
    assert 1.5 < fractal_dimension(np.ones((100, 100))).dimension <= 2.0


def test_fractal_result_fields():
    r = fractal_dimension(np.ones((64, 64)))
    assert r.box_sizes.tolist() == [32, 16, 8, 4, 2]
    assert r.used.all() and not r.clamped
    np.testing.assert_allclose(np.exp(r.log_count), r.counts)


# -- R^2 ------------------------------------------------------------------------------

def test_pearson_cases():
    x = np.arange(10.0)
    assert pearson_r2(x, 2 * x + 3) == 1.0
    assert pearson_r2(x, x) == 1.0
    assert pearson_r2(x, -x) == 1.0
    with pytest.raises(ValidationError):
        pearson_r2(x, np.ones(10))
    with pytest.raises(ValidationError):
        pearson_r2([1, 2], [1, 2])
    with pytest.raises(ValidationError):
        pearson_r2([1, 2, 3], [1, 2])


def test_pearson_independent_is_small():
    rng = np.random.default_rng(2024)
    x = rng.standard_normal(1000)
    assert pearson_r2(x, rng.permutation(x)) < 0.05


@given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 100), st.floats(-100, 100))
def test_pearson_affine_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal(20), rng.standard_normal(20)
    assert pearson_r2(a * x + b, y) == pytest.approx(pearson_r2(x, y), rel=1e-9, abs=1e-12)
    assert 0 <= pearson_r2(x, y) <= 1


# -- records and comparison ---------------------------------------------------------------

def _records(maps, source, ids=None):
    ids = ids or [f"c{i}" for i in range(len(maps))]
    return [city_stats(m, cid, source) for cid, m in zip(ids, maps)]


@pytest.fixture(scope="module")
def maps():
    rng = np.random.default_rng(0)
    return [(rng.random((32, 32)) < p).astype(float) for p in (0.2, 0.4, 0.5, 0.6, 0.8)]


def test_city_stats_fields(maps):
    r = city_stats(maps[0], "x", "real", extent_km=100.0)
    assert 0 <= r.a <= 1 and 0 <= r.f <= 2
    assert r.largest_patch_px >= 1 and r.n_patches >= 1
    with pytest.raises(ValidationError):
        city_stats(maps[0], "x", "imagined")


def test_compare_identical_gives_one(maps):
    rep = compare_stats(_records(maps, "real"), _records(maps, "generated"))
    assert rep.r2_a == 1.0 and rep.r2_f == 1.0
    assert rep.summary()["n_pairs"] == 5


def test_compare_constant_generated(maps):
    const = [np.full((32, 32), 0.3)] * 5
    with pytest.raises(ValidationError, match="zero variance"):
        compare_stats(_records(maps, "real"), _records(const, "generated"))
    rep = compare_stats(_records(maps, "real"), _records(const, "generated"), strict=False)
    assert math.isnan(rep.r2_a)
    assert rep.summary()["r2_a"] is None


def test_compare_drops_unpaired_ids(maps, caplog):
    real = _records(maps, "real")
    gen = _records(maps[:4], "generated") + _records(maps[:1], "generated", ["other"])
    with caplog.at_level(logging.WARNING):
        rep = compare_stats(real, gen)
    assert rep.dropped == ["c4", "other"]
    assert "unpaired" in caplog.text


def test_compare_needs_three_pairs(maps):
    with pytest.raises(ValidationError):
        compare_stats(_records(maps[:2], "real"), _records(maps[:2], "generated"))


def test_transformer(maps):
    t = UrbanFormStats()
    out = clone(t).fit_transform(np.stack(maps))
    assert out.shape == (5, 4)
    assert out[:, 0] == pytest.approx([m.mean() for m in maps])
    assert list(t.get_feature_names_out()) == ["a", "f", "n_patches", "largest_patch_px"]
    assert isinstance(_records(maps[:1], "real")[0], StatsRecord)
