import numpy as np
import pytest

from latsig.grid import (
    AggregatedData,
    AggregationScheme,
    Grid2D,
    aggregate,
    drop_blocks,
    identity_scheme,
    observed_data,
    read_grid_csv,
    read_scheme_json,
    regular_blocks,
    restrict_to_observed,
    write_grid_csv,
    write_scheme_json,
)


def test_identity_scheme_is_identity_on_values():
    rng = np.random.default_rng(1)
    g = Grid2D(4, 6, rng.standard_normal((4, 6)))
    out = aggregate(g, identity_scheme(4, 6))
    np.testing.assert_array_equal(out.values, g.flat)


def test_single_block_global_mean():
    g = Grid2D.from_flat(2, 2, [1, 2, 3, 4])
    scheme = AggregationScheme(2, 2, (np.arange(4),))
    assert aggregate(g, scheme).values.tolist() == [2.5]


def test_two_row_blocks():
    g = Grid2D.from_flat(2, 2, [1, 2, 3, 4])
    scheme = AggregationScheme(2, 2, (np.array([0, 1]), np.array([2, 3])))
    assert aggregate(g, scheme).values.tolist() == [1.5, 3.5]


def test_aggregate_shape_mismatch():
    g = Grid2D.from_flat(2, 2, [1, 2, 3, 4])
    with pytest.raises(ValueError):
        aggregate(g, identity_scheme(4, 4))


def test_empty_block_rejected():
    with pytest.raises(ValueError):
        AggregationScheme(2, 2, (np.array([], dtype=int),))


def test_out_of_range_block_rejected():
    with pytest.raises(ValueError):
        AggregationScheme(2, 2, (np.array([4]),))


@pytest.mark.parametrize(
    "n1,n2,b1,b2,expected_K",
    [(64, 64, 4, 4, 256), (64, 64, 8, 8, 64), (64, 64, 1, 1, 4096)],
)
def test_regular_blocks_counts(n1, n2, b1, b2, expected_K):
    scheme = regular_blocks(n1, n2, b1, b2)
    assert scheme.K == expected_K
    assert scheme.is_regular
    # blocks tile the grid exactly once
    all_idx = np.sort(np.concatenate(scheme.blocks))
    np.testing.assert_array_equal(all_idx, np.arange(n1 * n2))


def test_regular_blocks_row_major_tile_order():
    scheme = regular_blocks(4, 4, 2, 2)
    assert scheme.blocks[0].tolist() == [0, 1, 4, 5]
    assert scheme.blocks[1].tolist() == [2, 3, 6, 7]
    assert scheme.blocks[2].tolist() == [8, 9, 12, 13]


def test_regular_blocks_rejects_nondivisible():
    with pytest.raises(ValueError):
        regular_blocks(64, 64, 3, 4)


def test_drop_corner_tiles_from_8x8_scheme():
    # upper-right 24x24 pixel corner of a 64x64 grid = 3x3 tiles of the
    # 8x8-block scheme, i.e. 9/64 of the area; 55 tiles survive
    scheme = regular_blocks(64, 64, 8, 8)
    t2 = 64 // 8
    removed = [i * t2 + j for i in range(3) for j in range(t2 - 3, t2)]
    out = drop_blocks(scheme, removed)
    assert out.K == 55
    kept = np.concatenate(out.blocks)
    rows, cols = kept // 64, kept % 64
    assert not np.any((rows < 24) & (cols >= 40))


def test_drop_nothing_is_identity():
    scheme = regular_blocks(8, 8, 2, 2)
    out = drop_blocks(scheme, [])
    assert out.K == scheme.K
    for a, b in zip(out.blocks, scheme.blocks):
        np.testing.assert_array_equal(a, b)


def test_drop_all_blocks_rejected():
    scheme = regular_blocks(4, 4, 2, 2)
    with pytest.raises(ValueError):
        drop_blocks(scheme, range(scheme.K))


def test_random_drop_respects_protected_square():
    # remove 9 random tiles from the 8x8 scheme while protecting the tiles
    # covering the central 10x10 pixel square; pure set arithmetic oracle
    scheme = regular_blocks(64, 64, 8, 8)
    protected_pixels = set(
        int(r * 64 + c) for r in range(27, 37) for c in range(27, 37)
    )
    protected_tiles = {
        k for k, b in enumerate(scheme.blocks)
        if protected_pixels & set(b.tolist())
    }
    rng = np.random.default_rng(7)
    candidates = sorted(set(range(scheme.K)) - protected_tiles)
    removed = rng.choice(candidates, size=9, replace=False)
    out = drop_blocks(scheme, removed)
    assert out.K == 55
    surviving = {tuple(b.tolist()) for b in out.blocks}
    for k in protected_tiles:
        assert tuple(scheme.blocks[k].tolist()) in surviving


def test_aggregate_is_linear():
    rng = np.random.default_rng(3)
    scheme = AggregationScheme(
        4, 4,
        (np.array([0, 1, 5]), np.array([5, 6]), np.array([10, 11, 14, 15])),
    )  # overlapping, non-covering
    z1 = rng.standard_normal(16)
    z2 = rng.standard_normal(16)
    a, b = rng.standard_normal(2)
    lhs = aggregate(Grid2D.from_flat(4, 4, a * z1 + b * z2), scheme).values
    rhs = (
        a * aggregate(Grid2D.from_flat(4, 4, z1), scheme).values
        + b * aggregate(Grid2D.from_flat(4, 4, z2), scheme).values
    )
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_constant_grid_aggregates_exactly():
    scheme = regular_blocks(8, 8, 4, 2)
    g = Grid2D(8, 8, np.full((8, 8), 3.25))
    out = aggregate(g, scheme)
    assert np.all(out.values == 3.25)


def test_h_matrix_matches_block_means():
    rng = np.random.default_rng(5)
    scheme = regular_blocks(8, 8, 2, 4)
    v = rng.standard_normal(64)
    np.testing.assert_allclose(
        scheme.h_matrix() @ v, scheme.block_means(v), atol=1e-14
    )


def test_grid_csv_roundtrip_with_na(tmp_path):
    rng = np.random.default_rng(11)
    vals = rng.standard_normal((5, 3))
    vals[1, 2] = np.nan
    vals[4, 0] = np.nan
    g = Grid2D(5, 3, vals)
    path = tmp_path / "g.csv"
    write_grid_csv(g, path)
    back = read_grid_csv(path)
    assert back.shape == (5, 3)
    np.testing.assert_allclose(back.values[np.isfinite(vals)], vals[np.isfinite(vals)])
    assert np.isnan(back.values[1, 2]) and np.isnan(back.values[4, 0])


def test_grid_csv_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("not,a,header\n1,2\n")
    with pytest.raises(ValueError):
        read_grid_csv(path)


def test_scheme_json_roundtrip(tmp_path):
    scheme = drop_blocks(regular_blocks(8, 8, 4, 4), [1])
    path = tmp_path / "s.json"
    write_scheme_json(scheme, path)
    back = read_scheme_json(path)
    assert back.K == scheme.K
    for a, b in zip(back.blocks, scheme.blocks):
        np.testing.assert_array_equal(a, b)


def test_observed_data_from_na_grid():
    vals = np.arange(16.0).reshape(4, 4)
    vals[0, 0] = np.nan
    g = Grid2D(4, 4, vals)
    data = observed_data(g)
    assert data.K == 15
    assert 0 not in np.concatenate(data.scheme.blocks)
    np.testing.assert_array_equal(data.values, np.arange(1.0, 16.0))


def test_restrict_to_observed_partial_tiles():
    scheme = regular_blocks(4, 4, 2, 2)
    mask = np.ones(16, dtype=bool)
    mask[0] = False  # chip one pixel off the first tile
    out = restrict_to_observed(scheme, mask)
    assert out.K == 4
    assert out.blocks[0].tolist() == [1, 4, 5]
    assert not out.is_regular  # partial tile loses the fast-path metadata


def test_aggregated_data_length_check():
    scheme = regular_blocks(4, 4, 2, 2)
    with pytest.raises(ValueError):
        AggregatedData(scheme, np.zeros(3))
