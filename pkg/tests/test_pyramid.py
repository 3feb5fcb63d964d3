import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from staog.pyramid import (FeaturePyramid, Frame, build_pyramid, downsample2, estimate_flow,
                           extract_features, filter_response, flow_pyramid, load_pyramid,
                           read_tensor, save_pyramid, write_tensor)


def naive_histogram(img, cell, n_orient=9):
    """Per-pixel loop over central-difference gradients with linear soft binning."""
    gy, gx = np.gradient(img)
    H, W = img.shape
    out = np.zeros((H // cell, W // cell, n_orient))
    bw = np.pi / n_orient
    for y in range(H):
        for x in range(W):
            m = np.hypot(gx[y, x], gy[y, x])
            a = np.arctan2(gy[y, x], gx[y, x]) % np.pi
            p = a / bw - 0.5
            lo = int(np.floor(p))
            f = p - lo
            out[y // cell, x // cell, lo % n_orient] += m * (1 - f)
            out[y // cell, x // cell, (lo + 1) % n_orient] += m * f
    return out


def textured(rng, H, W):
    return rng.random((H, W))


# ---------------------------------------------------------------- features


def test_constant_frame_has_no_orientation_mass():
    f = extract_features(np.full((16, 24), 0.3), 4)
    assert f.shape == (4, 6, 10)
    np.testing.assert_array_equal(f[..., :9], 0.0)
    np.testing.assert_allclose(f[..., 9], 0.3)


def test_vertical_edge_matches_gradient_oracle():
    img = np.zeros((16, 16))
    img[:, 8:] = 0.25  # small contrast keeps cell norms below one (no rescaling)
    f = extract_features(img, 4)
    ref = naive_histogram(img, 4)
    np.testing.assert_allclose(f[..., :9], ref, atol=1e-12)
    # a horizontal gradient sits on the 0 / 180 degree boundary: bins 0 and 8 only
    mass = f[..., :9].sum(axis=(0, 1))
    assert mass[[0, 8]].sum() > 0 and np.allclose(mass[1:8], 0.0)
    assert f[:, 1:3, :9].sum() == pytest.approx(f[..., :9].sum())


def test_rotation_permutes_bins_when_90_degrees_is_whole_bins():
    rng = np.random.default_rng(0)
    img = textured(rng, 16, 16) * 0.05
    n = 8  # 90 degrees = 4 bins of 22.5
    f = extract_features(img, 4, n_orient=n)
    r = extract_features(np.rot90(img), 4, n_orient=n)
    np.testing.assert_allclose(np.rot90(f[..., :n])[..., np.roll(np.arange(n), 4)], r[..., :n],
                               atol=1e-6)


def test_cell_norm_bounded():
    rng = np.random.default_rng(1)
    f = extract_features(textured(rng, 32, 40), 4)
    assert np.linalg.norm(f, axis=2).max() <= 1 + 1e-9


def test_extract_features_errors():
    with pytest.raises(ValueError):
        extract_features(np.zeros((8, 8)), 1)
    with pytest.raises(ValueError):
        extract_features(np.zeros((3, 8)), 4)


def test_frame_clamps_intensities():
    fr = Frame(np.array([[-1.0, 2.0]]))
    assert fr.pixels.min() == 0.0 and fr.pixels.max() == 1.0


# ----------------------------------------------------------------- pyramid


def test_pyramid_geometric_halving():
    p = build_pyramid(np.random.default_rng(0).random((64, 64)), 8, 1, 2)
    assert [p.dims(k) for k in range(len(p))] == [(8, 8), (4, 4), (2, 2)]


def test_pyramid_interval_two_scales():
    p = build_pyramid(np.random.default_rng(0).random((64, 64)), 4, 2, 2)
    np.testing.assert_allclose(p.scales[:3], [1, 2 ** -0.5, 0.5])
    assert all(a > b for a, b in zip(p.scales, p.scales[1:]))


@settings(max_examples=20, deadline=None)
@given(st.integers(8, 50), st.integers(8, 50), st.sampled_from([2, 4, 8]))
def test_level0_dims(h, w, cell):
    p = build_pyramid(np.zeros((h, w)), cell, 1, 1)
    assert p.dims(0) == (-(-w // cell), -(-h // cell))


def test_next_octave_matches_reextraction():
    rng = np.random.default_rng(2)
    img = np.kron(rng.random((8, 8)), np.ones((8, 8)))  # piecewise constant
    p = build_pyramid(img, 4, 1, 2)
    again = extract_features(downsample2(img), 4)
    assert np.abs(p.levels[1] - again).mean() <= 1e-3


# -------------------------------------------------------------------- flow


def test_identical_frames_zero_flow():
    img = textured(np.random.default_rng(3), 32, 32)
    np.testing.assert_array_equal(estimate_flow(img, img, 4, 1, 2), 0.0)


def test_constant_frames_zero_flow_by_tie_break():
    img = np.full((32, 32), 0.5)
    np.testing.assert_array_equal(estimate_flow(img, img, 4, 1, 2), 0.0)


def sad_oracle(a, b, cell, r, cx, cy):
    """Exhaustive mean-absolute-difference search for one interior cell."""
    best, arg = np.inf, None
    cands = sorted(((dx, dy) for dx in range(-r * cell, r * cell + 1)
                    for dy in range(-r * cell, r * cell + 1)),
                   key=lambda d: (d[0] ** 2 + d[1] ** 2, d[0], d[1]))
    for dx, dy in cands:
        y0, x0 = cy * cell, cx * cell
        pa = a[y0:y0 + cell, x0:x0 + cell]
        pb = b[y0 + dy:y0 + dy + cell, x0 + dx:x0 + dx + cell]
        if y0 + dy < 0 or x0 + dx < 0 or pb.shape != pa.shape:
            continue
        c = np.abs(pa - pb).mean()
        if c < best:
            best, arg = c, (dx / cell, dy / cell)
    return arg


def test_shift_three_cells_right():
    rng = np.random.default_rng(4)
    big = textured(rng, 48, 64)
    a = big[:, 12:52]
    b = big[:, 0:40]  # content moves 3 cells (12 px) right
    flow = estimate_flow(a, b, 4, 1, 3)
    for cy in range(3, 9):  # cells whose whole search window is inside the frame
        for cx in range(3, 7):
            assert tuple(flow[cy, cx]) == (3.0, 0.0)
            assert sad_oracle(a, b, 4, 3, cx, cy) == (3.0, 0.0)


def test_translation_inverse_symmetry():
    rng = np.random.default_rng(5)
    big = textured(rng, 48, 48)
    a, b = big[4:36, 8:40], big[0:32, 4:36]
    fab = estimate_flow(a, b, 4, 1, 2)
    fba = estimate_flow(b, a, 4, 1, 2)
    np.testing.assert_array_equal(fab[2:-2, 2:-2], -fba[2:-2, 2:-2])


def test_flow_size_mismatch():
    with pytest.raises(ValueError):
        estimate_flow(np.zeros((8, 8)), np.zeros((8, 12)))


def _geom(W, H, levels):
    grids = [np.zeros((max(1, H >> k), max(1, W >> k), 1)) for k in range(levels)]
    return FeaturePyramid(grids, [2.0 ** -k for k in range(levels)], 4, 1)


def test_uniform_flow_halves_per_octave():
    fp = flow_pyramid(np.tile([4.0, 0.0], (8, 8, 1)), _geom(8, 8, 3))
    np.testing.assert_allclose(fp.levels[1], np.tile([2.0, 0.0], (4, 4, 1)))
    np.testing.assert_allclose(fp.levels[2], np.tile([1.0, 0.0], (2, 2, 1)))


def test_zero_flow_all_levels():
    fp = flow_pyramid(np.zeros((8, 8, 2)), _geom(8, 8, 3))
    assert all(not lv.any() for lv in fp.levels)


def test_coarse_flow_is_scaled_child_mean():
    rng = np.random.default_rng(6)
    f0 = rng.normal(size=(8, 12, 2))
    fp = flow_pyramid(f0, _geom(12, 8, 2))
    ref = f0.reshape(4, 2, 6, 2, 2).mean(axis=(1, 3)) * 0.5
    np.testing.assert_allclose(fp.levels[1], ref, atol=1e-12)


# ------------------------------------------------------------------ filter


def naive_correlation(grid, t):
    H, W, _ = grid.shape
    h, w, _ = t.shape
    out = np.zeros((H - h + 1, W - w + 1))
    for y in range(H - h + 1):
        for x in range(W - w + 1):
            out[y, x] = np.sum(grid[y:y + h, x:x + w] * t)
    return out


def test_ones_template_sums_channels():
    g = np.random.default_rng(7).random((5, 6, 3))
    np.testing.assert_allclose(filter_response(g, np.ones((1, 1, 3))), g.sum(axis=2))


def test_zero_template():
    g = np.random.default_rng(7).random((5, 6, 3))
    assert not filter_response(g, np.zeros((2, 2, 3))).any()


def test_random_template_matches_naive():
    rng = np.random.default_rng(8)
    g, t = rng.normal(size=(8, 8, 4)), rng.normal(size=(3, 3, 4))
    np.testing.assert_allclose(filter_response(g, t), naive_correlation(g, t), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(-4, 4), st.integers(-4, 4))
def test_filter_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    g = rng.integers(-8, 9, (6, 7, 2)) / 8
    t1, t2 = rng.integers(-8, 9, (2, 3, 2)) / 8, rng.integers(-8, 9, (2, 3, 2)) / 8
    lhs = filter_response(g, a * t1 + b * t2)
    rhs = a * filter_response(g, t1) + b * filter_response(g, t2)
    np.testing.assert_array_equal(lhs, rhs)  # dyadic values: exact


def test_template_larger_than_grid():
    with pytest.raises(ValueError):
        filter_response(np.zeros((2, 2, 1)), np.zeros((3, 1, 1)))


# ------------------------------------------------------------------ tensors


def test_tensor_header_and_round_trip(tmp_path):
    a = np.random.default_rng(9).random((3, 5, 2)).astype(np.float32)
    write_tensor(tmp_path / "t.stat", a)
    raw = (tmp_path / "t.stat").read_bytes()
    assert raw[:4] == b"STAT" and np.frombuffer(raw[4:20], "<u4").tolist() == [1, 5, 3, 2]
    np.testing.assert_array_equal(read_tensor(tmp_path / "t.stat"), a)


def test_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(ValueError):
        read_tensor(tmp_path / "x")


def test_pyramid_directory_round_trip(tmp_path):
    p = build_pyramid(np.random.default_rng(0).random((32, 32)), 4)
    save_pyramid(tmp_path / "p", p)
    q = load_pyramid(tmp_path / "p")
    assert q.scales == p.scales
    for a, b in zip(p.levels, q.levels):
        np.testing.assert_allclose(a, b, atol=1e-6)
