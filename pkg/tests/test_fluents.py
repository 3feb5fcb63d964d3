import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from staog.fluents import (Codebook, FluentModel, classify, concat_descriptors, confusion_and_mp,
                           extract_tps, kmeans, load_fluent_model, power_l2, save_fluent_model,
                           tps_layout, train_codebook, train_fluent, vlad_encode, vlad_raw)
from staog.tracking import PartTrack, Proposal


def track(part, boxes, statuses):
    props = [Proposal(f, b, s, 0.0, part) for f, (b, s) in enumerate(zip(boxes, statuses))]
    return PartTrack(part, props, 0.0)


# --------------------------------------------------------------------- TPS


def test_status_one_hot_blocks():
    tr = {"hood": track("hood", [(0, 0, 8, 8)] * 2, ["close", "close"])}
    x = extract_tps(tr)
    start, z, _ = tps_layout(["hood"])["hood"]
    assert z == 3
    np.testing.assert_array_equal(x[0, start:start + 3], [0, 1, 0])
    phi2 = x[0, start + 3:start + 12]
    assert phi2[4] == 1 and phi2.sum() == 1


def test_stationary_boxes_zero_displacement():
    tr = {"hood": track("hood", [(3, 4, 8, 6)] * 3, ["open"] * 3)}
    x = extract_tps(tr)
    assert not x[:, 12:14].any()


def test_blinking_light_intensity_difference():
    frames = [np.full((20, 20), 0.9), np.full((20, 20), 0.1)]
    tr = {"lh_light": track("lh_light", [(4, 4, 6, 6)] * 2, ["on", "off"])}
    x = extract_tps(tr, frames)
    assert x[0, 14] == pytest.approx(-0.8, abs=1e-12)
    assert tps_layout(["lh_light"])["__dim__"] == 15


def test_missing_frame_in_track():
    a = track("hood", [(0, 0, 4, 4)] * 3, ["open"] * 3)
    b = track("trunk", [(0, 0, 4, 4)] * 2, ["open"] * 2)
    with pytest.raises(ValueError):
        extract_tps({"hood": a, "trunk": b})


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(["open", "close", "occluded"]), min_size=2, max_size=6),
       st.lists(st.sampled_from(["on", "off", "occluded"]), min_size=6, max_size=6))
def test_one_hot_blocks_sum_to_one(hood, light):
    n = len(hood)
    tr = {"hood": track("hood", [(0, 0, 4, 4)] * n, hood),
          "lh_light": track("lh_light", [(0, 0, 4, 4)] * n, light[:n])}
    parts = ["hood", "lh_light"]
    x = extract_tps(tr, parts=parts)
    lay = tps_layout(parts)
    for p in parts:
        s, z, _ = lay[p]
        np.testing.assert_array_equal(x[:, s:s + z].sum(1), 1.0)
        np.testing.assert_array_equal(x[:, s + z:s + z + z * z].sum(1), 1.0)


# -------------------------------------------------------------------- VLAD


def naive_vlad(X, C):
    V = np.zeros_like(C)
    for x in X:
        j = min(range(len(C)), key=lambda i: (float(np.sum((x - C[i]) ** 2)), i))
        V[j] += x - C[j]
    return V.ravel()


def test_locals_on_centroids_encode_to_zero():
    C = np.array([[0.0, 1.0], [2.0, 3.0]])
    v = vlad_encode(np.array([[0.0, 1.0], [2.0, 3.0], [0.0, 1.0]]), Codebook(C))
    assert not v.any()


def test_single_residual():
    x, c = np.array([[4.0, -1.0, 0.25]]), np.array([[0.0, 0.0, 0.0]])
    ref = np.sign(x[0]) * np.sqrt(np.abs(x[0]))
    np.testing.assert_allclose(vlad_encode(x, Codebook(c)), ref / np.linalg.norm(ref), atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_vlad_matches_naive_accumulation(seed):
    rng = np.random.default_rng(seed)
    X, C = rng.normal(size=(20, 4)), rng.normal(size=(3, 4))
    ref = naive_vlad(X, C)
    np.testing.assert_array_equal(vlad_raw(X, Codebook(C)), ref)
    np.testing.assert_allclose(vlad_encode(X, Codebook(C)), power_l2(ref), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_vlad_translation_covariance(seed):
    rng = np.random.default_rng(seed)
    X = rng.integers(-16, 17, (15, 3)) / 4  # dyadic grid keeps the shift exact
    C = rng.integers(-16, 17, (4, 3)) / 4
    t = rng.integers(-16, 17, 3) / 4
    a = vlad_encode(X, Codebook(C))
    b = vlad_encode(X + t, Codebook(C + t))
    np.testing.assert_array_equal(a, b)


def test_vlad_dimension_mismatch():
    with pytest.raises(ValueError):
        vlad_encode(np.zeros((2, 3)), Codebook(np.zeros((1, 4))))


# ---------------------------------------------------------------- codebook


def test_k_equals_distinct_points_zero_inertia():
    X = np.array([[0.0, 0], [1, 0], [0, 5], [7, 7]])
    C, lab, inertia = kmeans(X, 4, seed=1)
    assert inertia == 0.0
    np.testing.assert_array_equal(np.sort(C, axis=0), np.sort(X, axis=0))


def test_two_blobs():
    rng = np.random.default_rng(0)
    A = rng.normal([0, 0], 0.2, (30, 2))
    B = rng.normal([10, 5], 0.2, (30, 2))
    cb = train_codebook(np.vstack([A, B]), 2, pca_dim=None)
    cents = sorted(map(tuple, cb.centroids))
    np.testing.assert_allclose(cents[0], A.mean(0), atol=0.2)
    np.testing.assert_allclose(cents[1], B.mean(0), atol=0.2)


def test_full_pca_is_rotation():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(25, 5))
    cb = train_codebook(X, 3, pca_dim=5)
    np.testing.assert_allclose(cb.basis.T @ cb.basis, np.eye(5), atol=1e-8)
    Z = cb.project(X)
    d = lambda M: np.linalg.norm(M[:, None] - M[None], axis=-1)
    np.testing.assert_allclose(d(Z), d(X), atol=1e-8)


def test_half_dimension_default():
    X = np.random.default_rng(2).normal(size=(30, 8))
    assert train_codebook(X, 2).basis.shape == (8, 4)


def test_fewer_points_than_k():
    with pytest.raises(ValueError):
        train_codebook(np.zeros((3, 2)), 2)


# -------------------------------------------------------------- classifier


def test_one_dimensional_separable():
    X = np.array([[-3.0], [-2.0], [-1.0], [1.0], [2.0], [3.0]])
    y = ["open_hood"] * 3 + ["close_hood"] * 3
    m = train_fluent(X, y)
    assert [classify(m, x)[0] for x in X] == y


def test_zero_model_ties_to_first_class():
    m = FluentModel(["a", "b", "c"], np.zeros((3, 4)), np.zeros(3))
    assert classify(m, np.zeros(4))[0] == "a"


def test_class_permutation_consistent():
    rng = np.random.default_rng(3)
    W, b = rng.normal(size=(3, 5)), rng.normal(size=3)
    m = FluentModel(["a", "b", "c"], W, b)
    perm = [2, 0, 1]
    mp = FluentModel([m.labels[i] for i in perm], W[perm], b[perm])
    for _ in range(20):
        x = rng.normal(size=5)
        la, sa = classify(m, x)
        lb, sb = classify(mp, x)
        assert la == lb
        np.testing.assert_array_equal(sa[perm], sb)


def test_single_class_rejected():
    with pytest.raises(ValueError):
        train_fluent(np.zeros((3, 2)), ["open_hood"] * 3)


def test_classifier_determinism():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(12, 3))
    y = ["open_hood", "close_hood", "open_trunk"] * 4
    a, b = train_fluent(X, y, seed=9), train_fluent(X, y, seed=9)
    assert a.weights.tobytes() == b.weights.tobytes() and a.biases.tobytes() == b.biases.tobytes()


def test_model_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    m = FluentModel(["a", "b"], rng.normal(size=(2, 3)), rng.normal(size=2),
                    Codebook(rng.normal(size=(2, 2)), rng.normal(size=3), rng.normal(size=(3, 2))),
                    ["hood"])
    save_fluent_model(m, tmp_path / "f.json")
    back = load_fluent_model(tmp_path / "f.json")
    np.testing.assert_array_equal(back.weights, m.weights)
    np.testing.assert_array_equal(back.codebook.basis, m.codebook.basis)
    assert back.labels == m.labels and back.parts == ["hood"]


# --------------------------------------------------------------- evaluation


def test_perfect_predictions():
    M, mp = confusion_and_mp([0, 1, 2, 1], [0, 1, 2, 1], 3)
    np.testing.assert_array_equal(M, np.eye(3))
    assert mp == 1.0


def test_all_class_zero_balanced():
    _, mp = confusion_and_mp([0, 0, 0, 0], [0, 0, 1, 1], 2)
    assert mp == 0.5


def test_label_out_of_range():
    with pytest.raises(ValueError):
        confusion_and_mp([3], [0], 3)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=30))
def test_mp_bounds(pairs):
    pred, truth = zip(*pairs)
    M, mp = confusion_and_mp(pred, truth, 4)
    assert 0 <= mp <= 1
    pop = np.isin(np.arange(4), truth)
    assert (mp == 1) == bool(np.all(np.diag(M)[pop] == 1))


# ------------------------------------------------------------------- fusion


def test_concat_with_zero_vector():
    a = np.array([3.0, -4.0])
    np.testing.assert_allclose(concat_descriptors(a, np.zeros(3)), np.r_[power_l2(a), 0, 0, 0])


def test_concat_unit_norms():
    a, b = np.array([1.0, 0.0]), np.array([0.0, 0.6, 0.8])
    v = concat_descriptors(a, b, normalize=False)
    assert np.linalg.norm(v) == pytest.approx(np.sqrt(2))
    assert np.linalg.norm(concat_descriptors(a, b)) == pytest.approx(1.0)


def test_fusion_with_informative_side_feature():
    rng = np.random.default_rng(6)
    labels = ["open_hood", "close_hood"]

    def make(n):
        y = rng.integers(0, 2, n)
        tps = rng.normal(size=(n, 6))  # carries no label information
        side = np.c_[np.where(y == 1, 1.0, -1.0), rng.normal(0, 0.2, (n, 2))]
        return tps, side, [labels[i] for i in y]

    t_tr, s_tr, y_tr = make(40)
    t_te, s_te, y_te = make(40)
    acc = lambda m, X, y: np.mean([classify(m, x)[0] == t for x, t in zip(X, y)])
    alone = train_fluent(t_tr, y_tr, classes=labels)
    fused_tr = [concat_descriptors(a, b) for a, b in zip(t_tr, s_tr)]
    fused_te = [concat_descriptors(a, b) for a, b in zip(t_te, s_te)]
    fused = train_fluent(fused_tr, y_tr, classes=labels)
    assert acc(fused, fused_te, y_te) > acc(alone, t_te, y_te)
    assert acc(fused, fused_te, y_te) >= 0.9
