import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from staog import oracles
from staog.graph import (AndNode, FrameParse, GraphBuilder, ParseGraph, ParseTree, from_dict,
                         deformation_feature, joint_feature, load_model, pack_weights,
                         save_model, score_graph, score_tree, temporal_feature, to_dict,
                         tree_feature, unpack_weights, validate_graph, weight_layout)


def small_graph(rng=None, linked=False):
    rng = rng or np.random.default_rng(0)
    return oracles.random_graph(rng, channels=2, branches=2, max_parts=2, max_status=2,
                                linked=linked)


def dfs_has_cycle(g):
    """Reference: recursive colouring over the raw child lists."""
    state = {}

    def visit(v):
        state[v] = 1
        for c in g.nodes[v].children:
            if c >= len(g.nodes):
                continue
            if state.get(c) == 1 or (c not in state and visit(c)):
                return True
        state[v] = 2
        return False

    return any(v not in state and visit(v) for v in range(len(g.nodes)))


# ---------------------------------------------------------------- validate


def test_well_formed_graph_has_no_violations():
    assert validate_graph(small_graph()) == []


def test_missing_child_is_named():
    g = small_graph()
    a = next(n for n in g.nodes if isinstance(n, AndNode))
    a.children.append(999)
    v = [x for x in validate_graph(g) if x.rule == "missing-child"]
    assert len(v) == 1 and v[0].node == a.id and "999" in v[0].detail


def test_cycle_detected_like_dfs_oracle():
    g = small_graph()
    assert not dfs_has_cycle(g)
    a = next(n for n in g.nodes if isinstance(n, AndNode))
    a.children.append(g.root)  # root -> ... -> a -> root
    assert dfs_has_cycle(g)
    cyc = [x for x in validate_graph(g) if x.rule == "cycle"]
    assert len(cyc) == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_cycle_rule_agrees_with_oracle(seed):
    rng = np.random.default_rng(seed)
    g = small_graph(rng)
    ands = [n for n in g.nodes if isinstance(n, AndNode)]
    if rng.random() < 0.5:
        ands[int(rng.integers(len(ands)))].children.append(int(rng.integers(len(g.nodes))))
    found = any(x.rule == "cycle" for x in validate_graph(g))
    assert found == dfs_has_cycle(g)


def test_negative_quadratic_deformation_is_rejected():
    g = small_graph()
    g.terminals[0].deformation[1] = -0.5
    assert any(x.rule == "deformation-sign" for x in validate_graph(g))


def test_temporal_id_on_terminal_is_rejected():
    g = small_graph()
    g.temporal = [g.terminals[0].id]
    assert any(x.rule == "temporal-kind" for x in validate_graph(g))


# ---------------------------------------------------------------- features


@pytest.mark.parametrize("d,want", [((0, 0), (0, 0, 0, 0)), ((2, -1), (2, 4, -1, 1)),
                                    ((-3, 2), (-3, 9, 2, 4))])
def test_deformation_feature(d, want):
    np.testing.assert_array_equal(deformation_feature(*d), want)


@pytest.mark.parametrize("l,ln,F,want", [((3, 3), (3, 3), (0, 0), 0.0),
                                         ((5, 5), (7, 6), (2, 1), 0.0),
                                         ((5, 5), (5, 5), (3, 4), 25.0)])
def test_temporal_feature(l, ln, F, want):
    assert temporal_feature(l, ln, F) == want


# ------------------------------------------------------------------ layout


def test_pack_unpack_round_trip():
    g = small_graph()
    v = pack_weights(g)
    w = np.random.default_rng(1).normal(size=v.size)
    unpack_weights(g, w)
    np.testing.assert_array_equal(pack_weights(g), w)


def test_layout_length_two_terminals_one_bias():
    b = GraphBuilder(2)
    t1 = b.terminal((2, 2))
    t2 = b.terminal((2, 2))
    root = b.and_([t1, t2])
    g = b.build(root)
    assert weight_layout(g).size == 2 * (8 + 4) + 1 == 25


def test_single_appearance_perturbation_changes_one_coordinate():
    g = small_graph()
    v0 = pack_weights(g)
    g.terminals[1].appearance.flat[0] += 1.0
    assert np.count_nonzero(pack_weights(g) != v0) == 1


def test_unpack_rejects_wrong_length():
    g = small_graph()
    with pytest.raises(ValueError):
        unpack_weights(g, np.zeros(3))


def test_layout_order_terminals_temporal_biases():
    g = small_graph(linked=True)
    lay = weight_layout(g)
    last_term = max(s.stop for s in lay.deformation.values())
    assert min(lay.temporal.values()) == last_term
    assert min(lay.bias.values()) == max(lay.temporal.values()) + 1
    assert max(lay.bias.values()) == lay.size - 1


# ---------------------------------------------------------- score duality


def _random_instance(rng, linked):
    g = small_graph(rng, linked)
    T = 3
    feats = [oracles.random_pyramid(rng, 7, 6, 2, levels=2) for _ in range(T)]
    flows = [oracles.random_flow(rng, feats[i], 1) for i in range(T - 1)] + [None]
    pg = ParseGraph([oracles.random_parse_tree(rng, g, (feats[i], feats[i + 1]), i)
                     for i in range(T - 1)])
    return g, pg, feats, flows


def test_zero_weights_score_zero():
    rng = np.random.default_rng(3)
    g, pg, feats, flows = _random_instance(rng, True)
    unpack_weights(g, np.zeros(weight_layout(g).size))
    assert float(pack_weights(g) @ joint_feature(g, pg, feats, flows)) == 0.0


def test_single_terminal_feature_is_cell_window():
    b = GraphBuilder(2)
    t = b.terminal((1, 1), np.ones((1, 1, 2)))
    a = b.and_([t])
    root = b.or_([a])
    g = b.build(root)
    pyr = oracles.random_pyramid(np.random.default_rng(0), 4, 4, 2, levels=1)
    fp = FrameParse({root: (0, 2, 1), a: (0, 2, 1), t: (0, 2, 1)}, {root: 0})
    pt = ParseTree(0, (fp, fp))
    phi = tree_feature(g, pt, (pyr, pyr))
    lay = weight_layout(g)
    np.testing.assert_array_equal(phi[lay.appearance[t]], 2 * pyr.levels[0][1, 2])
    np.testing.assert_array_equal(phi[lay.deformation[t]], 0.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.booleans())
def test_dot_product_equals_recursive_score(seed, linked):
    rng = np.random.default_rng(seed)
    g, pg, feats, flows = _random_instance(rng, linked)
    unpack_weights(g, rng.normal(size=weight_layout(g).size))
    # keep the penalty magnitudes nonnegative
    for t in g.terminals:
        t.deformation[[1, 3]] = np.abs(t.deformation[[1, 3]])
    for v in g.temporal:
        g.nodes[v].temporal_weight = abs(g.nodes[v].temporal_weight)
    dot = float(pack_weights(g) @ joint_feature(g, pg, feats, flows))
    ref = score_graph(g, pg, feats, flows)
    assert abs(dot - ref) <= 1e-9 * max(1.0, abs(ref))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000), st.floats(-3, 3))
def test_root_bias_shift(seed, delta):
    rng = np.random.default_rng(seed)
    g, pg, feats, flows = _random_instance(rng, True)
    pt = pg.trees[0]
    s0 = score_tree(g, pt, feats[:2], flows[0])
    root = g.nodes[g.root]
    root.child_bias = [b + delta for b in root.child_bias]
    s1 = score_tree(g, pt, feats[:2], flows[0])
    assert abs(s1 - s0 - delta) <= 1e-9 * max(1.0, abs(s0))


def test_deformation_penalty_peaks_at_anchor():
    b = GraphBuilder(1)
    t = b.terminal((1, 1), np.zeros((1, 1, 1)), (0.0, 0.5, 0.0, 0.25), 0, (2, 2))
    a = b.and_([t])
    root = b.or_([a])
    g = b.build(root)
    pyr = oracles.random_pyramid(np.random.default_rng(0), 8, 8, 1, levels=1)
    pyr.levels[0][:] = 0

    def s(x, y):
        fp = FrameParse({root: (0, 1, 1), a: (0, 1, 1), t: (0, x, y)}, {root: 0})
        return score_tree(g, ParseTree(0, (fp, fp)), (pyr, pyr))

    best = s(3, 3)
    for dx in range(0, 4):
        row = [s(3 + dx, 3 + dy) for dy in range(0, 4)]
        assert all(v <= best for v in row)
        assert all(row[i + 1] <= row[i] for i in range(3))


def test_unselected_branches_have_zero_feature():
    rng = np.random.default_rng(5)
    g, pg, feats, flows = _random_instance(rng, False)
    pt = pg.trees[0]
    phi = tree_feature(g, pt, feats[:2], flows[0])
    lay = weight_layout(g)
    used = set(pt.selected(g, 0)) | set(pt.selected(g, 1))
    for t in g.terminals:
        if t.id not in used:
            assert not phi[lay.appearance[t.id]].any()
            assert not phi[lay.deformation[t.id]].any()


# ----------------------------------------------------------- serialization


@pytest.mark.parametrize("encoding", ["array", "base64"])
def test_model_file_round_trip(tmp_path, encoding):
    g = small_graph(linked=True)
    p = tmp_path / "m.json"
    save_model(g, p, encoding)
    h = load_model(p)
    np.testing.assert_array_equal(pack_weights(h), pack_weights(g))
    assert h.temporal == g.temporal and len(h) == len(g)
    d = json.loads(p.read_text())
    assert {"nodes", "edges", "temporal", "weights", "layout_version"} <= set(d)


def test_layout_version_mismatch():
    d = to_dict(small_graph())
    d["layout_version"] = 99
    with pytest.raises(ValueError):
        from_dict(d)
