from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ppmx.encoding import EncodingConfig, build_feature_schema, encode_traces, PrefixPolicy
from ppmx.eventlog import Event, EventLog, Trace
from ppmx.metrics import fidelity_r2
from ppmx.surrogate import (Node, PathStep, Rule, SurrogateTree, TreeConfig, best_split,
                            decision_path, extract_rule, fit_cluster_surrogates, fit_tree,
                            path_directions, render_condition, rule_confidence, tree_to_dot)

T0 = datetime(2013, 1, 1, tzinfo=timezone.utc)
X1D = np.array([[1.0], [2.0], [10.0], [11.0]])
Y1D = np.array([0.0, 0.0, 1.0, 1.0])


def exhaustive_split(X, y, min_leaf=1):
    """Every (feature, midpoint) pair, variance reduction computed directly."""
    n = len(y)
    results = []
    for j in range(X.shape[1]):
        u = np.unique(X[:, j])
        for a, b in zip(u, u[1:]):
            t = (a + b) / 2
            left = X[:, j] <= t
            nl = left.sum()
            if nl < min_leaf or n - nl < min_leaf:
                continue
            gain = y.var() - (nl * y[left].var() + (n - nl) * y[~left].var()) / n
            results.append((gain, j, t))
    return results


def incident_schema():
    """Schema with counts, both durations and an impact one-hot block."""
    traces = []
    for i, (impact, gaps) in enumerate([("Medium", [0, 100, 200]), ("High", [0, 50, 300]),
                                        ("Low", [0, 400, 20]), ("Medium", [0, 169, 30])]):
        t, events = T0, []
        for label, gap in zip(["Accepted-In.Progress", "Queued-Awaiting.Assignment",
                               "Accepted-In.Progress"], gaps):
            t = t + timedelta(seconds=gap)
            events.append(Event(label, t, {}))
        traces.append(Trace(f"c{i}", events, {"impact": impact}))
    log = EventLog(tuple(traces))
    schema = build_feature_schema(log, EncodingConfig(categorical_attributes=("impact",)))
    return schema, encode_traces(log.traces, schema, PrefixPolicy())


# ---------------------------------------------------------------- fit_tree

def test_constant_targets_single_leaf():
    tree = fit_tree(np.random.default_rng(0).normal(size=(20, 3)), np.full(20, 0.4))
    assert tree.root.is_leaf and tree.root.value == 0.4 and tree.depth == 0


def test_one_dimensional_fixture():
    tree = fit_tree(X1D, Y1D, TreeConfig(max_depth=4, min_samples_leaf=1))
    root = tree.root
    assert (root.feature, root.threshold) == (0, 6.0)
    assert root.left.is_leaf and root.right.is_leaf
    assert (root.left.value, root.right.value) == (0.0, 1.0)
    steps, leaf = decision_path(tree, [1.0])
    assert [s.went_left for s in steps] == [True] and leaf.value == 0.0
    assert path_directions(steps) == "Left"


def test_empty_input_error():
    with pytest.raises(ValueError):
        fit_tree(np.zeros((0, 2)), [])


def test_depth_and_leaf_size_limits():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(200, 4))
    y = rng.random(200)
    tree = fit_tree(X, y, TreeConfig(max_depth=3, min_samples_leaf=7))
    assert tree.depth <= 3
    assert all(leaf.n_samples >= 7 for leaf in tree.leaves())
    assert sum(leaf.n_samples for leaf in tree.leaves()) == 200
    assert all((n.left is None) == (n.right is None) for n in tree.nodes())


def test_split_tie_prefers_lowest_feature():
    X = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [1.0, 1.0]])
    tree = fit_tree(X, [0.1, 0.1, 0.9, 0.9], TreeConfig(min_samples_leaf=1))
    assert tree.root.feature == 0


def test_root_split_equals_exhaustive_search():
    rng = np.random.default_rng(5)
    for trial in range(60):
        n = int(rng.integers(2, 201))
        d = int(rng.integers(1, 5))
        X = np.round(rng.normal(size=(n, d)), int(rng.integers(0, 3)))
        y = rng.random(n)
        min_leaf = int(rng.integers(1, 6))
        got = best_split(X, y, min_leaf)
        oracle = exhaustive_split(X, y, min_leaf)
        if not oracle:
            assert got is None
            continue
        best_gain = max(g for g, _, _ in oracle)
        assert abs(got[2] - best_gain) <= 1e-12
        ranked = sorted(oracle, key=lambda r: -r[0])
        if len(ranked) == 1 or ranked[0][0] - ranked[1][0] > 1e-9:
            assert (got[0], got[1]) == (ranked[0][1], ranked[0][2])


@given(st.integers(2, 60).flatmap(lambda n: st.tuples(
    st.lists(st.lists(st.integers(-5, 5), min_size=2, max_size=2), min_size=n, max_size=n),
    st.lists(st.floats(0, 1), min_size=n, max_size=n))))
def test_root_split_property(data):
    X, y = np.array(data[0], dtype=float), np.array(data[1])
    got = best_split(X, y, 1)
    oracle = exhaustive_split(X, y, 1)
    if not oracle:
        assert got is None
    else:
        assert abs(got[2] - max(g for g, _, _ in oracle)) <= 1e-12


@given(st.integers(0, 10**6))
def test_deeper_never_worse_on_training_fidelity(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(60, 3))
    y = 1 / (1 + np.exp(-(X[:, 0] * 2 + np.sin(3 * X[:, 1]))))
    r2 = [fidelity_r2(fit_tree(X, y, TreeConfig(max_depth=d, min_samples_leaf=3)).predict(X), y)
          for d in range(0, 6)]
    assert r2[0] == 0.0
    assert all(b >= a - 1e-12 for a, b in zip(r2, r2[1:]))


@given(st.integers(0, 10**6))
def test_predictions_are_leaf_means(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(40, 2))
    y = rng.random(40)
    tree = fit_tree(X, y, TreeConfig(max_depth=3, min_samples_leaf=2))
    ids = tree.apply(X)
    pred = tree.predict(X)
    for leaf in tree.leaves():
        members = ids == leaf.id
        assert leaf.value == float(y[members].mean())
        assert np.all(pred[members] == leaf.value)
        assert 0.0 <= leaf.value <= 1.0


def test_tree_serialisation_round_trip():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(50, 3))
    tree = fit_tree(X, rng.random(50), TreeConfig(max_depth=3, min_samples_leaf=2))
    back = SurrogateTree.from_dict(tree.to_dict())
    assert np.array_equal(back.predict(X), tree.predict(X))
    assert back.to_dict() == tree.to_dict()


# ---------------------------------------------------------------- clusters

def test_step_function_clusters_fit_exactly():
    rng = np.random.default_rng(4)
    X = rng.uniform(0, 10, size=(40, 2))
    assign = np.r_[np.zeros(20, int), np.ones(20, int)]
    scores = np.where(assign == 0, np.where(X[:, 0] > 5, 0.8, 0.2), np.where(X[:, 1] > 3, 0.9, 0.4))
    fits = fit_cluster_surrogates(assign, X, scores, TreeConfig(max_depth=1, min_samples_leaf=1))
    assert fits[0].r2 == 1.0 and fits[1].r2 == 1.0
    assert fits[0].tree.root.feature == 0 and fits[1].tree.root.feature == 1


def test_degenerate_and_small_clusters_flagged():
    X = np.random.default_rng(0).normal(size=(23, 2))
    assign = np.r_[np.zeros(20, int), np.ones(3, int)]
    scores = np.r_[np.full(20, 0.7), [0.1, 0.2, 0.3]]
    fits = fit_cluster_surrogates(assign, X, scores, TreeConfig(min_samples_leaf=5))
    assert fits[0].tree.root.is_leaf and fits[0].r2 is None
    assert fits[0].flag == "degenerate black-box scores"
    assert fits[1].tree.root.is_leaf and fits[1].r2 is None and "small" in fits[1].flag
    assert fits[0].size == 20 and fits[1].size == 3


def test_single_leaf_r2_is_zero():
    rng = np.random.default_rng(9)
    scores = rng.random(30)
    tree = fit_tree(rng.normal(size=(30, 2)), scores, TreeConfig(max_depth=0))
    assert fidelity_r2(tree.predict(np.zeros((30, 2))), scores) == 0.0


def test_leaf_annotations_against_tau():
    X = np.arange(10, dtype=float)[:, None]
    scores = np.array([0.1, 0.2, 0.1, 0.6, 0.2, 0.9, 0.8, 0.95, 0.3, 0.85])
    truth = np.array([0, 0, 0, 1, 1, 1, 1, 1, 0, 1])
    fits = fit_cluster_surrogates(np.zeros(10, int), X, scores,
                                  TreeConfig(max_depth=1, min_samples_leaf=5), tau=0.5, truth=truth)
    tree = fits[0].tree
    left, right = tree.root.left, tree.root.right
    # left leaf: x <= 4.5, mean 0.24 -> class 0; member classes 0,0,0,1,0
    assert left.leaf_class == 0 and left.confidence == pytest.approx(0.8)
    assert left.confidence_ground_truth == pytest.approx(0.6)
    assert right.leaf_class == 1 and right.confidence == pytest.approx(0.8)
    assert fits[0].local_accuracy == pytest.approx(0.9)


# ---------------------------------------------------------------- rules

def _leaf(value=0.3, n=5):
    return Node(9, 2, n, value)


def test_rule_merges_to_tightest_interval():
    steps = [PathStep(0, 0, 10.0, True), PathStep(1, 0, 5.0, True), PathStep(2, 1, 1.0, False)]
    rule = extract_rule(steps, leaf=_leaf(), feature_names=["x", "y"])
    assert [(c.name, c.op, c.threshold) for c in rule.conditions] == [("x", "<=", 5.0), ("y", ">", 1.0)]
    assert rule.text() == "IF x is at most 5\nAND y is greater than 1\nTHEN Prediction of Surrogate Model is 0.300"


def test_rule_renders_duration_in_seconds():
    schema, _ = incident_schema()
    j = schema.feature_names.index("duration_since_start_seconds")
    k = j - schema.numeric_slice.start
    scaled = (169.0 - schema.scaler_mean[k]) / schema.scaler_std[k]
    rule = extract_rule([PathStep(0, j, scaled, False)], schema, _leaf(0.267))
    assert rule.conditions[0].raw_threshold == pytest.approx(169.0, abs=1e-9)
    assert render_condition(rule.conditions[0], schema) == "duration since start is greater than 169 seconds"


def test_rule_renders_one_hot_and_counts():
    schema, _ = incident_schema()
    names = schema.feature_names
    medium = names.index("impact_Medium")
    high = names.index("impact_High")
    gram = names.index("Accepted-In.Progress---Queued-Awaiting.Assignment")
    steps = [PathStep(0, gram, 0.5, True), PathStep(1, high, 0.5, True), PathStep(2, medium, 0.5, False)]
    rule = extract_rule(steps, schema, _leaf(0.267))
    text = rule.text().split("\n")
    assert text[0] == "IF the Accepted-In.Progress---Queued-Awaiting.Assignment is less than 1"
    # "is not High" is implied by "is Medium" and dropped
    assert text[1] == "AND Impact is Medium"
    assert text[2] == "THEN Prediction of Surrogate Model is 0.267"
    only_not = extract_rule([PathStep(0, high, 0.5, True)], schema, _leaf())
    assert render_condition(only_not.conditions[0], schema) == "Impact is not High"
    more = extract_rule([PathStep(0, gram, 1.5, False)], schema, _leaf())
    assert render_condition(more.conditions[0], schema).endswith("is greater than 1")


def test_rule_confidence_examples():
    X = np.zeros((5, 1))
    rule = Rule([], 0.3, 5, 0)
    assert rule_confidence(rule, X, [0.1, 0.2, 0.1, 0.9, 0.8], 0.5) == pytest.approx(0.6)
    assert rule_confidence(rule, X, [0.1] * 5, 0.5) == 1.0
    assert rule_confidence(rule, X, [0.9] * 5, 0.5, truth=[0, 0, 1, 1, 1]) == pytest.approx(0.4)
    steps = [PathStep(0, 0, -1.0, True)]
    empty = extract_rule(steps, leaf=_leaf(), feature_names=["x"])
    with pytest.raises(ValueError):
        rule_confidence(empty, X, [0.1] * 5, 0.5)


def test_single_leaf_path():
    tree = fit_tree(np.zeros((4, 1)), [0.2, 0.2, 0.2, 0.2])
    steps, leaf = decision_path(tree, [3.0])
    assert steps == [] and leaf is tree.root
    assert extract_rule((steps, leaf)).text() == "ALWAYS Prediction of Surrogate Model is 0.200"
    with pytest.raises(ValueError):
        decision_path(tree, [1.0, 2.0])


@given(st.integers(0, 10**6))
def test_rule_iff_routed(seed):
    rng = np.random.default_rng(seed)
    X = np.round(rng.normal(size=(80, 3)), 1)
    y = rng.random(80)
    tree = fit_tree(X, y, TreeConfig(max_depth=4, min_samples_leaf=2))
    probes = np.vstack([X, np.round(rng.normal(size=(40, 3)) * 2, 1)])
    rules = {}
    for x in X:
        path, leaf = decision_path(tree, x)
        rules[leaf.id] = extract_rule((path, leaf))
    for x in probes:
        _, reached = decision_path(tree, x)
        for leaf_id, rule in rules.items():
            assert rule.matches(x) == (leaf_id == reached.id)


def test_rule_iff_routed_with_schema():
    schema, ds = incident_schema()
    rng = np.random.default_rng(0)
    # jitter the numeric block only; one-hot columns stay valid indicators
    X = np.vstack([ds.X] * 5)
    X[len(ds):, schema.numeric_slice] += rng.normal(scale=0.5, size=(4 * len(ds), 2))
    y = rng.random(len(X))
    tree = fit_tree(X, y, TreeConfig(max_depth=4, min_samples_leaf=1))
    for x in X:
        steps, leaf = decision_path(tree, x)
        rule = extract_rule((steps, leaf), schema)
        for other in X:
            assert rule.matches(other) == (tree.leaf_for(other).id == leaf.id)


# ---------------------------------------------------------------- DOT

def test_dot_for_fixture_tree():
    pydot = pytest.importorskip("pydot")
    tree = fit_tree(X1D, Y1D, TreeConfig(min_samples_leaf=1))
    text = tree_to_dot(tree)
    assert text.startswith("digraph Tree {")
    assert 'label="x0 <= 6\\nsamples = 4"' in text
    (graph,) = pydot.graph_from_dot_data(text)
    nodes = [n for n in graph.get_nodes() if n.get_name() not in ("node", "edge")]
    assert len(nodes) == 3 and len(graph.get_edges()) == 2


def test_dot_single_leaf():
    pydot = pytest.importorskip("pydot")
    tree = fit_tree(np.zeros((3, 1)), [0.5, 0.5, 0.5])
    (graph,) = pydot.graph_from_dot_data(tree_to_dot(tree, name="Cluster0"))
    nodes = [n for n in graph.get_nodes() if n.get_name() not in ("node", "edge")]
    assert len(nodes) == 1 and graph.get_edges() == []


def test_dot_uses_raw_units_and_escapes():
    pydot = pytest.importorskip("pydot")
    schema, ds = incident_schema()
    tree = fit_tree(ds.X, np.linspace(0, 1, len(ds)), TreeConfig(max_depth=2, min_samples_leaf=1))
    text = tree_to_dot(tree, schema)
    assert "seconds <=" in text or "---" in text or "impact_" in text
    assert pydot.graph_from_dot_data(text) is not None
    assert "score = " in text and "support = " in text and "confidence = " in text
