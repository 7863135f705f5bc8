"""Per-cluster regression-tree surrogates, decision paths and rules.

Trees are grown greedily (CART) on the encoded validation features against
the black-box scores. Rules are rendered in raw units via the feature schema,
but evaluated in encoded units so that rule membership and tree routing
agree exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .encoding import FeatureSchema
from .metrics import DegenerateScoresError, fidelity_r2

__all__ = [
    "TreeConfig",
    "Node",
    "SurrogateTree",
    "ClusterSurrogate",
    "Condition",
    "Rule",
    "PathStep",
    "fit_tree",
    "best_split",
    "fit_cluster_surrogates",
    "decision_path",
    "extract_rule",
    "rule_confidence",
    "tree_to_dot",
]

GAIN_TIE = 1e-13


@dataclass(frozen=True)
class TreeConfig:
    max_depth: int = 4
    min_samples_leaf: int = 5
    min_variance_reduction: float = 1e-7

    def __post_init__(self):
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")


@dataclass
class Node:
    id: int
    depth: int
    n_samples: int
    value: float
    feature: int | None = None
    threshold: float | None = None
    gain: float = 0.0
    left: "Node | None" = None
    right: "Node | None" = None
    # filled in against a decision threshold, see fit_cluster_surrogates
    leaf_class: int | None = None
    confidence: float | None = None
    confidence_ground_truth: float | None = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    def to_dict(self) -> dict:
        d = {"id": self.id, "depth": self.depth, "n_samples": self.n_samples,
             "value": float(self.value)}
        if self.is_leaf:
            d.update(leaf_class=self.leaf_class, confidence=self.confidence,
                     confidence_ground_truth=self.confidence_ground_truth)
        else:
            d.update(feature=self.feature, threshold=float(self.threshold), gain=float(self.gain),
                     left=self.left.to_dict(), right=self.right.to_dict())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Node":
        node = cls(d["id"], d["depth"], d["n_samples"], d["value"])
        if "feature" in d:
            node.feature, node.threshold, node.gain = d["feature"], d["threshold"], d["gain"]
            node.left, node.right = cls.from_dict(d["left"]), cls.from_dict(d["right"])
        else:
            node.leaf_class = d.get("leaf_class")
            node.confidence = d.get("confidence")
            node.confidence_ground_truth = d.get("confidence_ground_truth")
        return node


@dataclass
class SurrogateTree:
    root: Node
    n_features: int
    cluster_id: int | None = None

    def nodes(self) -> list[Node]:
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            out.append(node)
            if not node.is_leaf:
                stack.extend((node.right, node.left))
        return sorted(out, key=lambda n: n.id)

    def leaves(self) -> list[Node]:
        return [n for n in self.nodes() if n.is_leaf]

    def leaf_for(self, x) -> Node:
        node = self.root
        while not node.is_leaf:
            node = node.left if x[node.feature] <= node.threshold else node.right
        return node

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise ValueError("feature dimension does not match the tree")
        return np.array([self.leaf_for(x).value for x in X])

    def apply(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.array([self.leaf_for(x).id for x in X], dtype=int)

    @property
    def depth(self) -> int:
        return max(n.depth for n in self.leaves())

    def to_dict(self) -> dict:
        return {"cluster_id": self.cluster_id, "n_features": self.n_features,
                "root": self.root.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "SurrogateTree":
        return cls(Node.from_dict(d["root"]), d["n_features"], d.get("cluster_id"))


def best_split(X: np.ndarray, y: np.ndarray, min_samples_leaf: int = 1):
    """Best variance-reducing split ``x[j] <= t`` over all features and midpoints.

    Returns ``(feature, threshold, gain)`` or ``None``. ``gain`` is the drop in
    variance: ``var(y) - (n_l var(y_l) + n_r var(y_r)) / n``. Ties keep the
    lowest feature index, then the lowest threshold.
    """
    n = len(y)
    if n < 2 * min_samples_leaf:
        return None
    yc = y - y.mean()
    n_left = np.arange(1, n)
    ok_size = (n_left >= min_samples_leaf) & (n - n_left >= min_samples_leaf)
    scale = (1.0 / n_left + 1.0 / (n - n_left)) / n
    best = None
    for j in range(X.shape[1]):
        order = np.argsort(X[:, j], kind="mergesort")
        xs = X[order, j]
        valid = ok_size & (xs[:-1] < xs[1:])
        if not valid.any():
            continue
        s_left = np.cumsum(yc[order])[:-1]
        gain = np.where(valid, s_left * s_left * scale, -np.inf)
        g_max = gain.max()
        i = int(np.flatnonzero(gain >= g_max - GAIN_TIE)[0])
        g = float(gain[i])
        if best is None or g > best[2] + GAIN_TIE:
            t = (xs[i] + xs[i + 1]) / 2.0
            if t >= xs[i + 1]:
                t = xs[i]
            best = (j, float(t), g)
    return best


def fit_tree(X, targets, config: TreeConfig | None = None, cluster_id: int | None = None) -> SurrogateTree:
    """Grow a regression tree on ``X`` (encoded features) against ``targets``."""
    config = config or TreeConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(targets, dtype=float).ravel()
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("fit_tree needs a non-empty 2-D feature matrix")
    if len(y) != len(X):
        raise ValueError("one target per instance required")
    counter = iter(range(1 << 30))

    def grow(rows: np.ndarray, depth: int) -> Node:
        ys = y[rows]
        # identical targets keep their exact value instead of a rounded mean
        value = float(ys[0]) if np.all(ys == ys[0]) else float(ys.mean())
        node = Node(next(counter), depth, len(rows), value)
        if depth >= config.max_depth:
            return node
        split = best_split(X[rows], ys, config.min_samples_leaf)
        if split is None or split[2] < config.min_variance_reduction:
            return node
        j, t, g = split
        go_left = X[rows, j] <= t
        node.feature, node.threshold, node.gain = j, t, g
        node.left = grow(rows[go_left], depth + 1)
        node.right = grow(rows[~go_left], depth + 1)
        return node

    return SurrogateTree(grow(np.arange(len(y)), 0), X.shape[1], cluster_id)


@dataclass(frozen=True)
class PathStep:
    node_id: int
    feature: int
    threshold: float
    went_left: bool


def decision_path(tree: SurrogateTree, x) -> tuple[list[PathStep], Node]:
    """The root-to-leaf route of ``x`` as split steps plus the reached leaf."""
    x = np.asarray(x, dtype=float).ravel()
    if len(x) != tree.n_features:
        raise ValueError("instance dimension does not match the tree")
    steps, node = [], tree.root
    while not node.is_leaf:
        left = bool(x[node.feature] <= node.threshold)
        steps.append(PathStep(node.id, node.feature, node.threshold, left))
        node = node.left if left else node.right
    return steps, node


def path_directions(steps: Sequence[PathStep]) -> str:
    return "-".join("Left" if s.went_left else "Right" for s in steps) or "Root"


@dataclass(frozen=True)
class Condition:
    """``feature <= threshold`` (op ``"<="``) or ``feature > threshold`` (op ``">"``).

    ``threshold`` is in encoded units; ``raw_threshold`` in raw units.
    """

    feature: int
    name: str
    op: str
    threshold: float
    raw_threshold: float
    kind: str

    def holds(self, x) -> bool:
        v = x[self.feature]
        return bool(v <= self.threshold) if self.op == "<=" else bool(v > self.threshold)

    def holds_raw(self, raw) -> bool:
        v = raw[self.feature]
        return bool(v <= self.raw_threshold) if self.op == "<=" else bool(v > self.raw_threshold)


def _fmt(v: float) -> str:
    """Four significant digits, positional notation (29582 -> 29580, 0.012345 -> 0.01235)."""
    v = float(v)
    if v == 0 or not math.isfinite(v):
        return f"{v:g}"
    rounded = float(f"{v:.4g}")
    digits = max(0, 3 - math.floor(math.log10(abs(rounded))))
    text = f"{rounded:.{digits}f}"
    return text.rstrip("0").rstrip(".") if "." in text else text


_DISPLAY = {
    "duration_since_start_seconds": ("duration since start", " seconds"),
    "duration_since_previous_event_seconds": ("Duration since previous event", " seconds"),
}


def render_condition(cond: Condition, schema: FeatureSchema | None = None) -> str:
    if cond.kind == "onehot" and schema is not None:
        attr, level = schema.onehot_owner(cond.feature)
        label = attr[:1].upper() + attr[1:]
        return f"{label} is {level}" if cond.op == ">" else f"{label} is not {level}"
    if cond.kind == "count":
        t = cond.raw_threshold
        if cond.op == "<=":
            return f"the {cond.name} is less than {_fmt(math.floor(t) + 1)}"
        return f"the {cond.name} is greater than {_fmt(math.floor(t))}"
    name, unit = _DISPLAY.get(cond.name, (cond.name, ""))
    if cond.op == "<=":
        return f"{name} is at most {_fmt(cond.raw_threshold)}{unit}"
    return f"{name} is greater than {_fmt(cond.raw_threshold)}{unit}"


@dataclass
class Rule:
    conditions: list[Condition]
    predicted_score: float
    support: int
    leaf_id: int
    confidence: float | None = None
    confidence_ground_truth: float | None = None
    schema: FeatureSchema | None = field(default=None, repr=False, compare=False)

    def matches(self, x) -> bool:
        return all(c.holds(x) for c in self.conditions)

    def matches_raw(self, raw) -> bool:
        return all(c.holds_raw(raw) for c in self.conditions)

    def text(self) -> str:
        if not self.conditions:
            return f"ALWAYS Prediction of Surrogate Model is {self.predicted_score:.3f}"
        parts = [render_condition(c, self.schema) for c in self.conditions]
        body = "\nAND ".join(parts)
        return f"IF {body}\nTHEN Prediction of Surrogate Model is {self.predicted_score:.3f}"

    def to_dict(self) -> dict:
        return {"text": self.text(), "predicted_score": self.predicted_score,
                "support": self.support, "leaf_id": self.leaf_id,
                "confidence": self.confidence,
                "confidence_ground_truth": self.confidence_ground_truth,
                "conditions": [{"feature": c.name, "op": c.op, "threshold": c.threshold,
                                "raw_threshold": c.raw_threshold, "kind": c.kind}
                               for c in self.conditions]}


def extract_rule(path: tuple[list[PathStep], Node] | list[PathStep], schema: FeatureSchema | None = None,
                 leaf: Node | None = None, feature_names: Sequence[str] | None = None) -> Rule:
    """Turn a decision path into a conjunction, merging repeated features to the tightest interval."""
    if isinstance(path, tuple):
        steps, leaf = path
    else:
        steps = path
    if leaf is None:
        raise ValueError("extract_rule needs the path's leaf")
    upper: dict[int, float] = {}
    lower: dict[int, float] = {}
    order: list[tuple[int, str]] = []
    for s in steps:
        if s.went_left:
            if s.feature not in upper or s.threshold < upper[s.feature]:
                upper[s.feature] = s.threshold
            key = (s.feature, "<=")
        else:
            if s.feature not in lower or s.threshold > lower[s.feature]:
                lower[s.feature] = s.threshold
            key = (s.feature, ">")
        if key not in order:
            order.append(key)

    def name_of(j):
        if schema is not None:
            return schema.feature_names[j]
        if feature_names is not None:
            return feature_names[j]
        return f"x{j}"

    conds = []
    for j, op in order:
        t = upper[j] if op == "<=" else lower[j]
        kind = schema.feature_kind(j) if schema is not None else "numeric"
        raw = schema.unscale(j, t) if schema is not None else float(t)
        conds.append(Condition(j, name_of(j), op, float(t), raw, kind))
    if schema is not None:
        # "A is Medium" already implies "A is not High"
        positive_attrs = {schema.onehot_owner(c.feature)[0] for c in conds
                          if c.kind == "onehot" and c.op == ">"}
        conds = [c for c in conds if not (c.kind == "onehot" and c.op == "<="
                                          and schema.onehot_owner(c.feature)[0] in positive_attrs)]
    return Rule(conds, float(leaf.value), leaf.n_samples, leaf.id, leaf.confidence,
                leaf.confidence_ground_truth, schema)


def rule_confidence(rule: Rule, X_cluster, blackbox_scores, tau: float, truth=None) -> float:
    """Share of the rule's members whose black-box class at ``tau`` equals the leaf class.

    Passing ground-truth labels as ``truth`` measures agreement with them instead.
    """
    X_cluster = np.atleast_2d(np.asarray(X_cluster, dtype=float))
    members = np.array([rule.matches(x) for x in X_cluster], dtype=bool)
    if not members.any():
        raise ValueError("rule covers no instance (empty leaf)")
    leaf_class = int(rule.predicted_score >= tau)
    if truth is None:
        classes = (np.asarray(blackbox_scores, dtype=float)[members] >= tau).astype(int)
    else:
        classes = np.asarray(truth, dtype=int)[members]
    return float(np.mean(classes == leaf_class))


@dataclass
class ClusterSurrogate:
    tree: SurrogateTree
    r2: float | None
    size: int
    local_accuracy: float | None = None
    flag: str | None = None

    def to_dict(self) -> dict:
        return {"tree": self.tree.to_dict(), "r2": self.r2, "size": self.size,
                "local_accuracy": self.local_accuracy, "flag": self.flag}

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterSurrogate":
        return cls(SurrogateTree.from_dict(d["tree"]), d["r2"], d["size"],
                   d.get("local_accuracy"), d.get("flag"))


def annotate_leaves(tree: SurrogateTree, X, scores, tau: float, truth=None) -> None:
    """Store leaf class at ``tau`` and rule confidences computed from ``X``'s members."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    scores = np.asarray(scores, dtype=float)
    leaf_ids = tree.apply(X)
    bb_class = (scores >= tau).astype(int)
    for leaf in tree.leaves():
        members = leaf_ids == leaf.id
        leaf.leaf_class = int(leaf.value >= tau)
        if members.any():
            leaf.confidence = float(np.mean(bb_class[members] == leaf.leaf_class))
            if truth is not None:
                leaf.confidence_ground_truth = float(
                    np.mean(np.asarray(truth, dtype=int)[members] == leaf.leaf_class))


def fit_cluster_surrogates(assignments, X, scores, config: TreeConfig | None = None,
                           tau: float = 0.5, truth=None, k: int | None = None) -> dict[int, ClusterSurrogate]:
    """Fit one tree per cluster on that cluster's members.

    ``assignments`` may be a region model (anything with ``.assignments``).
    Clusters with fewer than ``2 * min_samples_leaf`` members get a single
    leaf; their R², like that of clusters with constant scores, is ``None``
    and carries a flag.
    """
    config = config or TreeConfig()
    if hasattr(assignments, "assignments"):
        k = assignments.k if k is None else k
        assignments = assignments.assignments
    assignments = np.asarray(assignments, dtype=int)
    X = np.asarray(X, dtype=float)
    scores = np.asarray(scores, dtype=float)
    k = int(assignments.max()) + 1 if k is None else k
    out = {}
    for c in range(k):
        rows = np.flatnonzero(assignments == c)
        if not len(rows):
            continue
        Xc, sc = X[rows], scores[rows]
        flag = None
        if len(rows) < 2 * config.min_samples_leaf:
            tree = fit_tree(Xc, sc, TreeConfig(0, config.min_samples_leaf,
                                               config.min_variance_reduction), c)
            flag = "cluster too small for a split"
        else:
            tree = fit_tree(Xc, sc, config, c)
        tc = truth[rows] if truth is not None else None
        annotate_leaves(tree, Xc, sc, tau, tc)
        r2 = None
        try:
            r2 = fidelity_r2(tree.predict(Xc), sc)
        except DegenerateScoresError:
            flag = flag or "degenerate black-box scores"
        except ValueError as exc:
            flag = flag or str(exc)
        if flag and "too small" in flag:
            r2 = None
        acc = None
        if tc is not None:
            acc = float(np.mean((sc >= tau).astype(int) == tc))
        out[c] = ClusterSurrogate(tree, r2, len(rows), acc, flag)
    return out


def _dot_escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")


def tree_to_dot(tree: SurrogateTree, schema: FeatureSchema | None = None,
                feature_names: Sequence[str] | None = None, name: str = "Tree") -> str:
    """Graphviz DOT text; split nodes show raw-unit conditions, leaves show score, support, confidence."""
    lines = [f"digraph {name} {{", 'node [shape=box, fontname="helvetica"] ;',
             'edge [fontname="helvetica"] ;']
    for node in tree.nodes():
        if node.is_leaf:
            conf = "n/a" if node.confidence is None else f"{node.confidence:.2f}"
            label = f"score = {node.value:.3f}\nsupport = {node.n_samples}\nconfidence = {conf}"
        else:
            if schema is not None:
                names = schema.feature_names
                raw = schema.unscale(node.feature, node.threshold)
            else:
                names = feature_names or [f"x{j}" for j in range(tree.n_features)]
                raw = node.threshold
            label = f"{names[node.feature]} <= {_fmt(raw)}\nsamples = {node.n_samples}"
        lines.append(f'{node.id} [label="{_dot_escape(label)}"] ;')
    for node in tree.nodes():
        if not node.is_leaf:
            lines.append(f'{node.id} -> {node.left.id} [label="True"] ;')
            lines.append(f'{node.id} -> {node.right.id} [label="False"] ;')
    lines.append("}")
    return "\n".join(lines) + "\n"
