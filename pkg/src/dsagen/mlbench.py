"""Decision-tree harness: CART training and the cross-evaluation protocol.

The tree is a hand-rolled CART so that every tie-break is pinned (lowest
feature index, then lowest threshold) and serialized trees are byte-stable
across runs and worker counts.  Binary labels: 1 = secure, 0 = insecure.

Evaluation mirrors the dataset-comparison protocol: per-dataset 75:25
train/test splits, an F1 cross-table over all (train, test) pairs plus a
boundary test set of near-boundary points, 10-fold cross-validated
accuracies as an over/underfit diagnostic, and misclassification histograms
binned by damping ratio with the cause of insecurity attributed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientDataError
from .walker import SecuritySpec

MAX_DEPTH = 5
CCP_ALPHA = 0.01
BOUNDARY_LO = 0.029
BOUNDARY_HI = 0.031
HIST_BIN_WIDTH = 0.0025  # damping-ratio units (0.25 percentage points)


def gini(counts) -> float:
    """Gini impurity 1 - sum(p_i^2) of a class-count vector."""
    c = np.asarray(counts, float)
    if np.any(c < 0):
        raise ValueError("negative class count")
    total = c.sum()
    if total == 0:
        raise ValueError("gini of an empty count vector")
    p = c / total
    return float(1.0 - np.sum(p * p))


@dataclass
class TreeNode:
    counts: tuple            # (insecure, secure) sample counts at the node
    feature: int | None = None
    threshold: float | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    @property
    def klass(self) -> int:
        n0, n1 = self.counts
        return 1 if n1 > n0 else 0  # ties go to insecure

    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(self.left.depth(), self.right.depth())

    def n_nodes(self) -> int:
        if self.is_leaf:
            return 1
        return 1 + self.left.n_nodes() + self.right.n_nodes()


def _best_split(X, y):
    """Exhaustive best Gini-gain split; midpoint thresholds, pinned ties."""
    n = len(y)
    counts = np.array([np.sum(y == 0), np.sum(y == 1)], float)
    parent = gini(counts)
    best = None  # (gain, feature, threshold)
    for j in range(X.shape[1]):
        order = np.argsort(X[:, j], kind="stable")
        xs = X[order, j]
        ys = y[order]
        ones = np.cumsum(ys)
        total1 = ones[-1]
        for i in range(n - 1):
            if xs[i] == xs[i + 1]:
                continue
            t = 0.5 * (xs[i] + xs[i + 1])
            nl = i + 1
            nl1 = ones[i]
            nr = n - nl
            nr1 = total1 - nl1
            gl = gini([nl - nl1, nl1])
            gr = gini([nr - nr1, nr1])
            gain = parent - (nl * gl + nr * gr) / n
            if best is None or gain > best[0]:
                best = (gain, j, t)
    if best is None or best[0] <= 0.0:
        return None
    return best


def _grow(X, y, depth, max_depth):
    counts = (int(np.sum(y == 0)), int(np.sum(y == 1)))
    node = TreeNode(counts=counts)
    if depth >= max_depth or counts[0] == 0 or counts[1] == 0 or len(y) < 2:
        return node
    found = _best_split(X, y)
    if found is None:
        return node
    _, j, t = found
    mask = X[:, j] <= t
    node.feature = j
    node.threshold = float(t)
    node.left = _grow(X[mask], y[mask], depth + 1, max_depth)
    node.right = _grow(X[~mask], y[~mask], depth + 1, max_depth)
    return node


def _leaf_error(node, n_total):
    n0, n1 = node.counts
    return min(n0, n1) / n_total


def _subtree_error(node, n_total):
    if node.is_leaf:
        return _leaf_error(node, n_total)
    return _subtree_error(node.left, n_total) + _subtree_error(node.right, n_total)


def _n_leaves(node):
    if node.is_leaf:
        return 1
    return _n_leaves(node.left) + _n_leaves(node.right)


def _prune_ccp(root, alpha):
    """Minimal cost-complexity pruning: collapse weakest links with g < alpha."""
    n_total = sum(root.counts)
    while not root.is_leaf:
        weakest = []  # (g, preorder index, node)
        stack = [(root, 0)]
        idx = 0
        internal = []
        order = {}
        def _preorder(node):
            nonlocal idx
            order[id(node)] = idx
            idx += 1
            if not node.is_leaf:
                internal.append(node)
                _preorder(node.left)
                _preorder(node.right)
        _preorder(root)
        if not internal:
            break
        g_vals = []
        for node in internal:
            leaves = _n_leaves(node)
            g = (_leaf_error(node, n_total) - _subtree_error(node, n_total)) \
                / (leaves - 1)
            g_vals.append((g, order[id(node)], node))
        g_min = min(g for g, _, _ in g_vals)
        if not (g_min < alpha):
            break
        for g, _, node in sorted(g_vals, key=lambda t: t[1]):
            if g == g_min and not node.is_leaf:
                node.feature = None
                node.threshold = None
                node.left = None
                node.right = None
    return root


def train(X, y, max_depth=MAX_DEPTH, ccp_alpha=CCP_ALPHA) -> TreeNode:
    """Greedy CART with a depth cap and minimal cost-complexity pruning."""
    X = np.asarray(X, float)
    y = np.asarray(y, int)
    if len(y) < 1:
        raise InsufficientDataError("cannot train on an empty dataset")
    if set(np.unique(y)) - {0, 1}:
        raise ValueError("labels must be binary (1 = secure)")
    root = _grow(X, y, 0, max_depth)
    return _prune_ccp(root, ccp_alpha)


def predict(tree: TreeNode, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, float))
    out = np.empty(len(X), dtype=int)
    for i, row in enumerate(X):
        node = tree
        while not node.is_leaf:
            node = node.left if row[node.feature] <= node.threshold else node.right
        out[i] = node.klass
    return out


def f1(predictions, truth) -> float:
    """F1 score with 1 = secure as the positive class; 0 when undefined."""
    p = np.asarray(predictions, int)
    t = np.asarray(truth, int)
    if p.shape != t.shape:
        raise ValueError("prediction/truth length mismatch")
    tp = int(np.sum((p == 1) & (t == 1)))
    fp = int(np.sum((p == 1) & (t == 0)))
    fn = int(np.sum((p == 0) & (t == 1)))
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def tree_to_json(tree: TreeNode) -> str:
    def _enc(node):
        if node.is_leaf:
            return {"class": node.klass, "counts": list(node.counts)}
        return {"feature": node.feature, "threshold": node.threshold,
                "counts": list(node.counts),
                "left": _enc(node.left), "right": _enc(node.right)}
    return json.dumps(_enc(tree), indent=2, sort_keys=True) + "\n"


def tree_from_json(text: str) -> TreeNode:
    def _dec(d):
        node = TreeNode(counts=tuple(d["counts"]))
        if "feature" in d:
            node.feature = d["feature"]
            node.threshold = d["threshold"]
            node.left = _dec(d["left"])
            node.right = _dec(d["right"])
        return node
    return _dec(json.loads(text))


# --- evaluation protocol ----------------------------------------------------

@dataclass(frozen=True)
class SplitData:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    test_rows: list  # LabeledSample rows of the test partition


@dataclass
class EvalReport:
    f1_scores: dict = field(default_factory=dict)     # (train, test) -> F1
    cv_accuracy: dict = field(default_factory=dict)   # train -> list of 10
    histograms: dict = field(default_factory=dict)    # train -> [(lo, hi, cause, count)]
    boundary_size: int = 0
    trees: dict = field(default_factory=dict)         # train -> TreeNode

    def as_dict(self):
        return {
            "f1": {f"{a}|{b}": v for (a, b), v in sorted(self.f1_scores.items())},
            "cv_accuracy": self.cv_accuracy,
            "boundary_size": self.boundary_size,
        }


def _features(samples):
    X = np.array([s.x for s in samples])
    y = np.array([int(s.secure) for s in samples])
    return X, y


def split_dataset(samples, seed, test_fraction=0.25) -> SplitData:
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(samples))
    n_test = int(round(test_fraction * len(samples)))
    test_idx = set(idx[:n_test].tolist())
    train_rows = [s for i, s in enumerate(samples) if i not in test_idx]
    test_rows = [s for i, s in enumerate(samples) if i in test_idx]
    Xtr, ytr = _features(train_rows)
    Xte, yte = _features(test_rows)
    return SplitData(X_train=Xtr, y_train=ytr, X_test=Xte, y_test=yte,
                     test_rows=test_rows)


def _cv_accuracies(X, y, folds, seed, max_depth, ccp_alpha):
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(y))
    parts = np.array_split(idx, folds)
    accs = []
    for f in range(folds):
        hold = parts[f]
        rest = np.concatenate([parts[g] for g in range(folds) if g != f])
        if len(hold) == 0 or len(rest) == 0:
            continue
        t = train(X[rest], y[rest], max_depth, ccp_alpha)
        accs.append(float(np.mean(predict(t, X[hold]) == y[hold])))
    return accs


def _cause(sample, spec: SecuritySpec) -> str:
    """Attribute a misclassified point to the security component involved."""
    z = sample.zeta
    if not sample.feasible:
        if z is None or z < spec.gamma:
            return "both" if z is not None else "feasibility"
        return "feasibility"
    if z is not None and z < spec.gamma:
        return "stability"
    # truly secure point: attribute by damping proximity to the boundary
    if z is not None and z - spec.gamma < spec.beta:
        return "stability"
    return "feasibility"


def _histogram(rows, wrong_mask, spec, bin_width=HIST_BIN_WIDTH):
    buckets = {}
    for s, wrong in zip(rows, wrong_mask):
        if not wrong:
            continue
        if s.zeta is None:
            key = (None, None)
        else:
            b = int(np.floor(s.zeta / bin_width))
            key = (b * bin_width, (b + 1) * bin_width)
        cause = _cause(s, spec)
        buckets[(key, cause)] = buckets.get((key, cause), 0) + 1
    out = []
    for (key, cause), count in sorted(
            buckets.items(),
            key=lambda kv: (kv[0][0][0] if kv[0][0][0] is not None else -1e9,
                            kv[0][1])):
        out.append((key[0], key[1], cause, count))
    return out


def cross_evaluate(datasets: dict, spec: SecuritySpec = SecuritySpec(),
                   boundary_source: str = "dw", split_seed: int = 0,
                   max_depth=MAX_DEPTH, ccp_alpha=CCP_ALPHA,
                   cv_folds: int = 10) -> EvalReport:
    """Train one tree per dataset and score every (train, test) pair.

    ``datasets`` maps a name to its labeled samples; ``boundary_source``
    names the dataset whose test partition supplies the near-boundary test
    set (2.9% < zeta < 3.1%).
    """
    if boundary_source not in datasets:
        raise InsufficientDataError(
            f"boundary source {boundary_source!r} not among datasets")
    splits = {name: split_dataset(rows, split_seed)
              for name, rows in datasets.items()}
    boundary_rows = [s for s in splits[boundary_source].test_rows
                     if s.zeta is not None
                     and BOUNDARY_LO < s.zeta < BOUNDARY_HI]
    Xb, yb = _features(boundary_rows) if boundary_rows else (None, None)

    report = EvalReport(boundary_size=len(boundary_rows))
    all_test_rows = []
    for name in sorted(datasets):
        all_test_rows.extend(splits[name].test_rows)
    X_all, y_all = _features(all_test_rows)

    for name in sorted(datasets):
        sp = splits[name]
        tree = train(sp.X_train, sp.y_train, max_depth, ccp_alpha)
        report.trees[name] = tree
        report.cv_accuracy[name] = _cv_accuracies(
            sp.X_train, sp.y_train, cv_folds, split_seed, max_depth, ccp_alpha)
        for other in sorted(datasets):
            report.f1_scores[(name, other)] = f1(
                predict(tree, splits[other].X_test), splits[other].y_test)
        if boundary_rows:
            report.f1_scores[(name, "boundary")] = f1(predict(tree, Xb), yb)
        wrong = predict(tree, X_all) != y_all
        report.histograms[name] = _histogram(all_test_rows, wrong, spec)
    return report
