"""Binary regression trees: structures, priors, MH proposals, leaf updates.

One forest of ``m`` trees models the mean of one latent dimension. Trees are
plain linked nodes; hot paths (routing, leaf statistics) work on numpy index
arrays. Split rule: a row goes left when ``x[var] <= cut``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Node",
    "Tree",
    "Forest",
    "TreePrior",
    "CutpointGrid",
    "node_split_prior",
    "propose",
    "Proposal",
    "update_tree",
    "leaf_conjugate_update",
    "leaf_posterior_moments",
    "tree_log_marginal",
    "fitted",
    "default_leaf_sd",
    "forest_records",
    "forest_from_records",
    "PackedForest",
    "pack_forest",
    "packed_fitted",
    "packed_records",
    "packed_from_records",
]

MOVE_KINDS = ("grow", "prune", "change", "swap")


class Node:
    __slots__ = ("var", "cut", "value", "left", "right", "parent", "depth")

    def __init__(self, depth=0, parent=None, value=0.0):
        self.var = -1
        self.cut = 0.0
        self.value = value
        self.left = None
        self.right = None
        self.parent = parent
        self.depth = depth

    @property
    def is_leaf(self) -> bool:
        return self.left is None


class Tree:
    """Binary decision tree with scalar leaf means."""

    def __init__(self, root: Node | None = None):
        self.root = root if root is not None else Node()

    def leaves(self) -> list[Node]:
        out = []
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                out.append(node)
            else:
                stack.append(node.right)
                stack.append(node.left)
        return out

    def internal_nodes(self) -> list[Node]:
        out = []
        stack = [self.root]
        while stack:
            node = stack.pop()
            if not node.is_leaf:
                out.append(node)
                stack.append(node.right)
                stack.append(node.left)
        return out

    def prunable_nodes(self) -> list[Node]:
        """Internal nodes whose children are both leaves."""
        return [
            n
            for n in self.internal_nodes()
            if n.left.is_leaf and n.right.is_leaf
        ]

    def swap_parents(self) -> list[Node]:
        """Internal nodes with at least one internal child."""
        return [
            n
            for n in self.internal_nodes()
            if not (n.left.is_leaf and n.right.is_leaf)
        ]

    def num_leaves(self) -> int:
        return len(self.leaves())

    def mean_leaf_depth(self) -> float:
        leaves = self.leaves()
        return sum(n.depth for n in leaves) / len(leaves)

    def assign(self, X: np.ndarray) -> np.ndarray:
        """Leaf index (DFS order) reached by each row of X."""
        n = X.shape[0]
        out = np.zeros(n, dtype=np.intp)
        if self.root.is_leaf:
            return out
        # Depth-first, left before right, so leaf numbering matches leaves().
        order = []
        stack = [(self.root, np.arange(n))]
        while stack:
            node, rows = stack.pop()
            if node.is_leaf:
                order.append((node, rows))
                continue
            go_left = X[rows, node.var] <= node.cut
            stack.append((node.right, rows[~go_left]))
            stack.append((node.left, rows[go_left]))
        for i, (_, rows) in enumerate(order):
            out[rows] = i
        return out

    def leaf_values(self) -> np.ndarray:
        return np.array([n.value for n in self.leaves()])

    def path_to(self, node: Node) -> list[int]:
        path = []
        while node.parent is not None:
            path.append(0 if node.parent.left is node else 1)
            node = node.parent
        path.reverse()
        return path

    def node_at(self, path: list[int]) -> Node:
        node = self.root
        for step in path:
            node = node.left if step == 0 else node.right
        return node

    def clone(self) -> "Tree":
        def rec(node, parent):
            new = Node(depth=node.depth, parent=parent, value=node.value)
            new.var = node.var
            new.cut = node.cut
            if not node.is_leaf:
                new.left = rec(node.left, new)
                new.right = rec(node.right, new)
            return new

        return Tree(rec(self.root, None))


@dataclass
class Forest:
    """Sum-of-trees mean for one latent dimension."""

    trees: list[Tree]

    @classmethod
    def stumps(cls, m: int) -> "Forest":
        return cls([Tree() for _ in range(m)])

    def mean_depth(self) -> float:
        return sum(t.mean_leaf_depth() for t in self.trees) / len(self.trees)


@dataclass(frozen=True)
class TreePrior:
    split_base: float = 0.95
    split_power: float = 2.0
    proposal_probs: tuple[float, float, float, float] = (0.25, 0.25, 0.4, 0.1)
    leaf_sd: float = 0.3
    cutpoint_grid_size: int = 100

    def __post_init__(self):
        if not 0.0 < self.split_base < 1.0:
            raise ValueError("split_base must be in (0, 1)")
        if self.split_power <= 0.0:
            raise ValueError("split_power must be positive")
        if abs(sum(self.proposal_probs) - 1.0) > 1e-12:
            raise ValueError("proposal probabilities must sum to 1")
        if self.leaf_sd <= 0.0:
            raise ValueError("leaf_sd must be positive")


def default_leaf_sd(m: int, k: float = 2.0) -> float:
    """Leaf prior sd 3 / (k sqrt(m)): latent utilities live in roughly (-3, 3)."""
    return 3.0 / (k * math.sqrt(m))


def node_split_prior(depth: int, prior: TreePrior) -> float:
    """Probability that a node at the given depth is internal."""
    return prior.split_base * (1.0 + depth) ** (-prior.split_power)


class CutpointGrid:
    """Per-predictor candidate cutpoints: equally spaced quantiles, deduplicated."""

    def __init__(self, X: np.ndarray, size: int = 100):
        self.num_predictors = X.shape[1]
        qs = np.arange(1, size + 1) / (size + 1)
        self.cutpoints = []
        for p in range(self.num_predictors):
            col = X[:, p]
            grid = np.unique(np.quantile(col, qs, method="inverted_cdf"))
            # A cutpoint at the column maximum would send every row left.
            grid = grid[grid < col.max()]
            self.cutpoints.append(grid)

    def __getitem__(self, var: int) -> np.ndarray:
        return self.cutpoints[var]


@dataclass
class Proposal:
    kind: str
    tree: Tree  # candidate
    log_prior_ratio: float
    log_forward: float
    log_backward: float


def _log_rule_prob(grid: CutpointGrid, var: int) -> float:
    return -math.log(grid.num_predictors) - math.log(len(grid[var]))


def _has_empty_leaf(tree: Tree, X: np.ndarray) -> bool:
    assign = tree.assign(X)
    counts = np.bincount(assign, minlength=tree.num_leaves())
    return bool((counts == 0).any())


def propose(
    tree: Tree,
    kind: str,
    X: np.ndarray,
    grid: CutpointGrid,
    prior: TreePrior,
    rng: np.random.Generator,
) -> Proposal | None:
    """One MH candidate of the given kind, or None when the move is infeasible.

    Infeasible includes structurally impossible moves and candidates that
    would leave a training row set of some leaf empty; either way the caller
    treats it as a rejection.
    """
    if kind == "grow":
        return _propose_grow(tree, X, grid, prior, rng)
    if kind == "prune":
        return _propose_prune(tree, X, grid, prior, rng)
    if kind == "change":
        return _propose_change(tree, X, grid, prior, rng)
    if kind == "swap":
        return _propose_swap(tree, X, grid, prior, rng)
    raise ValueError(f"unknown move kind: {kind}")


def _draw_rule(grid: CutpointGrid, rng: np.random.Generator):
    var = int(rng.integers(grid.num_predictors))
    cuts = grid[var]
    if len(cuts) == 0:
        return None
    return var, float(cuts[rng.integers(len(cuts))])


def _grow_prune_terms(prior, grid, depth, var):
    """Log prior-ratio pieces shared by grow and its prune inverse."""
    p_here = node_split_prior(depth, prior)
    p_child = node_split_prior(depth + 1, prior)
    return (
        math.log(p_here)
        + 2.0 * math.log(1.0 - p_child)
        - math.log(1.0 - p_here)
        + _log_rule_prob(grid, var)
    )


def _propose_grow(tree, X, grid, prior, rng):
    leaves = tree.leaves()
    leaf = leaves[int(rng.integers(len(leaves)))]
    rule = _draw_rule(grid, rng)
    if rule is None:
        return None
    var, cut = rule

    cand = tree.clone()
    target = cand.node_at(tree.path_to(leaf))
    target.var = var
    target.cut = cut
    target.left = Node(depth=target.depth + 1, parent=target)
    target.right = Node(depth=target.depth + 1, parent=target)
    if _has_empty_leaf(cand, X):
        return None

    p_grow, p_prune = prior.proposal_probs[0], prior.proposal_probs[1]
    log_rule = _log_rule_prob(grid, var)
    return Proposal(
        kind="grow",
        tree=cand,
        log_prior_ratio=_grow_prune_terms(prior, grid, leaf.depth, var),
        log_forward=math.log(p_grow) - math.log(len(leaves)) + log_rule,
        log_backward=math.log(p_prune) - math.log(len(cand.prunable_nodes())),
    )


def _propose_prune(tree, X, grid, prior, rng):
    prunable = tree.prunable_nodes()
    if not prunable:
        return None
    node = prunable[int(rng.integers(len(prunable)))]

    cand = tree.clone()
    target = cand.node_at(tree.path_to(node))
    target.left = None
    target.right = None

    p_grow, p_prune = prior.proposal_probs[0], prior.proposal_probs[1]
    log_rule = _log_rule_prob(grid, node.var)
    return Proposal(
        kind="prune",
        tree=cand,
        log_prior_ratio=-_grow_prune_terms(prior, grid, node.depth, node.var),
        log_forward=math.log(p_prune) - math.log(len(prunable)),
        log_backward=math.log(p_grow)
        - math.log(cand.num_leaves())
        + log_rule,
    )


def _propose_change(tree, X, grid, prior, rng):
    bottoms = tree.prunable_nodes()
    if not bottoms:
        return None
    node = bottoms[int(rng.integers(len(bottoms)))]
    rule = _draw_rule(grid, rng)
    if rule is None:
        return None
    var, cut = rule

    cand = tree.clone()
    target = cand.node_at(tree.path_to(node))
    target.var = var
    target.cut = cut
    if _has_empty_leaf(cand, X):
        return None

    p_change = prior.proposal_probs[2]
    lf = math.log(p_change) - math.log(len(bottoms)) + _log_rule_prob(grid, var)
    lb = (
        math.log(p_change)
        - math.log(len(cand.prunable_nodes()))
        + _log_rule_prob(grid, node.var)
    )
    # Rule probabilities enter the structure prior too; the depths match so
    # split probabilities cancel exactly.
    lp = _log_rule_prob(grid, var) - _log_rule_prob(grid, node.var)
    return Proposal("change", cand, lp, lf, lb)


def _propose_swap(tree, X, grid, prior, rng):
    parents = tree.swap_parents()
    if not parents:
        return None
    parent = parents[int(rng.integers(len(parents)))]
    children = [c for c in (parent.left, parent.right) if not c.is_leaf]
    child = children[int(rng.integers(len(children)))]

    cand = tree.clone()
    cp = cand.node_at(tree.path_to(parent))
    cc = cand.node_at(tree.path_to(child))
    cp.var, cc.var = cc.var, cp.var
    cp.cut, cc.cut = cc.cut, cp.cut
    if _has_empty_leaf(cand, X):
        return None

    p_swap = prior.proposal_probs[3]
    lf = math.log(p_swap) - math.log(len(parents)) - math.log(len(children))
    # Shape is unchanged, so the candidate offers the same move backwards.
    return Proposal("swap", cand, 0.0, lf, lf)


def tree_log_marginal(
    counts: np.ndarray,
    sums: np.ndarray,
    tau_sq: float,
    leaf_sd: float,
) -> float:
    """Partition-dependent part of log p(r | tree structure).

    Leaf means integrated out under their N(0, leaf_sd^2) prior; terms that
    do not depend on how rows are split across leaves are dropped (they
    cancel in every MH ratio).
    """
    sig_sq = leaf_sd * leaf_sd
    denom = tau_sq + counts * sig_sq
    return float(
        0.5 * np.sum(np.log(tau_sq / denom))
        + 0.5 * sig_sq * np.sum(sums * sums / (tau_sq * denom))
    )


def leaf_posterior_moments(
    count: float, total: float, tau_sq: float, leaf_sd: float
) -> tuple[float, float]:
    """Gaussian-conjugate posterior (mean, variance) of one leaf mean."""
    var = 1.0 / (count / tau_sq + 1.0 / (leaf_sd * leaf_sd))
    return var * total / tau_sq, var


def leaf_conjugate_update(
    tree: Tree,
    assign: np.ndarray,
    r: np.ndarray,
    tau_sq: float,
    leaf_sd: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Redraw every leaf mean from its conjugate posterior; returns the fit."""
    if tau_sq <= 0.0:
        raise ValueError(f"tau_sq must be positive, got {tau_sq}")
    leaves = tree.leaves()
    L = len(leaves)
    counts = np.bincount(assign, minlength=L)
    sums = np.bincount(assign, weights=r, minlength=L)
    sig_sq = leaf_sd * leaf_sd
    post_var = 1.0 / (counts / tau_sq + 1.0 / sig_sq)
    post_mean = post_var * sums / tau_sq
    values = post_mean + np.sqrt(post_var) * rng.standard_normal(L)
    for node, v in zip(leaves, values):
        node.value = float(v)
    return values[assign]


def update_tree(
    tree: Tree,
    X: np.ndarray,
    grid: CutpointGrid,
    r: np.ndarray,
    tau_sq: float,
    prior: TreePrior,
    rng: np.random.Generator,
) -> tuple[Tree, np.ndarray, np.ndarray, bool]:
    """One MH structure move plus conjugate leaf redraw against residual r.

    Returns (tree, assignment, fitted values, accepted).
    """
    assign = tree.assign(X)
    u_kind = rng.uniform()
    cdf = np.cumsum(prior.proposal_probs)
    kind = MOVE_KINDS[int(np.searchsorted(cdf, u_kind))]

    accepted = False
    prop = propose(tree, kind, X, grid, prior, rng)
    if prop is not None:
        L = tree.num_leaves()
        counts = np.bincount(assign, minlength=L)
        sums = np.bincount(assign, weights=r, minlength=L)
        mll_cur = tree_log_marginal(counts, sums, tau_sq, prior.leaf_sd)

        cand_assign = prop.tree.assign(X)
        Lc = prop.tree.num_leaves()
        counts_c = np.bincount(cand_assign, minlength=Lc)
        sums_c = np.bincount(cand_assign, weights=r, minlength=Lc)
        mll_new = tree_log_marginal(counts_c, sums_c, tau_sq, prior.leaf_sd)

        log_acc = (
            prop.log_prior_ratio
            + (mll_new - mll_cur)
            + prop.log_backward
            - prop.log_forward
        )
        if math.log(rng.uniform()) < log_acc:
            tree = prop.tree
            assign = cand_assign
            accepted = True

    fit = leaf_conjugate_update(tree, assign, r, tau_sq, prior.leaf_sd, rng)
    return tree, assign, fit, accepted


def fitted(forest: Forest, X: np.ndarray) -> np.ndarray:
    """Sum over trees of the leaf mean reached by each row."""
    out = np.zeros(X.shape[0])
    for tree in forest.trees:
        out += tree.leaf_values()[tree.assign(X)]
    return out


# ---------------------------------------------------------------------------
# Serialization: depth-first node records and a packed numpy form for fast
# whole-forest evaluation of stored posterior draws.
# ---------------------------------------------------------------------------


def forest_records(forest: Forest) -> list[list[list]]:
    """Depth-first [kind, ...] records per tree; JSON-friendly.

    Internal node: ["s", var, cut]. Leaf: ["l", value].
    """
    def rec(node, out):
        if node.is_leaf:
            out.append(["l", node.value])
        else:
            out.append(["s", node.var, node.cut])
            rec(node.left, out)
            rec(node.right, out)
        return out

    return [rec(t.root, []) for t in forest.trees]


def forest_from_records(records: list[list[list]]) -> Forest:
    def rec(items, pos, depth, parent):
        item = items[pos]
        node = Node(depth=depth, parent=parent)
        if item[0] == "l":
            node.value = float(item[1])
            return node, pos + 1
        node.var = int(item[1])
        node.cut = float(item[2])
        node.left, pos = rec(items, pos + 1, depth + 1, node)
        node.right, pos = rec(items, pos, depth + 1, node)
        node.left.parent = node
        node.right.parent = node
        return node, pos

    trees = []
    for items in records:
        root, end = rec(items, 0, 0, None)
        if end != len(items):
            raise ValueError("trailing records after tree end")
        trees.append(Tree(root))
    return Forest(trees)


@dataclass
class PackedForest:
    """Flat DFS arrays for one forest; payload is cutpoint or leaf value."""

    internal: np.ndarray  # bool per node
    var: np.ndarray  # int32, -1 at leaves
    payload: np.ndarray  # float64
    skip: np.ndarray  # int32, offset from an internal node to its right child
    offsets: np.ndarray  # int64, tree start indices, length m+1

    def scaled(self, factor: float) -> "PackedForest":
        payload = self.payload.copy()
        payload[~self.internal] *= factor
        return PackedForest(self.internal, self.var, payload, self.skip, self.offsets)


def pack_forest(forest: Forest) -> PackedForest:
    internal, var, payload, skip = [], [], [], []

    def rec(node):
        idx = len(internal)
        if node.is_leaf:
            internal.append(False)
            var.append(-1)
            payload.append(node.value)
            skip.append(0)
        else:
            internal.append(True)
            var.append(node.var)
            payload.append(node.cut)
            skip.append(0)
            rec(node.left)
            skip[idx] = len(internal) - idx
            rec(node.right)

    offsets = [0]
    for tree in forest.trees:
        rec(tree.root)
        offsets.append(len(internal))
    return PackedForest(
        internal=np.array(internal, dtype=bool),
        var=np.array(var, dtype=np.int32),
        payload=np.array(payload),
        skip=np.array(skip, dtype=np.int32),
        offsets=np.array(offsets, dtype=np.int64),
    )


def packed_records(packed: PackedForest) -> list[list[list]]:
    """Depth-first node records per tree, same format as forest_records."""
    out = []
    for t in range(len(packed.offsets) - 1):
        tree = []
        for i in range(int(packed.offsets[t]), int(packed.offsets[t + 1])):
            if packed.internal[i]:
                tree.append(["s", int(packed.var[i]), float(packed.payload[i])])
            else:
                tree.append(["l", float(packed.payload[i])])
        out.append(tree)
    return out


def packed_from_records(records: list[list[list]]) -> PackedForest:
    internal, var, payload, skip, offsets = [], [], [], [], [0]

    def rec(tree, i):
        node = tree[i]
        idx = len(internal)
        if node[0] == "l":
            internal.append(False)
            var.append(-1)
            payload.append(float(node[1]))
            skip.append(0)
            return i + 1
        internal.append(True)
        var.append(int(node[1]))
        payload.append(float(node[2]))
        skip.append(0)
        j = rec(tree, i + 1)
        skip[idx] = len(internal) - idx
        return rec(tree, j)

    for tree in records:
        i = rec(tree, 0)
        if i != len(tree):
            raise ValueError("malformed tree records")
        offsets.append(len(internal))
    return PackedForest(
        internal=np.array(internal, dtype=bool),
        var=np.array(var, dtype=np.int32),
        payload=np.array(payload),
        skip=np.array(skip, dtype=np.int32),
        offsets=np.array(offsets, dtype=np.int64),
    )


def packed_fitted(packed: PackedForest, X: np.ndarray) -> np.ndarray:
    """Evaluate the packed forest on every row of X."""
    n = X.shape[0]
    out = np.zeros(n)
    all_rows = np.arange(n)
    for t in range(len(packed.offsets) - 1):
        stack = [(int(packed.offsets[t]), all_rows)]
        while stack:
            idx, rows = stack.pop()
            if not packed.internal[idx]:
                out[rows] += packed.payload[idx]
                continue
            go_left = X[rows, packed.var[idx]] <= packed.payload[idx]
            stack.append((idx + int(packed.skip[idx]), rows[~go_left]))
            stack.append((idx + 1, rows[go_left]))
    return out
