import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from mpbart.trees import (
    MOVE_KINDS,
    CutpointGrid,
    Forest,
    Node,
    Tree,
    TreePrior,
    default_leaf_sd,
    fitted,
    forest_from_records,
    forest_records,
    leaf_posterior_moments,
    node_split_prior,
    pack_forest,
    packed_fitted,
    packed_from_records,
    packed_records,
    propose,
    tree_log_marginal,
    update_tree,
)

# ---------------------------------------------------------------------------
# Brute-force oracle: full log prior, full marginal likelihood, and proposal
# probabilities recomputed by direct enumeration over tree objects.
# ---------------------------------------------------------------------------


def walk(node):
    yield node
    if not node.is_leaf:
        yield from walk(node.left)
        yield from walk(node.right)


def oracle_log_prior(tree, grid, prior):
    """Log structure prior: split/no-split at each node times rule prob."""
    total = 0.0
    for node in walk(tree.root):
        p = node_split_prior(node.depth, prior)
        if node.is_leaf:
            total += math.log(1.0 - p)
        else:
            total += math.log(p)
            total -= math.log(grid.num_predictors)
            total -= math.log(len(grid[node.var]))
    return total


def oracle_log_marglik(tree, X, r, tau_sq, leaf_sd):
    """Full log p(r | structure): r ~ N(0, leaf_sd^2 Z Z' + tau_sq I)."""
    assign = tree.assign(X)
    L = tree.num_leaves()
    Z = np.zeros((len(r), L))
    Z[np.arange(len(r)), assign] = 1.0
    cov = leaf_sd**2 * Z @ Z.T + tau_sq * np.eye(len(r))
    return multivariate_normal.logpdf(r, mean=np.zeros(len(r)), cov=cov)


def bottoms(tree):
    return [n for n in walk(tree.root)
            if not n.is_leaf and n.left.is_leaf and n.right.is_leaf]


def leaves(tree):
    return [n for n in walk(tree.root) if n.is_leaf]


def swap_pairs(tree):
    pairs = []
    for n in walk(tree.root):
        if n.is_leaf:
            continue
        kids = [c for c in (n.left, n.right) if not c.is_leaf]
        if kids:
            pairs.append((n, kids))
    return pairs


def oracle_forward_backward(kind, tree, prop, grid, prior):
    pg, pp, pc, ps = prior.proposal_probs
    if kind == "grow":
        # locate the leaf that became internal by structural comparison:
        # DFS order diverges exactly at the grown leaf
        cur_nodes = list(walk(tree.root))
        cand_nodes = list(walk(prop.tree.root))
        i = 0
        while i < len(cur_nodes) and cur_nodes[i].is_leaf == cand_nodes[i].is_leaf:
            i += 1
        new = cand_nodes[i]
        lf = (math.log(pg) - math.log(len(leaves(tree)))
              - math.log(grid.num_predictors) - math.log(len(grid[new.var])))
        lb = math.log(pp) - math.log(len(bottoms(prop.tree)))
        return lf, lb
    if kind == "prune":
        cur_nodes = list(walk(tree.root))
        cand_nodes = list(walk(prop.tree.root))
        i = 0
        while i < len(cand_nodes) and cur_nodes[i].is_leaf == cand_nodes[i].is_leaf:
            i += 1
        gone = cur_nodes[i]
        lf = math.log(pp) - math.log(len(bottoms(tree)))
        lb = (math.log(pg) - math.log(len(leaves(prop.tree)))
              - math.log(grid.num_predictors) - math.log(len(grid[gone.var])))
        return lf, lb
    if kind == "change":
        cur_b = bottoms(tree)
        cand_b = bottoms(prop.tree)
        changed = next(
            ((c, n) for c, n in zip(cand_b, cur_b)
             if (c.var, c.cut) != (n.var, n.cut)),
            None,
        )
        if changed is None:
            # redrew the current rule: a self-move, fully symmetric
            return 0.0, 0.0
        new_node, old_node = changed
        lf = (math.log(pc) - math.log(len(cur_b))
              - math.log(grid.num_predictors) - math.log(len(grid[new_node.var])))
        lb = (math.log(pc) - math.log(len(cand_b))
              - math.log(grid.num_predictors) - math.log(len(grid[old_node.var])))
        return lf, lb
    if kind == "swap":
        # shape unchanged, so DFS orders align node for node; the swapped
        # parent is the shallower of the differing internal nodes
        diffs = [
            (a, b) for a, b in zip(walk(tree.root), walk(prop.tree.root))
            if not a.is_leaf and (a.var, a.cut) != (b.var, b.cut)
        ]
        parent = min((a for a, _ in diffs), key=lambda n: n.depth)
        kids = [c for c in (parent.left, parent.right) if not c.is_leaf]
        lf = math.log(ps) - math.log(len(swap_pairs(tree))) - math.log(len(kids))
        lb = (math.log(ps) - math.log(len(swap_pairs(prop.tree)))
              - math.log(len(kids)))
        return lf, lb
    raise ValueError(kind)


@pytest.fixture()
def fixture_10rows():
    rng = np.random.default_rng(42)
    X = rng.uniform(size=(10, 3))
    r = rng.standard_normal(10)
    grid = CutpointGrid(X, 7)
    prior = TreePrior(leaf_sd=0.4)
    return X, r, grid, prior


def grow_random_tree(X, grid, prior, rng, steps=6):
    tree = Tree()
    for _ in range(steps):
        prop = propose(tree, "grow", X, grid, prior, rng)
        if prop is not None:
            tree = prop.tree
    return tree


class TestProposalOracle:
    """MH acceptance pieces vs the brute-force prior x likelihood x proposal
    oracle, on 10-row fixtures, to 1e-12."""

    @pytest.mark.parametrize("kind", MOVE_KINDS)
    def test_log_acceptance_matches_oracle(self, fixture_10rows, kind):
        X, r, grid, prior = fixture_10rows
        tau_sq = 0.8
        rng = np.random.default_rng(100)
        checked = 0
        for trial in range(200):
            tree = grow_random_tree(X, grid, prior, rng,
                                    steps=int(rng.integers(0, 7)))
            prop = propose(tree, kind, X, grid, prior, rng)
            if prop is None:
                continue
            checked += 1
            internal = (
                prop.log_prior_ratio
                + tree_log_marginal(
                    *_suff(prop.tree, X, r), tau_sq, prior.leaf_sd)
                - tree_log_marginal(*_suff(tree, X, r), tau_sq, prior.leaf_sd)
                + prop.log_backward
                - prop.log_forward
            )
            lf, lb = oracle_forward_backward(kind, tree, prop, grid, prior)
            oracle = (
                oracle_log_prior(prop.tree, grid, prior)
                - oracle_log_prior(tree, grid, prior)
                + oracle_log_marglik(prop.tree, X, r, tau_sq, prior.leaf_sd)
                - oracle_log_marglik(tree, X, r, tau_sq, prior.leaf_sd)
                + lb - lf
            )
            assert internal == pytest.approx(oracle, abs=1e-12)
        assert checked >= 20, f"only {checked} feasible {kind} proposals"


def _suff(tree, X, r):
    assign = tree.assign(X)
    L = tree.num_leaves()
    return (np.bincount(assign, minlength=L),
            np.bincount(assign, weights=r, minlength=L))


# ---------------------------------------------------------------------------
# Detailed balance on an enumerable toy posterior.
# ---------------------------------------------------------------------------


def structure_key(tree):
    """Splits only; leaf values are irrelevant to the structure posterior."""
    return repr([
        ("s", n.var, n.cut) if not n.is_leaf else ("l",)
        for n in walk(tree.root)
    ])


def enumerate_structures(X, grid, prior):
    """All feasible structures over the toy grid (every leaf non-empty)."""
    rules = [(v, float(c)) for v in range(grid.num_predictors) for c in grid[v]]
    seen = {}
    frontier = [Tree()]
    while frontier:
        tree = frontier.pop()
        k = structure_key(tree)
        if k in seen:
            continue
        seen[k] = tree
        for leaf in leaves(tree):
            for var, cut in rules:
                cand = tree.clone()
                target = cand.node_at(tree.path_to(leaf))
                target.var, target.cut = var, cut
                target.left = Node(depth=target.depth + 1, parent=target)
                target.right = Node(depth=target.depth + 1, parent=target)
                assign = cand.assign(X)
                counts = np.bincount(assign, minlength=cand.num_leaves())
                if (counts > 0).all():
                    frontier.append(cand)
    return seen


class TestDetailedBalance:
    def test_visit_frequencies_match_enumerated_posterior(self):
        rng = np.random.default_rng(77)
        # two binary predictors -> one cutpoint each, 9 reachable structures
        X = np.array([[i % 2, (i // 2) % 2] for i in range(12)], dtype=float)
        r = rng.standard_normal(12) * 0.8
        grid = CutpointGrid(X, 10)
        prior = TreePrior(split_base=0.6, leaf_sd=0.5)
        tau_sq = 0.5

        states = enumerate_structures(X, grid, prior)
        assert len(states) == 9
        log_post = {
            k: oracle_log_prior(t, grid, prior)
            + oracle_log_marglik(t, X, r, tau_sq, prior.leaf_sd)
            for k, t in states.items()
        }
        mx = max(log_post.values())
        z = sum(math.exp(v - mx) for v in log_post.values())
        exact = {k: math.exp(v - mx) / z for k, v in log_post.items()}

        tree = Tree()
        n_iter, n_batches = 60_000, 40
        batch = n_iter // n_batches
        freqs = {k: np.zeros(n_batches) for k in states}
        for b in range(n_batches):
            for _ in range(batch):
                tree, _, _, _ = update_tree(tree, X, grid, r, tau_sq, prior, rng)
                freqs[structure_key(tree)][b] += 1.0 / batch

        for k, target in exact.items():
            est = freqs[k].mean()
            se = freqs[k].std(ddof=1) / math.sqrt(n_batches)
            assert abs(est - target) <= 3.0 * se + 1e-12, (
                f"state {k}: est {est:.4f}, exact {target:.4f}, se {se:.4f}"
            )


# ---------------------------------------------------------------------------
# Structural machinery.
# ---------------------------------------------------------------------------


class TestTreeBasics:
    def test_assign_routes_rows(self):
        tree = Tree()
        root = tree.root
        root.var, root.cut = 0, 0.5
        root.left = Node(depth=1, parent=root)
        root.right = Node(depth=1, parent=root)
        root.right.var, root.right.cut = 1, 0.3
        root.right.left = Node(depth=2, parent=root.right)
        root.right.right = Node(depth=2, parent=root.right)
        X = np.array([[0.2, 0.9], [0.7, 0.1], [0.9, 0.9], [0.5, 0.0]])
        # DFS leaf order: left(0), right-left(1), right-right(2)
        assert tree.assign(X).tolist() == [0, 1, 2, 0]
        assert tree.num_leaves() == 3
        assert tree.mean_leaf_depth() == pytest.approx((1 + 2 + 2) / 3)

    def test_cutpoint_grid_drops_max_and_dedups(self):
        X = np.column_stack([
            np.repeat([0.0, 1.0], 5),
            np.arange(10, dtype=float),
        ])
        grid = CutpointGrid(X, 100)
        assert grid[0].tolist() == [0.0]
        assert len(grid[1]) <= 100
        assert np.all(grid[1] < 9.0)

    def test_default_leaf_sd(self):
        assert default_leaf_sd(100) == pytest.approx(3.0 / (2 * 10.0))
        assert default_leaf_sd(50, k=3.0) == pytest.approx(3.0 / (3 * math.sqrt(50)))

    def test_prior_validation(self):
        with pytest.raises(ValueError):
            TreePrior(proposal_probs=(0.5, 0.5, 0.5, 0.5))
        with pytest.raises(ValueError):
            TreePrior(split_base=1.5)

    def test_leaf_posterior_moments(self):
        mean, var = leaf_posterior_moments(4, 2.0, 1.0, 0.5)
        prec = 4 / 1.0 + 1 / 0.25
        assert var == pytest.approx(1 / prec)
        assert mean == pytest.approx((2.0 / 1.0) / prec)


class TestSerialization:
    def _random_forest(self, X, grid, prior, rng, m=5):
        trees = [grow_random_tree(X, grid, prior, rng, steps=rng.integers(0, 5))
                 for _ in range(m)]
        for t in trees:
            for i, leaf in enumerate(leaves(t)):
                leaf.value = float(rng.standard_normal())
        return Forest(trees)

    def test_record_round_trip(self, fixture_10rows):
        X, r, grid, prior = fixture_10rows
        rng = np.random.default_rng(5)
        forest = self._random_forest(X, grid, prior, rng)
        rec = forest_records(forest)
        back = forest_from_records(rec)
        assert forest_records(back) == rec
        assert np.allclose(fitted(back, X), fitted(forest, X))

    def test_packed_matches_object_eval(self, fixture_10rows):
        X, r, grid, prior = fixture_10rows
        rng = np.random.default_rng(6)
        forest = self._random_forest(X, grid, prior, rng, m=8)
        packed = pack_forest(forest)
        assert np.allclose(packed_fitted(packed, X), fitted(forest, X))
        Xnew = np.random.default_rng(7).uniform(size=(30, 3))
        assert np.allclose(packed_fitted(packed, Xnew), fitted(forest, Xnew))

    def test_packed_record_round_trip(self, fixture_10rows):
        X, _, grid, prior = fixture_10rows
        rng = np.random.default_rng(8)
        forest = self._random_forest(X, grid, prior, rng, m=4)
        packed = pack_forest(forest)
        rec = packed_records(packed)
        assert rec == forest_records(forest)
        back = packed_from_records(rec)
        assert np.allclose(packed_fitted(back, X), packed_fitted(packed, X))

    def test_scaled_multiplies_leaves_only(self, fixture_10rows):
        X, _, grid, prior = fixture_10rows
        rng = np.random.default_rng(9)
        forest = self._random_forest(X, grid, prior, rng, m=3)
        packed = pack_forest(forest)
        assert np.allclose(
            packed_fitted(packed.scaled(2.5), X), 2.5 * packed_fitted(packed, X)
        )
