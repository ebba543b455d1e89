"""Log-linear BART for Poisson counts.

The rate is ``offset * prod_t lambda_t(x)``: each tree contributes a
positive multiplicative leaf value.  With a Gamma(a, b) prior on leaf
values and the other trees' product folded into the offset, the leaf values
integrate out in closed form, so tree moves (grow, prune, change) are
accepted on the Gamma-Poisson marginal likelihood and the leaves are then
redrawn from their Gamma full conditionals.

The leaf prior shape is picked so that the sum of ``m`` log-leaves has
prior standard deviation ``leaf_prior_scale`` (``m * trigamma(a) = s^2``);
the rate centres the product at the pooled event rate.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from scipy import optimize, special

from .table import OutcomeTable, OutcomeValidationError

GROW, PRUNE, CHANGE = "grow", "prune", "change"


@dataclass(frozen=True)
class BARTConfig:
    m: int = 200
    n_iter: int = 1500
    n_burn: int = 500
    seed: int = 0
    alpha: float = 0.95
    beta_depth: float = 2.0
    leaf_prior_scale: float = 1.0
    p_grow: float = 0.4
    p_prune: float = 0.4
    p_change: float = 0.2
    max_depth: int | None = None
    thin: int = 1

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("need at least one tree")
        if not (self.n_iter > self.n_burn >= 0):
            raise ValueError("need n_iter > n_burn >= 0")
        if abs(self.p_grow + self.p_prune + self.p_change - 1) > 1e-12:
            raise ValueError("move probabilities must sum to 1")


def leaf_prior(m: int, leaf_prior_scale: float, base_rate: float) -> tuple[float, float]:
    """Gamma (shape, rate) for one tree's leaves."""
    target = leaf_prior_scale ** 2 / m
    a = optimize.brentq(lambda s: special.polygamma(1, s) - target, 1e-8, 1e12)
    b = np.exp(special.digamma(a) - np.log(base_rate) / m)
    return float(a), float(b)


def log_marginal(a: float, b: float, sum_y, sum_off):
    """log of the Gamma-Poisson leaf marginal, dropping terms common to all trees."""
    return a * np.log(b) - special.gammaln(a) + special.gammaln(a + sum_y) - (a + sum_y) * np.log(b + sum_off)


class Tree:
    """Mutable decision tree over row indices of a fixed feature matrix."""

    def __init__(self, n_obs: int):
        self.var = [-1]
        self.cut = [0.0]
        self.left = [-1]
        self.right = [-1]
        self.parent = [-1]
        self.depth = [0]
        self.log_value = [0.0]
        self.leaves = {0}
        self.internal = set()
        self.free = []
        self.leaf_of = np.zeros(n_obs, dtype=np.int64)

    def _new_node(self, parent, depth):
        if self.free:
            k = self.free.pop()
            self.var[k], self.cut[k], self.left[k], self.right[k] = -1, 0.0, -1, -1
            self.parent[k], self.depth[k], self.log_value[k] = parent, depth, 0.0
            return k
        for lst, v in ((self.var, -1), (self.cut, 0.0), (self.left, -1), (self.right, -1),
                       (self.parent, parent), (self.depth, depth), (self.log_value, 0.0)):
            lst.append(v)
        return len(self.var) - 1

    def nog(self) -> list:
        """Internal nodes whose children are both leaves, in sorted order."""
        return sorted(k for k in self.internal if self.left[k] in self.leaves and self.right[k] in self.leaves)

    def rows(self, node) -> np.ndarray:
        if node in self.leaves:
            return np.flatnonzero(self.leaf_of == node)
        return np.flatnonzero((self.leaf_of == self.left[node]) | (self.leaf_of == self.right[node]))

    def split(self, node, var, cut, X):
        idx = np.flatnonzero(self.leaf_of == node)
        lnode = self._new_node(node, self.depth[node] + 1)
        rnode = self._new_node(node, self.depth[node] + 1)
        self.var[node], self.cut[node] = var, cut
        self.left[node], self.right[node] = lnode, rnode
        self.leaves.discard(node)
        self.internal.add(node)
        self.leaves.update((lnode, rnode))
        goes_left = X[idx, var] <= cut
        self.leaf_of[idx[goes_left]] = lnode
        self.leaf_of[idx[~goes_left]] = rnode

    def collapse(self, node):
        lnode, rnode = self.left[node], self.right[node]
        self.leaf_of[(self.leaf_of == lnode) | (self.leaf_of == rnode)] = node
        self.leaves.difference_update((lnode, rnode))
        self.free.extend((lnode, rnode))
        self.internal.discard(node)
        self.leaves.add(node)
        self.var[node], self.left[node], self.right[node] = -1, -1, -1

    def resplit(self, node, var, cut, X):
        idx = self.rows(node)
        self.var[node], self.cut[node] = var, cut
        goes_left = X[idx, var] <= cut
        self.leaf_of[idx[goes_left]] = self.left[node]
        self.leaf_of[idx[~goes_left]] = self.right[node]

    def snapshot(self) -> "FlatTree":
        """Compact arrays with the root at position 0."""
        order = []
        stack = [0]
        while stack:
            k = stack.pop()
            order.append(k)
            if self.var[k] >= 0:
                stack.extend((self.right[k], self.left[k]))
        pos = {k: i for i, k in enumerate(order)}
        feat = np.array([self.var[k] for k in order], dtype=np.int64)
        return FlatTree(
            feature=feat,
            threshold=np.array([self.cut[k] for k in order]),
            left=np.array([pos[self.left[k]] if feat[i] >= 0 else -1 for i, k in enumerate(order)], dtype=np.int64),
            right=np.array([pos[self.right[k]] if feat[i] >= 0 else -1 for i, k in enumerate(order)], dtype=np.int64),
            log_value=np.array([self.log_value[k] if feat[i] < 0 else 0.0 for i, k in enumerate(order)]),
        )


@dataclass(frozen=True)
class FlatTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    log_value: np.ndarray

    def leaf_values(self) -> np.ndarray:
        return np.exp(self.log_value[self.feature < 0])

    def depth(self) -> int:
        d = np.zeros(len(self.feature), dtype=int)
        for i in range(len(self.feature)):
            if self.feature[i] >= 0:
                d[self.left[i]] = d[self.right[i]] = d[i] + 1
        return int(d.max())


@numba.njit(cache=True)
def _predict_log(feature, threshold, left, right, log_value, roots, X):
    n = X.shape[0]
    out = np.zeros(n)
    for i in range(n):
        s = 0.0
        for t in range(roots.shape[0]):
            node = roots[t]
            while feature[node] >= 0:
                if X[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            s += log_value[node]
        out[i] = s
    return out


class TreeEnsemble:
    """One posterior draw: ``m`` trees packed into shared arrays."""

    def __init__(self, trees):
        self.trees = list(trees)
        sizes = [len(t.feature) for t in self.trees]
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        self.roots = starts
        self.feature = np.concatenate([t.feature for t in self.trees])
        self.threshold = np.concatenate([t.threshold for t in self.trees])
        shift = lambda arr, s: np.where(arr >= 0, arr + s, -1)
        self.left = np.concatenate([shift(t.left, s) for t, s in zip(self.trees, starts)])
        self.right = np.concatenate([shift(t.right, s) for t, s in zip(self.trees, starts)])
        self.log_value = np.concatenate([t.log_value for t in self.trees])

    @property
    def m(self) -> int:
        return len(self.trees)

    def predict_log(self, X) -> np.ndarray:
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=float)
        return _predict_log(self.feature, self.threshold, self.left, self.right, self.log_value, self.roots, X)

    def to_dict(self) -> dict:
        return {"trees": [{"feature": t.feature.tolist(), "threshold": t.threshold.tolist(),
                           "left": t.left.tolist(), "right": t.right.tolist(),
                           "log_value": t.log_value.tolist()} for t in self.trees]}

    @classmethod
    def from_dict(cls, d) -> "TreeEnsemble":
        return cls([FlatTree(np.array(t["feature"], dtype=np.int64), np.array(t["threshold"], dtype=float),
                             np.array(t["left"], dtype=np.int64), np.array(t["right"], dtype=np.int64),
                             np.array(t["log_value"], dtype=float)) for t in d["trees"]])


@dataclass
class BARTPosterior:
    ensembles: list
    leaf_shape: float
    leaf_rate: float
    feature_names: tuple
    x_range: tuple
    move_counts: dict

    model = "bart"

    @property
    def n_draws(self) -> int:
        return len(self.ensembles)

    def log_rate_factor(self, x, z, g) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        F = np.column_stack([x, np.broadcast_to(z, len(x)), np.broadcast_to(g, len(x))])
        return np.array([e.predict_log(F) for e in self.ensembles])

    def extrapolates(self, x, z, g) -> bool:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        F = np.column_stack([x, np.broadcast_to(z, len(x)), np.broadcast_to(g, len(x))])
        if len(self.x_range) != 2:
            return False  # training ranges not recorded (e.g. reloaded from disk)
        lo, hi = self.x_range
        return bool(np.any(F < lo) or np.any(F > hi))

    def to_records(self):
        for d, e in enumerate(self.ensembles):
            yield {"model": "bart", "draw": d, "feature_names": list(self.feature_names),
                   "leaf_shape": self.leaf_shape, "leaf_rate": self.leaf_rate, **e.to_dict()}

    @classmethod
    def from_records(cls, records) -> "BARTPosterior":
        records = list(records)
        r0 = records[0]
        return cls([TreeEnsemble.from_dict(r) for r in records], r0["leaf_shape"], r0["leaf_rate"],
                   tuple(r0["feature_names"]), (), {})


class _Sampler:
    """State and moves for Bayesian backfitting over ``m`` trees."""

    def __init__(self, X, y, offset, config: BARTConfig, rng):
        self.X, self.y, self.offset, self.cfg, self.rng = X, y.astype(float), offset, config, rng
        n = len(y)
        base_rate = (self.y.sum() + 0.5) / offset.sum()
        self.a, self.b = leaf_prior(config.m, config.leaf_prior_scale, base_rate)
        self.trees = [Tree(n) for _ in range(config.m)]
        self.tree_log = np.zeros((config.m, n))
        # start every leaf at the prior centre so the product starts at base_rate
        start = (special.digamma(self.a) - np.log(self.b))
        self.tree_log[:] = start
        for t in self.trees:
            t.log_value[0] = start
        self.total_log = self.tree_log.sum(axis=0)
        self.counts = {k: [0, 0] for k in (GROW, PRUNE, CHANGE)}

    # -- priors and marginals ------------------------------------------
    def p_split(self, depth: int) -> float:
        if self.cfg.max_depth is not None and depth >= self.cfg.max_depth:
            return 0.0
        return self.cfg.alpha * (1.0 + depth) ** (-self.cfg.beta_depth)

    def move_probs(self, tree: Tree) -> dict:
        if len(tree.leaves) == 1:
            return {GROW: 1.0, PRUNE: 0.0, CHANGE: 0.0}
        return {GROW: self.cfg.p_grow, PRUNE: self.cfg.p_prune, CHANGE: self.cfg.p_change}

    def split_options(self, idx):
        """Splittable variables and, for each, candidate cutpoints (all
        observed values but the largest) among rows ``idx``."""
        opts = {}
        for v in range(self.X.shape[1]):
            vals = np.unique(self.X[idx, v])
            if vals.size > 1:
                opts[v] = vals[:-1]
        return opts

    def leaf_lml(self, idx, eff_off) -> float:
        return float(log_marginal(self.a, self.b, self.y[idx].sum(), eff_off[idx].sum()))

    # -- moves ------------------------------------------------------------
    def grow_log_ratio(self, tree: Tree, leaf, var, cut, n_opts, n_cuts, eff_off):
        """log MH ratio for splitting ``leaf`` on (var, cut); the tree is
        left unchanged."""
        idx = np.flatnonzero(tree.leaf_of == leaf)
        goes_left = self.X[idx, var] <= cut
        li, ri = idx[goes_left], idx[~goes_left]
        d = tree.depth[leaf]
        ps, pc = self.p_split(d), self.p_split(d + 1)
        if ps == 0.0:
            return -np.inf
        n_leaves = len(tree.leaves)
        nog_after = len(tree.nog()) + 1 - (1 if tree.parent[leaf] >= 0 and self._sibling_is_leaf(tree, leaf) else 0)
        prob_grow = self.move_probs(tree)[GROW]
        prob_prune_after = self.cfg.p_prune  # the grown tree has at least two leaves
        log_prior = np.log(ps) + 2 * np.log1p(-pc) - np.log1p(-ps) - np.log(n_opts) - np.log(n_cuts)
        log_prop = (np.log(prob_prune_after) - np.log(nog_after)) - (
            np.log(prob_grow) - np.log(n_leaves) - np.log(n_opts) - np.log(n_cuts))
        log_lik = self.leaf_lml(li, eff_off) + self.leaf_lml(ri, eff_off) - self.leaf_lml(idx, eff_off)
        return float(log_prior + log_prop + log_lik)

    @staticmethod
    def _sibling_is_leaf(tree: Tree, node) -> bool:
        p = tree.parent[node]
        sib = tree.right[p] if tree.left[p] == node else tree.left[p]
        return sib in tree.leaves

    def prune_log_ratio(self, tree: Tree, node, eff_off):
        """log MH ratio for collapsing the children of ``node``."""
        lnode, rnode = tree.left[node], tree.right[node]
        li = np.flatnonzero(tree.leaf_of == lnode)
        ri = np.flatnonzero(tree.leaf_of == rnode)
        idx = np.concatenate([li, ri])
        opts = self.split_options(idx)
        n_opts, n_cuts = len(opts), len(opts[tree.var[node]])
        d = tree.depth[node]
        ps, pc = self.p_split(d), self.p_split(d + 1)
        n_nog = len(tree.nog())
        n_leaves_after = len(tree.leaves) - 1
        prob_grow_after = 1.0 if n_leaves_after == 1 else self.cfg.p_grow
        log_prior = np.log1p(-ps) - (np.log(ps) + 2 * np.log1p(-pc) - np.log(n_opts) - np.log(n_cuts))
        log_prop = (np.log(prob_grow_after) - np.log(n_leaves_after) - np.log(n_opts) - np.log(n_cuts)) - (
            np.log(self.cfg.p_prune) - np.log(n_nog))
        log_lik = self.leaf_lml(idx, eff_off) - self.leaf_lml(li, eff_off) - self.leaf_lml(ri, eff_off)
        return float(log_prior + log_prop + log_lik)

    def update_tree(self, t: int):
        tree = self.trees[t]
        rng = self.rng
        other_log = self.total_log - self.tree_log[t]
        eff_off = self.offset * np.exp(other_log)

        probs = self.move_probs(tree)
        u = rng.uniform()
        move = GROW if u < probs[GROW] else (PRUNE if u < probs[GROW] + probs[PRUNE] else CHANGE)
        self.counts[move][0] += 1
        if move == GROW:
            leaves = sorted(tree.leaves)
            leaf = leaves[rng.integers(len(leaves))]
            opts = self.split_options(np.flatnonzero(tree.leaf_of == leaf))
            if opts:
                keys = sorted(opts)
                var = keys[rng.integers(len(keys))]
                cut = float(opts[var][rng.integers(len(opts[var]))])
                lr = self.grow_log_ratio(tree, leaf, var, cut, len(keys), len(opts[var]), eff_off)
                if np.log(rng.uniform()) < lr:
                    tree.split(leaf, var, cut, self.X)
                    self.counts[move][1] += 1
        elif move == PRUNE:
            nog = tree.nog()
            node = nog[rng.integers(len(nog))]
            lr = self.prune_log_ratio(tree, node, eff_off)
            if np.log(rng.uniform()) < lr:
                tree.collapse(node)
                self.counts[move][1] += 1
        else:
            nog = tree.nog()
            node = nog[rng.integers(len(nog))]
            idx = tree.rows(node)
            opts = self.split_options(idx)
            keys = sorted(opts)
            var = keys[rng.integers(len(keys))]
            cut = float(opts[var][rng.integers(len(opts[var]))])
            l_old = self.leaf_lml(np.flatnonzero(tree.leaf_of == tree.left[node]), eff_off) + \
                self.leaf_lml(np.flatnonzero(tree.leaf_of == tree.right[node]), eff_off)
            goes_left = self.X[idx, var] <= cut
            l_new = self.leaf_lml(idx[goes_left], eff_off) + self.leaf_lml(idx[~goes_left], eff_off)
            if np.log(rng.uniform()) < l_new - l_old:
                tree.resplit(node, var, cut, self.X)
                self.counts[move][1] += 1

        self.draw_leaves(tree, eff_off)
        self.tree_log[t] = np.asarray(tree.log_value)[tree.leaf_of]
        self.total_log = other_log + self.tree_log[t]

    def draw_leaves(self, tree: Tree, eff_off):
        size = len(tree.var)
        sy = np.bincount(tree.leaf_of, weights=self.y, minlength=size)
        so = np.bincount(tree.leaf_of, weights=eff_off, minlength=size)
        for leaf in sorted(tree.leaves):
            lam = self.rng.gamma(self.a + sy[leaf], 1.0 / (self.b + so[leaf]))
            tree.log_value[leaf] = np.log(max(lam, np.finfo(float).tiny))


def fit_loglinear_bart(table: OutcomeTable, config: BARTConfig = BARTConfig()) -> BARTPosterior:
    if len(table) == 0:
        raise OutcomeValidationError("empty outcome table")
    X = np.ascontiguousarray(table.features)
    rng = np.random.default_rng(config.seed)
    s = _Sampler(X, table.y, table.offset, config, rng)
    ensembles = []
    for it in range(config.n_iter):
        for t in range(config.m):
            s.update_tree(t)
        if it >= config.n_burn and (it - config.n_burn) % config.thin == 0:
            ensembles.append(TreeEnsemble([tr.snapshot() for tr in s.trees]))
    return BARTPosterior(
        ensembles=ensembles, leaf_shape=s.a, leaf_rate=s.b, feature_names=table.feature_names,
        x_range=(X.min(axis=0), X.max(axis=0)), move_counts={k: tuple(v) for k, v in s.counts.items()},
    )
