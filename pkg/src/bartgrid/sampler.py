"""Sum-of-trees MCMC core: priors, sufficient statistics, birth/death moves.

Every data-dependent quantity the sampler consumes is a sum of per-observation
terms, reduced over fixed "blocks" of rows with a balanced pairwise fold.  A
worker holding several blocks folds its own blocks and ships one partial; the
master folds the partials with the same tree.  Because the fold groupings line
up whenever each worker holds a power-of-two number of blocks, the chain is
bit-identical whether those sums are computed serially or across any such
worker layout.

The chain itself is driven by `run_chain_core`, which is shared between the
serial sampler and the distributed master: both consume the exact same random
variate sequence, so equal statistics imply bit-equal chains.
"""
from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import chi2

from .trees import (
    MAX_DEPTH,
    CutpointGrid,
    Tree,
    available_cut_range,
    children_ids,
    enumerate_nodes,
    node_depth,
    tree_lines,
)

BIRTH = "birth"
DEATH = "death"


# ---------------------------------------------------------------------------
# Sufficient statistics and deterministic reductions
# ---------------------------------------------------------------------------

@dataclass(slots=True)
class SuffStats:
    """(count, residual sum, residual sum of squares) for one node.

    Additive across disjoint row sets, which is what lets shards contribute
    fixed-size partials regardless of how many rows they hold.
    """

    n: int = 0
    s: float = 0.0
    s2: float = 0.0

    def __add__(self, other: "SuffStats") -> "SuffStats":
        return SuffStats(self.n + other.n, self.s + other.s, self.s2 + other.s2)


@dataclass(slots=True)
class StatsVec:
    """Per-node SuffStats columns for one tree (ascending node id)."""

    n: np.ndarray
    s: np.ndarray
    s2: np.ndarray

    def __add__(self, other: "StatsVec") -> "StatsVec":
        return StatsVec(self.n + other.n, self.s + other.s, self.s2 + other.s2)

    def to_list(self) -> list[SuffStats]:
        return [
            SuffStats(int(n), float(s), float(s2))
            for n, s, s2 in zip(self.n, self.s, self.s2)
        ]


def pairwise_fold(items: Sequence):
    """Combine a list with a fixed balanced pairwise tree.

    The grouping depends only on the list length.  Folding B leaves directly
    gives the same result as folding chunk-folds, provided every chunk holds a
    power-of-two count of leaves; that regrouping property is what makes the
    reduction independent of how blocks are spread over workers.
    """
    if not items:
        raise ValueError("cannot fold an empty list")
    level = list(items)
    while len(level) > 1:
        nxt = [level[i] + level[i + 1] for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


def partition_bounds(n: int, parts: int) -> np.ndarray:
    """Boundaries of `parts` contiguous near-equal slices of range(n).

    Sizes differ by at most one; the remainder goes to the leading slices.
    """
    if parts < 1:
        raise ValueError("parts must be >= 1")
    base, rem = divmod(n, parts)
    sizes = np.full(parts, base, dtype=np.int64)
    sizes[:rem] += 1
    return np.concatenate(([0], np.cumsum(sizes)))


# ---------------------------------------------------------------------------
# Priors and conjugate draws
# ---------------------------------------------------------------------------

@dataclass(slots=True)
class PriorParams:
    """Resolved prior for one run (leaf scale and sigma scale already derived)."""

    m: int
    alpha: float
    beta: float
    kfac: float
    tau: float
    nu: float
    lam: float
    min_leaf: int

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.beta < 0.0:
            raise ValueError("beta must be >= 0")
        if self.kfac <= 0.0 or self.tau <= 0.0:
            raise ValueError("kfac and tau must be positive")
        if self.nu <= 0.0 or self.lam <= 0.0:
            raise ValueError("nu and lambda must be positive")
        if self.min_leaf < 0:
            raise ValueError("min_leaf must be >= 0")


def split_prior_prob(depth: int, alpha: float, beta: float) -> float:
    """Prior probability that a node at `depth` splits: alpha * (1+depth)^-beta."""
    if depth < 0:
        raise ValueError("depth must be >= 0")
    return alpha * (1.0 + depth) ** (-beta)


def _p_split(depth: int, alpha: float, beta: float) -> float:
    # Depth cap: node ids must stay in 31 bits, so depth-30 nodes never split.
    if depth >= MAX_DEPTH:
        return 0.0
    return split_prior_prob(depth, alpha, beta)


def log_marginal_likelihood(stats: SuffStats, sigma: float, tau: float) -> float:
    """Log of the node's integrated likelihood over its mean, against mu=0.

    Depends on the data only through (n, s); the shared Gaussian baseline
    cancels between the two sides of any birth/death comparison.
    """
    if stats.n == 0:
        return 0.0
    s2 = sigma * sigma
    t2 = tau * tau
    denom = s2 + stats.n * t2
    return 0.5 * math.log(s2 / denom) + t2 * stats.s * stats.s / (2.0 * s2 * denom)


def draw_mu(stats: SuffStats, sigma: float, tau: float, rng: np.random.Generator) -> float:
    """Conjugate normal draw of one leaf mean given its node's statistics."""
    s2 = sigma * sigma
    t2 = tau * tau
    denom = s2 + stats.n * t2
    mean = t2 * stats.s / denom
    sd = math.sqrt(s2 * t2 / denom)
    return mean + sd * float(rng.standard_normal())


def draw_mus(
    stats_list: Sequence[SuffStats], sigma: float, tau: float, rng: np.random.Generator
) -> np.ndarray:
    """Leaf means for all terminal nodes of one tree, in list order."""
    s2 = sigma * sigma
    t2 = tau * tau
    denom = s2 + t2 * np.array([st.n for st in stats_list], dtype=np.float64)
    means = t2 * np.array([st.s for st in stats_list], dtype=np.float64) / denom
    sds = np.sqrt(s2 * t2 / denom)
    return means + sds * rng.standard_normal(len(stats_list))


def draw_sigma(
    n_total: int, rss: float, nu: float, lam: float, rng: np.random.Generator
) -> float:
    """Residual-sd draw: sqrt((nu*lambda + rss) / chisq(nu + n))."""
    if rss < 0:
        raise ValueError("rss must be >= 0")
    return math.sqrt((nu * lam + rss) / rng.chisquare(nu + n_total))


def sigma_lambda(sd_y: float, nu: float, sigquant: float) -> float:
    """Scale of the sigma prior, set so P(sigma < sd_y) = sigquant."""
    if not 0.0 < sigquant < 1.0:
        raise ValueError("sigma quantile must lie in (0, 1)")
    q = chi2.ppf(1.0 - sigquant, nu)
    return float(sd_y * sd_y * q / nu)


# ---------------------------------------------------------------------------
# Proposals and MH acceptance
# ---------------------------------------------------------------------------

@dataclass(slots=True)
class Proposal:
    """One birth or death proposal on tree `tree_index`."""

    move: str
    tree_index: int
    node_id: int
    v: int = -1
    c: int = -1


def propose(
    tree: Tree, grid: CutpointGrid, rng: np.random.Generator, tree_index: int = 0
) -> Proposal | None:
    """Draw a birth/death proposal, or None when the drawn birth has no rule.

    Birth probability is 1 for a single-node tree and 1/2 otherwise.  A birth
    picks a terminal node uniformly, a variable uniformly among those with at
    least one cutpoint not excluded by ancestor rules, then a cutpoint
    uniformly in the surviving range.  A death picks a nog node uniformly.
    """
    terminals = enumerate_nodes(tree, "terminal")
    p_birth = 1.0 if len(terminals) == 1 else 0.5
    if rng.random() < p_birth:
        node = terminals[int(rng.integers(len(terminals)))]
        if node_depth(node) >= MAX_DEPTH:
            return None
        ranges = [
            (v, lo, hi)
            for v in range(grid.n_vars)
            for lo, hi in [available_cut_range(tree, node.id, v, grid.count(v))]
            if hi > lo
        ]
        if not ranges:
            return None
        v, lo, hi = ranges[int(rng.integers(len(ranges)))]
        c = int(rng.integers(lo, hi))
        return Proposal(BIRTH, tree_index, node.id, v, c)
    nogs = enumerate_nodes(tree, "nog")
    node = nogs[int(rng.integers(len(nogs)))]
    return Proposal(DEATH, tree_index, node.id)


def _nog_count_after_birth(tree: Tree, node_id: int) -> int:
    """Nog count the tree would have after a birth at terminal `node_id`."""
    count = len(enumerate_nodes(tree, "nog")) + 1
    node = tree.node(node_id)
    parent = node.parent
    if parent is not None and parent.is_nog:
        count -= 1
    return count


def accept_log_ratio(
    tree: Tree,
    prop: Proposal,
    stats_left: SuffStats,
    stats_right: SuffStats,
    sigma: float,
    prior: PriorParams,
    prior_only: bool = False,
) -> float:
    """Log MH ratio (prior x proposal x likelihood) for a birth or death.

    The rule prior matches the rule proposal (uniform variable, then uniform
    cutpoint), so rule terms cancel and the ratio depends on the data only
    through the two child statistics.  `prior_only` zeroes the likelihood
    term, turning the chain into a sampler of the tree prior.
    """
    merged = stats_left + stats_right
    if prop.move == BIRTH:
        if min(stats_left.n, stats_right.n) < prior.min_leaf:
            return -math.inf
        d = node_depth(tree.node(prop.node_id))
        p_d = _p_split(d, prior.alpha, prior.beta)
        p_d1 = _p_split(d + 1, prior.alpha, prior.beta)
        b = len(enumerate_nodes(tree, "terminal"))
        p_birth = 1.0 if b == 1 else 0.5
        nog_after = _nog_count_after_birth(tree, prop.node_id)
        p_death_after = 0.5
        log_ratio = (
            math.log(p_d)
            + 2.0 * math.log1p(-p_d1)
            - math.log1p(-p_d)
            + math.log(p_death_after * b)
            - math.log(p_birth * nog_after)
        )
        if not prior_only:
            log_ratio += (
                log_marginal_likelihood(stats_left, sigma, prior.tau)
                + log_marginal_likelihood(stats_right, sigma, prior.tau)
                - log_marginal_likelihood(merged, sigma, prior.tau)
            )
        return log_ratio
    if prop.move == DEATH:
        d = node_depth(tree.node(prop.node_id))
        p_d = _p_split(d, prior.alpha, prior.beta)
        p_d1 = _p_split(d + 1, prior.alpha, prior.beta)
        b = len(enumerate_nodes(tree, "terminal"))
        nogs = len(enumerate_nodes(tree, "nog"))
        p_death = 0.5
        p_birth_after = 1.0 if b - 1 == 1 else 0.5
        log_ratio = (
            -math.log(p_d)
            - 2.0 * math.log1p(-p_d1)
            + math.log1p(-p_d)
            + math.log(p_birth_after * nogs)
            - math.log(p_death * (b - 1))
        )
        if not prior_only:
            log_ratio += (
                log_marginal_likelihood(merged, sigma, prior.tau)
                - log_marginal_likelihood(stats_left, sigma, prior.tau)
                - log_marginal_likelihood(stats_right, sigma, prior.tau)
            )
        return log_ratio
    raise ValueError(f"unknown move {prop.move!r}")


# ---------------------------------------------------------------------------
# Shard-local data state
# ---------------------------------------------------------------------------

class ShardData:
    """One shard's rows plus the cached fit/residual and leaf assignments.

    `blocks` are the local slices of the global reduction blocks this shard
    owns; every sum leaves the shard as a pairwise fold of per-block sums so
    the master can keep folding without caring how rows map to workers.
    """

    __slots__ = ("x", "ys", "fit", "residual", "leaf", "blocks", "_pos_cache")

    def __init__(self, x: np.ndarray, ys: np.ndarray, m: int, blocks: Sequence[tuple[int, int]]):
        self.x = np.ascontiguousarray(x, dtype=np.float64)
        self.ys = np.asarray(ys, dtype=np.float64)
        self.fit = np.zeros_like(self.ys)
        self.residual = self.ys.copy()
        self.leaf = np.ones((m, self.ys.size), dtype=np.uint32)
        self.blocks = list(blocks)
        # Row -> terminal-slot positions computed by the last mu_stats call;
        # reused by the immediately following apply_mus for the same tree.
        self._pos_cache: tuple[int, np.ndarray, np.ndarray] | None = None

    @property
    def n(self) -> int:
        return self.ys.size

    # -- statistics ---------------------------------------------------------

    def move_stats_blocks(
        self, j: int, prop: Proposal, cutval: float, mu_left: float, mu_right: float
    ) -> list[tuple[SuffStats, SuffStats]]:
        """Per-block child statistics for a proposed move on tree j.

        For a birth, `mu_left == mu_right` is the mean of the splitting node
        and `cutval` partitions its rows.  For a death, the children already
        exist and carry their own means.
        """
        leaf = self.leaf[j]
        out = []
        for lo, hi in self.blocks:
            if prop.move == BIRTH:
                sel = leaf[lo:hi] == prop.node_id
                r = self.residual[lo:hi][sel] + mu_left
                go_left = self.x[lo:hi, prop.v][sel] < cutval
                r_l = r[go_left]
                r_r = r[~go_left]
            else:
                left_id, right_id = children_ids(prop.node_id)
                sel_l = leaf[lo:hi] == left_id
                sel_r = leaf[lo:hi] == right_id
                r_l = self.residual[lo:hi][sel_l] + mu_left
                r_r = self.residual[lo:hi][sel_r] + mu_right
            out.append(
                (
                    SuffStats(r_l.size, float(np.sum(r_l)), float(np.sum(r_l * r_l))),
                    SuffStats(r_r.size, float(np.sum(r_r)), float(np.sum(r_r * r_r))),
                )
            )
        return out

    def mu_stats_blocks(
        self, j: int, terminal_ids: np.ndarray, mus: np.ndarray
    ) -> list[StatsVec]:
        """Per-block partial-residual statistics for every terminal node."""
        leaf = self.leaf[j]
        b = terminal_ids.size
        pos_full = np.searchsorted(terminal_ids, leaf)
        self._pos_cache = (j, terminal_ids, pos_full)
        out = []
        for lo, hi in self.blocks:
            pos = pos_full[lo:hi]
            r = self.residual[lo:hi] + mus[pos]
            out.append(
                StatsVec(
                    np.bincount(pos, minlength=b).astype(np.int64),
                    np.bincount(pos, weights=r, minlength=b),
                    np.bincount(pos, weights=r * r, minlength=b),
                )
            )
        return out

    def rss_blocks(self) -> list[float]:
        return [
            float(np.sum(self.residual[lo:hi] * self.residual[lo:hi]))
            for lo, hi in self.blocks
        ]

    # -- state updates -------------------------------------------------------

    def apply_birth(
        self,
        j: int,
        node_id: int,
        v: int,
        cutval: float,
        mu_old: float,
        mu_left: float,
        mu_right: float,
    ) -> None:
        self._pos_cache = None
        leaf = self.leaf[j]
        rows = np.nonzero(leaf == node_id)[0]
        go_left = self.x[rows, v] < cutval
        left_rows = rows[go_left]
        right_rows = rows[~go_left]
        left_id, right_id = children_ids(node_id)
        for idx, new_id, new_mu in (
            (left_rows, left_id, mu_left),
            (right_rows, right_id, mu_right),
        ):
            delta = new_mu - mu_old
            self.fit[idx] += delta
            self.residual[idx] -= delta
            leaf[idx] = new_id

    def apply_death(
        self, j: int, node_id: int, mu_old_left: float, mu_old_right: float, mu_new: float
    ) -> None:
        self._pos_cache = None
        leaf = self.leaf[j]
        left_id, right_id = children_ids(node_id)
        for child_id, mu_old in ((left_id, mu_old_left), (right_id, mu_old_right)):
            idx = np.nonzero(leaf == child_id)[0]
            delta = mu_new - mu_old
            self.fit[idx] += delta
            self.residual[idx] -= delta
            leaf[idx] = node_id

    def apply_mus(
        self, j: int, terminal_ids: np.ndarray, old_mus: np.ndarray, new_mus: np.ndarray
    ) -> None:
        cache = self._pos_cache
        if cache is not None and cache[0] == j and np.array_equal(cache[1], terminal_ids):
            pos = cache[2]
        else:
            pos = np.searchsorted(terminal_ids, self.leaf[j])
        delta = (new_mus - old_mus)[pos]
        self.fit += delta
        self.residual -= delta


def shard_suffstats(
    shard: ShardData,
    tree: Tree,
    tree_index: int,
    proposal: Proposal | None = None,
    grid: CutpointGrid | None = None,
):
    """Shard-level sufficient statistics, folded over the shard's blocks.

    With a proposal: the (left, right) child statistics of the move.  Without
    one: a list with one SuffStats per terminal node, ascending node id.
    """
    if proposal is not None:
        if grid is None:
            raise ValueError("move statistics need the cutpoint grid")
        return shard_move_stats(shard, tree, grid, proposal)
    return shard_mu_stats(shard, tree, tree_index)


def shard_move_stats(
    shard: ShardData, tree: Tree, grid: CutpointGrid, prop: Proposal
) -> tuple[SuffStats, SuffStats]:
    """(left, right) statistics of a proposed move over one shard."""
    if prop.move == BIRTH:
        node = tree.node(prop.node_id)
        blocks = shard.move_stats_blocks(
            prop.tree_index, prop, grid.value(prop.v, prop.c), node.mu, node.mu
        )
    else:
        node = tree.node(prop.node_id)
        blocks = shard.move_stats_blocks(
            prop.tree_index, prop, 0.0, node.left.mu, node.right.mu  # type: ignore[union-attr]
        )
    lefts, rights = zip(*blocks)
    return pairwise_fold(lefts), pairwise_fold(rights)


def shard_mu_stats(shard: ShardData, tree: Tree, tree_index: int) -> list[SuffStats]:
    """Per-terminal-node statistics of one tree over one shard, ascending id."""
    terminals = enumerate_nodes(tree, "terminal")
    ids = np.array([t.id for t in terminals], dtype=np.uint32)
    mus = np.array([t.mu for t in terminals], dtype=np.float64)
    return pairwise_fold(shard.mu_stats_blocks(tree_index, ids, mus)).to_list()


# ---------------------------------------------------------------------------
# Run configuration and derived constants
# ---------------------------------------------------------------------------

@dataclass(slots=True)
class FitSettings:
    """Everything a fit needs besides the data itself."""

    m: int = 200
    kfac: float = 2.0
    alpha: float = 0.95
    beta: float = 2.0
    nu: float = 3.0
    sigquant: float = 0.9
    numcut: int = 100
    min_leaf: int = 5
    draws: int = 1000
    burn: int = 100
    thin: int = 1
    seed: int = 0
    reduction_blocks: int | None = None
    prior_only: bool = False

    def validate(self) -> None:
        if self.draws <= self.burn or self.burn < 0:
            raise ValueError("draws must exceed burn-in (draws > burn >= 0)")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.numcut < 1:
            raise ValueError("numcut must be >= 1")


@dataclass(slots=True)
class RunDerived:
    """Data-derived constants shared verbatim by master and workers."""

    n_total: int
    y_mid: float
    y_range: float
    sd_scaled: float
    x_min: np.ndarray
    x_max: np.ndarray


def derive_run_constants(
    n_total: int,
    y_min: float,
    y_max: float,
    y_sum: float,
    y_sumsq: float,
    x_min: np.ndarray,
    x_max: np.ndarray,
) -> RunDerived:
    """Scaling constants from reduced data summaries.

    Used identically from full-data summaries (serial) and from folded
    per-worker summaries (distributed), so both paths share every bit.
    """
    if n_total < 2:
        raise ValueError("need at least two observations")
    y_range = y_max - y_min
    if y_range <= 0.0:
        raise ValueError("response is constant; nothing to fit")
    y_mid = 0.5 * (y_min + y_max)
    var_y = (y_sumsq - y_sum * y_sum / n_total) / (n_total - 1)
    sd_scaled = math.sqrt(max(var_y, 0.0)) / y_range
    return RunDerived(n_total, y_mid, y_range, sd_scaled, np.asarray(x_min), np.asarray(x_max))


def resolve_prior(settings: FitSettings, sd_scaled: float) -> PriorParams:
    tau = 0.5 / (settings.kfac * math.sqrt(settings.m))
    lam = sigma_lambda(sd_scaled, settings.nu, settings.sigquant)
    return PriorParams(
        m=settings.m,
        alpha=settings.alpha,
        beta=settings.beta,
        kfac=settings.kfac,
        tau=tau,
        nu=settings.nu,
        lam=lam,
        min_leaf=settings.min_leaf,
    )


def scale_moment_blocks(y: np.ndarray, blocks: Sequence[tuple[int, int]]):
    """Per-block (sum, sum of squares) of the raw response."""
    sums = [float(np.sum(y[lo:hi])) for lo, hi in blocks]
    sumsqs = [float(np.sum(y[lo:hi] * y[lo:hi])) for lo, hi in blocks]
    return sums, sumsqs


# ---------------------------------------------------------------------------
# The Gibbs loop, shared by the serial sampler and the distributed master
# ---------------------------------------------------------------------------

class StatsProvider:
    """Source of reduced statistics plus sink for accepted state changes.

    The serial sampler and the distributed master drive the identical chain
    logic; only this object differs (local arithmetic vs. worker messaging).
    """

    n_total: int

    def begin_iteration(self, iteration: int) -> None:
        raise NotImplementedError

    def null_move(self, j: int) -> None:
        raise NotImplementedError

    def move_stats(self, j: int, tree: Tree, prop: Proposal) -> tuple[SuffStats, SuffStats]:
        raise NotImplementedError

    def apply_birth(self, j: int, tree: Tree, prop: Proposal, mu_l: float, mu_r: float) -> None:
        raise NotImplementedError

    def apply_death(self, j: int, tree: Tree, prop: Proposal, mu: float) -> None:
        raise NotImplementedError

    def reject_move(self, j: int, prop: Proposal) -> None:
        raise NotImplementedError

    def mu_stats(self, j: int, tree: Tree) -> list[SuffStats]:
        raise NotImplementedError

    def apply_mus(
        self, j: int, tree: Tree, ids: np.ndarray, old: np.ndarray, new: np.ndarray
    ) -> None:
        raise NotImplementedError

    def rss(self) -> float:
        raise NotImplementedError

    def finish(self) -> None:
        pass


class LocalProvider(StatsProvider):
    """Serial provider: all rows live in one shard on this process."""

    def __init__(self, shard: ShardData, grid: CutpointGrid):
        self.shard = shard
        self.grid = grid
        self.n_total = shard.n

    def begin_iteration(self, iteration: int) -> None:
        pass

    def null_move(self, j: int) -> None:
        pass

    def move_stats(self, j, tree, prop):
        return shard_move_stats(self.shard, tree, self.grid, prop)

    def apply_birth(self, j, tree, prop, mu_l, mu_r):
        node = tree.node(prop.node_id)
        self.shard.apply_birth(
            j, prop.node_id, prop.v, self.grid.value(prop.v, prop.c), node.mu, mu_l, mu_r
        )

    def apply_death(self, j, tree, prop, mu):
        node = tree.node(prop.node_id)
        self.shard.apply_death(j, prop.node_id, node.left.mu, node.right.mu, mu)

    def reject_move(self, j, prop):
        pass

    def mu_stats(self, j, tree):
        return shard_mu_stats(self.shard, tree, j)

    def apply_mus(self, j, tree, ids, old, new):
        self.shard.apply_mus(j, ids, old, new)

    def rss(self) -> float:
        return pairwise_fold(self.shard.rss_blocks())


@dataclass(slots=True)
class TreeMoveRecord:
    """What happened to one tree in one iteration (for logs and byte audits)."""

    move: str | None
    accepted: bool
    b_after: int


@dataclass
class ChainState:
    """The chain's model side: the forest and the current residual sd.

    The matching data side (fit/residual caches, leaf assignments) lives in
    a ShardData; `one_iteration` advances both coherently.
    """

    forest: list[Tree]
    sigma: float

    @classmethod
    def initial(cls, m: int, sigma0: float) -> "ChainState":
        return cls([Tree() for _ in range(m)], sigma0)


@dataclass
class ChainResult:
    """Everything a finished chain reports back."""

    settings: FitSettings
    n: int
    d: int
    y_mid: float
    y_range: float
    grid: CutpointGrid
    prior: PriorParams
    sigmas: np.ndarray  # per iteration, scaled response units
    mean_b: np.ndarray  # per iteration, mean terminal count over trees
    birth_proposed: np.ndarray
    birth_accepted: np.ndarray
    death_proposed: np.ndarray
    death_accepted: np.ndarray
    snapshots: list[tuple[int, float, list[Tree]]] = field(default_factory=list)
    forest_hashes: list[str] = field(default_factory=list)
    elapsed: float = 0.0
    trace: list[list[TreeMoveRecord]] | None = None

    @property
    def sigmas_original(self) -> np.ndarray:
        return self.sigmas * self.y_range

    @property
    def b_bar(self) -> float:
        """Mean terminal-node count over saved snapshots and trees."""
        if not self.snapshots:
            return float("nan")
        total = sum(
            len(enumerate_nodes(t, "terminal")) for _, _, forest in self.snapshots for t in forest
        )
        return total / (len(self.snapshots) * self.settings.m)


def forest_hash(forest: Sequence[Tree]) -> str:
    digest = hashlib.md5()
    for tree in forest:
        for line in tree_lines(tree):
            digest.update(line.encode())
        digest.update(b";")
    return digest.hexdigest()


def _update_tree(
    j: int,
    tree: Tree,
    sigma: float,
    grid: CutpointGrid,
    prior: PriorParams,
    rng: np.random.Generator,
    provider: StatsProvider,
    prior_only: bool,
) -> tuple[str | None, bool, int]:
    """One tree's structural move plus its leaf-mean Gibbs pass.

    Returns (move kind or None, accepted, terminal count after the move).
    This is the single source of the per-tree random variate sequence for
    both the serial sampler and the distributed master.
    """
    prop = propose(tree, grid, rng, j)
    move = None
    accepted = False
    if prop is None:
        provider.null_move(j)
    else:
        move = prop.move
        stats_l, stats_r = provider.move_stats(j, tree, prop)
        log_ratio = accept_log_ratio(tree, prop, stats_l, stats_r, sigma, prior, prior_only)
        u = rng.random()
        accepted = u > 0.0 and math.log(u) < log_ratio
        if accepted:
            if move == BIRTH:
                mu_l = draw_mu(stats_l, sigma, prior.tau, rng)
                mu_r = draw_mu(stats_r, sigma, prior.tau, rng)
                provider.apply_birth(j, tree, prop, mu_l, mu_r)
                tree.birth(prop.node_id, prop.v, prop.c, mu_l, mu_r)
            else:
                mu = draw_mu(stats_l + stats_r, sigma, prior.tau, rng)
                provider.apply_death(j, tree, prop, mu)
                tree.death(prop.node_id, mu)
        else:
            provider.reject_move(j, prop)
    # Leaf-mean Gibbs pass for this tree (always, move or not).
    terminals = enumerate_nodes(tree, "terminal")
    ids = np.array([t.id for t in terminals], dtype=np.uint32)
    old_mus = np.array([t.mu for t in terminals], dtype=np.float64)
    stats_list = provider.mu_stats(j, tree)
    new_mus = draw_mus(stats_list, sigma, prior.tau, rng)
    provider.apply_mus(j, tree, ids, old_mus, new_mus)
    for t, mu_new in zip(terminals, new_mus):
        t.mu = float(mu_new)
    return move, accepted, len(terminals)


def run_chain_core(
    forest: list[Tree],
    grid: CutpointGrid,
    prior: PriorParams,
    sigma0: float,
    rng: np.random.Generator,
    provider: StatsProvider,
    settings: FitSettings,
    *,
    collect_hashes: bool = False,
    collect_trace: bool = False,
    on_iteration: Callable[[int, float, list[Tree]], None] | None = None,
) -> ChainResult:
    """Run the full Gibbs chain against a statistics provider.

    Per iteration, for each tree: propose, fetch child statistics, MH
    accept/reject, then redraw every leaf mean of that tree; after all trees,
    draw sigma from the reduced residual sum of squares.  The provider applies
    each accepted change to whatever holds the data (a local shard or a set of
    remote replicas).
    """
    settings.validate()
    sigma = sigma0
    draws = settings.draws
    m = prior.m
    sigmas = np.empty(draws)
    mean_b = np.empty(draws)
    counters = {k: np.zeros(draws, dtype=np.int64) for k in ("bp", "ba", "dp", "da")}
    snapshots: list[tuple[int, float, list[Tree]]] = []
    hashes: list[str] = []
    trace: list[list[TreeMoveRecord]] = []

    start = time.perf_counter()
    for it in range(1, draws + 1):
        provider.begin_iteration(it)
        itrace: list[TreeMoveRecord] = []
        b_sum = 0
        for j in range(m):
            move, accepted, b_after = _update_tree(
                j, forest[j], sigma, grid, prior, rng, provider, settings.prior_only
            )
            if move is not None:
                counters["bp" if move == BIRTH else "dp"][it - 1] += 1
                if accepted:
                    counters["ba" if move == BIRTH else "da"][it - 1] += 1
            b_sum += b_after
            if collect_trace:
                itrace.append(TreeMoveRecord(move, accepted, b_after))
        rss = provider.rss()
        sigma = draw_sigma(provider.n_total, rss, prior.nu, prior.lam, rng)
        sigmas[it - 1] = sigma
        mean_b[it - 1] = b_sum / m
        if collect_hashes:
            hashes.append(forest_hash(forest))
        if collect_trace:
            trace.append(itrace)
        if it > settings.burn and (it - settings.burn) % settings.thin == 0:
            snapshots.append((it, sigma, [t.clone() for t in forest]))
        if on_iteration is not None:
            on_iteration(it, sigma, forest)
    elapsed = time.perf_counter() - start
    provider.finish()

    return ChainResult(
        settings=settings,
        n=provider.n_total,
        d=grid.n_vars,
        y_mid=0.0,
        y_range=1.0,
        grid=grid,
        prior=prior,
        sigmas=sigmas,
        mean_b=mean_b,
        birth_proposed=counters["bp"],
        birth_accepted=counters["ba"],
        death_proposed=counters["dp"],
        death_accepted=counters["da"],
        snapshots=snapshots,
        forest_hashes=hashes,
        elapsed=elapsed,
        trace=trace if collect_trace else None,
    )


def one_iteration(
    state: ChainState,
    shard: ShardData,
    grid: CutpointGrid,
    prior: PriorParams,
    rng: np.random.Generator,
    prior_only: bool = False,
) -> ChainState:
    """One full Gibbs sweep over a local shard; returns the updated state.

    Mutates the state's forest and the shard's fit/residual caches in
    place; the residual invariant (residual = ys - fit) holds on exit.
    """
    provider = LocalProvider(shard, grid)
    for j in range(prior.m):
        _update_tree(j, state.forest[j], state.sigma, grid, prior, rng, provider, prior_only)
    state.sigma = draw_sigma(shard.n, provider.rss(), prior.nu, prior.lam, rng)
    return state


def run_serial(
    x: np.ndarray,
    y: np.ndarray,
    settings: FitSettings,
    *,
    collect_hashes: bool = False,
    collect_trace: bool = False,
) -> ChainResult:
    """Fit the model on local data with the single-process sampler."""
    settings.validate()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise ValueError("x must be (n, d) and y must be (n,) with matching n")
    n = y.size
    nblocks = settings.reduction_blocks or 1
    bounds = partition_bounds(n, nblocks)
    blocks = [(int(bounds[i]), int(bounds[i + 1])) for i in range(nblocks)]

    y_sums, y_sumsqs = scale_moment_blocks(y, blocks)
    derived = derive_run_constants(
        n,
        float(y.min()),
        float(y.max()),
        pairwise_fold(y_sums),
        pairwise_fold(y_sumsqs),
        x.min(axis=0),
        x.max(axis=0),
    )
    grid = CutpointGrid.from_ranges(derived.x_min, derived.x_max, settings.numcut)
    prior = resolve_prior(settings, derived.sd_scaled)
    ys = (y - derived.y_mid) / derived.y_range
    shard = ShardData(x, ys, settings.m, blocks)
    forest = [Tree() for _ in range(settings.m)]
    rng = np.random.default_rng(settings.seed)

    result = run_chain_core(
        forest,
        grid,
        prior,
        derived.sd_scaled,
        rng,
        LocalProvider(shard, grid),
        settings,
        collect_hashes=collect_hashes,
        collect_trace=collect_trace,
    )
    result.y_mid = derived.y_mid
    result.y_range = derived.y_range
    return result


def check_residual_invariant(
    forest: Sequence[Tree], grid: CutpointGrid, shard: ShardData, atol: float = 1e-8
) -> float:
    """Max abs deviation of the cached residual from full recomputation."""
    from .trees import evaluate_rows

    fit = np.zeros(shard.n)
    for tree in forest:
        fit += evaluate_rows(tree, grid, shard.x)
    err = float(np.max(np.abs(shard.ys - fit - shard.residual))) if shard.n else 0.0
    if err > atol:
        raise AssertionError(f"residual invariant violated: max deviation {err}")
    return err
