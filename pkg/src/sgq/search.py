"""Automatic bit selection: a CART accuracy surrogate plus iterative exploration.

The exploration scheme, with a measurement budget of n_mea configs per
iteration over n_iter iterations:

  1. measure n_mea random configs (iteration 1's budget);
  2. fit the regression tree on everything measured so far;
  3. sample n_sample configs, predict their accuracy, keep the top n_mea
     by prediction (ties broken toward lower memory, already-measured
     configs excluded);
  4. measure those;
  5. repeat 2-4 until n_iter iterations are done.

Among everything measured, only configs whose accuracy drop against the
full-precision reference stays under the drop threshold survive; the
lowest-memory survivor wins. Predictions never gate the final answer. With
n_iter=1 the scheme degenerates to plain random search.

Step-4 measurements may run concurrently; results are merged in candidate
order, so parallelism never changes the outcome.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bitconfig import ConfigSpace, QuantConfig, config_id, encode_features, random_config


@dataclass(frozen=True)
class CostSample:
    features: np.ndarray
    accuracy: float


@dataclass
class TreeNode:
    feature: int = -1
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    value: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass
class RegressionTree:
    """CART regressor: greedy variance-reduction splits, deterministic ties."""

    root: TreeNode
    num_features: int
    max_depth: int
    min_samples_leaf: int


def _best_split(x: np.ndarray, y: np.ndarray, min_leaf: int):
    """Exhaustive best (feature, threshold) by variance reduction.

    Ties break toward the lowest feature index, then the lowest threshold:
    candidates are scanned in that order and only strict improvements win.
    """
    n = len(y)
    best = None
    best_gain = 0.0
    total_sse = float(np.var(y) * n)
    for f in range(x.shape[1]):
        col = x[:, f]
        order = np.argsort(col, kind="stable")
        xs, ys = col[order], y[order]
        distinct = np.flatnonzero(np.diff(xs) > 0) + 1
        csum = np.cumsum(ys)
        csq = np.cumsum(ys * ys)
        for i in distinct:
            if i < min_leaf or n - i < min_leaf:
                continue
            left_sse = csq[i - 1] - csum[i - 1] ** 2 / i
            right_sum = csum[-1] - csum[i - 1]
            right_sse = (csq[-1] - csq[i - 1]) - right_sum**2 / (n - i)
            gain = total_sse - left_sse - right_sse
            if gain > best_gain + 1e-12:
                best_gain = gain
                best = (f, float((xs[i - 1] + xs[i]) / 2))
    return best


def _grow(x, y, depth, max_depth, min_leaf) -> TreeNode:
    node = TreeNode(value=float(np.mean(y)))
    if depth >= max_depth or len(y) < 2 * min_leaf or np.var(y) == 0.0:
        return node
    split = _best_split(x, y, min_leaf)
    if split is None:
        return node
    f, thr = split
    mask = x[:, f] <= thr
    node.feature, node.threshold = f, thr
    node.left = _grow(x[mask], y[mask], depth + 1, max_depth, min_leaf)
    node.right = _grow(x[~mask], y[~mask], depth + 1, max_depth, min_leaf)
    return node


def fit_tree(samples, max_depth: int = 6, min_samples_leaf: int = 2) -> RegressionTree:
    """Fit on CostSamples (or (features, accuracy) pairs); deterministic."""
    samples = list(samples)
    if not samples:
        raise ValueError("cannot fit a tree on zero samples")
    feats = [s.features if isinstance(s, CostSample) else s[0] for s in samples]
    accs = [s.accuracy if isinstance(s, CostSample) else s[1] for s in samples]
    x = np.asarray(feats, dtype=np.float64)
    y = np.asarray(accs, dtype=np.float64)
    if x.ndim != 2 or len({row.shape for row in x}) > 1:
        raise ValueError("feature vectors must share one length")
    root = _grow(x, y, 0, max_depth, min_samples_leaf)
    return RegressionTree(root, x.shape[1], max_depth, min_samples_leaf)


def predict(tree: RegressionTree, features) -> float:
    feats = np.asarray(features, dtype=np.float64)
    if feats.shape != (tree.num_features,):
        raise ValueError(f"expected {tree.num_features} features, got {feats.shape}")
    node = tree.root
    while not node.is_leaf:
        node = node.left if feats[node.feature] <= node.threshold else node.right
    return node.value


@dataclass(frozen=True)
class SearchParams:
    n_mea: int = 40
    n_iter: int = 5
    n_sample: int = 2000
    drop_threshold: float = 0.005
    seed: int = 0
    max_depth: int = 6
    min_samples_leaf: int = 2

    def __post_init__(self):
        if min(self.n_mea, self.n_iter, self.n_sample) < 1:
            raise ValueError("n_mea, n_iter, n_sample must be positive")
        if self.n_sample < self.n_mea:
            raise ValueError("n_sample must be at least n_mea")


@dataclass(frozen=True)
class Measured:
    iteration: int
    config: QuantConfig
    predicted: float | None
    accuracy: float
    memory: float


@dataclass
class SearchResult:
    best_config: QuantConfig | None
    accuracy: float | None
    memory: float | None
    all_measured: list[Measured]
    trajectory: list[float]  # best feasible memory after each iteration (inf if none)
    feasible: bool = field(init=False)

    def __post_init__(self):
        self.feasible = self.best_config is not None


def _sample_distinct(space: ConfigSpace, rng, count: int, exclude: set) -> list[QuantConfig]:
    """Up to `count` configs not in `exclude`; gives up once the space is spent."""
    out: list[QuantConfig] = []
    seen = set(exclude)
    attempts = 0
    limit = max(200, 50 * count)
    while len(out) < count and attempts < limit and len(seen) < space.size:
        cfg = random_config(space, rng)
        attempts += 1
        key = cfg.canonical()
        if key in seen:
            continue
        seen.add(key)
        out.append(cfg)
    return out


def _measure(configs, evaluator, jobs: int):
    if jobs <= 1 or len(configs) <= 1:
        return [evaluator(c) for c in configs]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(evaluator, configs))


def explore(
    space: ConfigSpace,
    evaluator,
    full_precision_acc: float,
    params: SearchParams,
    memory_fn,
    jobs: int = 1,
    log=None,
) -> SearchResult:
    """Run the exploration scheme; evaluator maps a config to its accuracy.

    The evaluator must be deterministic per config (e.g. a seeded finetune).
    `memory_fn` maps a config to the memory figure used for ranking and for
    the final lowest-memory selection. Returns an infeasible SearchResult
    (best_config None) when nothing clears the drop filter.
    """
    rng = np.random.default_rng(params.seed)
    measured: list[Measured] = []
    measured_keys: set[str] = set()
    trajectory: list[float] = []

    def record(batch, iteration, predictions):
        accs = _measure(batch, evaluator, jobs)
        for cfg, acc, pred in zip(batch, accs, predictions):
            m = Measured(iteration, cfg, pred, float(acc), float(memory_fn(cfg)))
            measured.append(m)
            measured_keys.add(cfg.canonical())
            if log is not None:
                log(m)

    def best_feasible():
        ok = [m for m in measured if full_precision_acc - m.accuracy < params.drop_threshold]
        if not ok:
            return None
        return min(ok, key=lambda m: (m.memory, -m.accuracy, m.config.canonical()))

    batch = _sample_distinct(space, rng, params.n_mea, set())
    record(batch, 1, [None] * len(batch))
    trajectory.append(m.memory if (m := best_feasible()) else float("inf"))

    for iteration in range(2, params.n_iter + 1):
        tree = fit_tree(
            [CostSample(encode_features(m.config), m.accuracy) for m in measured],
            params.max_depth,
            params.min_samples_leaf,
        )
        candidates = _sample_distinct(space, rng, params.n_sample, measured_keys)
        ranked = sorted(
            candidates,
            key=lambda c: (-predict(tree, encode_features(c)), memory_fn(c), c.canonical()),
        )
        batch = ranked[: params.n_mea]
        record(batch, iteration, [predict(tree, encode_features(c)) for c in batch])
        trajectory.append(m.memory if (m := best_feasible()) else float("inf"))

    winner = best_feasible()
    if winner is None:
        return SearchResult(None, None, None, measured, trajectory)
    return SearchResult(winner.config, winner.accuracy, winner.memory, measured, trajectory)


def random_search(
    space: ConfigSpace,
    evaluator,
    full_precision_acc: float,
    params: SearchParams,
    memory_fn,
    jobs: int = 1,
) -> SearchResult:
    """Same budget and filter as explore, but all samples are random."""
    flat = SearchParams(
        n_mea=params.n_mea * params.n_iter,
        n_iter=1,
        n_sample=max(params.n_sample, params.n_mea * params.n_iter),
        drop_threshold=params.drop_threshold,
        seed=params.seed,
    )
    return explore(space, evaluator, full_precision_acc, flat, memory_fn, jobs=jobs)
