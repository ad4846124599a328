"""
Sequence Optimal Transport Distance between vector sequences.

The weights alpha live on the longer sequence (p bins) and beta on the shorter one (q bins). For equal lengths
both orientations are evaluated and the smaller value is kept.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import softmax

from otta.model import CostKind, SimplexWeights, SOTDResult, StrictSimplexWeights, VectorSequence, as_strict_simplex
from otta.optim import AdamOptimizer
from otta.ot_kernel import alignment_to_weights, compute_coupling, coupling_value_and_grad, proportional_alignment
from otta.utils import report_problem

PROBABILITY_FLOOR = 1e-30
ONE_HOT_TOLERANCE = 1e-6

BetaPolicy = Callable[[int], StrictSimplexWeights]


@dataclass
class MinimizerConfig:
    """
    Options of the gradient-descent minimizer over alpha.
    :param steps: descent steps per start
    :param learning_rate: initial step size on the pre-softmax scores, decayed linearly to zero
    :param restarts: random starts in addition to the beta-initialised start
    :param tolerance: a start stops early once its best objective improved by less than this over `patience` steps
    :param patience: window used with `tolerance`
    :param gap_tol: the result is flagged converged when within this of the exact oracle value
    :param seed: seed of the random starts
    """
    steps: int = 500
    learning_rate: float = 0.1
    restarts: int = 4
    tolerance: float = 1e-12
    patience: int = 100
    gap_tol: float = 1e-3
    seed: int = 0


@dataclass(frozen=True)
class OracleResult:
    """
    Exact SOTD value with one optimal nondecreasing map from short-side indices to long-side indices (1-based).
    Unpacks as (distance, assignment).
    """
    distance: float
    assignment: Tuple[int, ...]
    x_is_long: bool = True

    def __iter__(self):
        return iter((self.distance, self.assignment))


def uniform_beta(q: int) -> StrictSimplexWeights:
    return StrictSimplexWeights.uniform(q)


def _as_sequence(sequence) -> VectorSequence:
    return sequence if isinstance(sequence, VectorSequence) else VectorSequence.of(sequence)


def _check_one_hot(v: np.ndarray) -> int:
    hot = np.flatnonzero(np.abs(v - 1.0) <= ONE_HOT_TOLERANCE)
    cold = np.abs(v) <= ONE_HOT_TOLERANCE
    if hot.size != 1 or np.count_nonzero(cold) != v.size - 1:
        report_problem("Cross-entropy cost requires a one-hot second argument.")
    return int(hot[0])


def _check_probability(u: np.ndarray):
    if np.any(u < 0) or abs(u.sum() - 1.0) > ONE_HOT_TOLERANCE:
        report_problem("Cross-entropy cost requires a probability vector as first argument.")


def eval_cost(kind, u, v) -> float:
    """
    Evaluates C(u, v) for one pair of vectors.
    :param kind: CostKind or one of its names/aliases
    :param u: first vector (probability vector for cross-entropy)
    :param v: second vector (one-hot for cross-entropy)
    :return: nonnegative cost
    """
    kind = CostKind.from_name(kind)
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        report_problem("Cost arguments have different dimensions {} and {}.".format(u.size, v.size))
    if kind is CostKind.SQUARED_EUCLIDEAN:
        return float(np.sum((u - v) ** 2))
    if kind is CostKind.EUCLIDEAN:
        return float(np.sqrt(np.sum((u - v) ** 2)))
    _check_probability(u)
    return float(-np.log(max(u[_check_one_hot(v)], PROBABILITY_FLOOR)))


def cost_matrix(x, y, kind) -> np.ndarray:
    """
    Matrix of C(x_i, y_j) for all pairs, shape n x m.
    """
    kind = CostKind.from_name(kind)
    x = _as_sequence(x)
    y = _as_sequence(y)
    if x.dim != y.dim:
        report_problem("Sequences have different dimensions {} and {}.".format(x.dim, y.dim))
    if kind is CostKind.SQUARED_EUCLIDEAN:
        return cdist(x.vectors, y.vectors, metric='sqeuclidean')
    if kind is CostKind.EUCLIDEAN:
        return cdist(x.vectors, y.vectors, metric='euclidean')
    for u in x.vectors:
        _check_probability(u)
    hot = np.array([_check_one_hot(v) for v in y.vectors])
    return -np.log(np.maximum(x.vectors[:, hot], PROBABILITY_FLOOR))


def _resolve_beta(beta_policy, q: int) -> StrictSimplexWeights:
    if beta_policy is None:
        beta = uniform_beta(q)
    elif callable(beta_policy):
        beta = as_strict_simplex(beta_policy(q))
    else:
        beta = as_strict_simplex(beta_policy)
    if len(beta) != q:
        report_problem("beta has {} components, expected min(n, m) = {}.".format(len(beta), q))
    return beta


def _orientations(costs: np.ndarray):
    """
    Long-side-major cost matrices (p x q) with a flag telling whether x is the long side.
    """
    n, m = costs.shape
    if n > m:
        return [(costs, True)]
    if n < m:
        return [(costs.T, False)]
    return [(costs, True), (costs.T, False)]


def _monotone_assignment(costs: np.ndarray, beta: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    min over nondecreasing maps s: [1, q] -> [1, p] of sum_j beta_j costs[s(j), j], by dynamic programming.
    Ties go to the smallest long-side index.
    """
    p, q = costs.shape
    weighted = costs * beta[np.newaxis, :]
    positions = np.arange(p)
    total = weighted[:, 0].copy()
    back = np.zeros((q, p), dtype=np.int64)
    for j in range(1, q):
        running = np.minimum.accumulate(total)
        improved = np.concatenate(([True], total[1:] < running[:-1]))
        best_before = np.maximum.accumulate(np.where(improved, positions, 0))
        back[j] = best_before
        total = weighted[:, j] + total[best_before]
    end = int(np.argmin(total))
    assignment = np.zeros(q, dtype=np.int64)
    assignment[q - 1] = end
    for j in range(q - 1, 0, -1):
        assignment[j - 1] = back[j, assignment[j]]
    return float(total[end]), assignment + 1


def sotd_oracle(x, y, r: int = 1, kind=CostKind.EUCLIDEAN, beta=None) -> OracleResult:
    """
    Exact SOTD value. Any monotone coupling spreads beta_j over a window of long-side bins, and these windows
    only meet at their ends, so concentrating each beta_j on its cheapest bin is feasible and never worse.
    The minimum over couplings is therefore the minimum over nondecreasing short-to-long maps.
    :param x: first sequence
    :param y: second sequence
    :param r: order, positive integer
    :param kind: cost kind
    :param beta: short-side weights without zero components (uniform when None)
    :return: OracleResult(distance, assignment, x_is_long)
    """
    if r < 1:
        report_problem("Order r must be a positive integer.")
    costs = cost_matrix(x, y, kind) ** r
    beta = _resolve_beta(beta, min(costs.shape))
    best = None
    for oriented, x_is_long in _orientations(costs):
        value, assignment = _monotone_assignment(oriented, beta.values)
        if best is None or value < best[0]:
            best = (value, assignment, x_is_long)
    value, assignment, x_is_long = best
    return OracleResult(float(value ** (1.0 / r)), tuple(assignment.tolist()), x_is_long)


def oracle_alpha(assignment: Sequence[int], beta, p: int) -> SimplexWeights:
    """
    Long-side weights realising a short-to-long map: alpha_i is the beta mass sent to bin i.
    """
    beta = as_strict_simplex(beta)
    alpha = np.zeros(p)
    np.add.at(alpha, np.asarray(assignment, dtype=np.int64) - 1, beta.values)
    return SimplexWeights(alpha)


def sotd_objective(alpha, x, y, r: int = 1, kind=CostKind.EUCLIDEAN, beta=None, x_is_long: Optional[bool] = None):
    """
    Evaluates (sum_ij gamma(alpha)_ij C_ij^r)^(1/r) at a given alpha on the long side.
    """
    costs = cost_matrix(x, y, kind) ** r
    n, m = costs.shape
    if x_is_long is None:
        x_is_long = n >= m
    oriented = costs if x_is_long else costs.T
    beta = _resolve_beta(beta, oriented.shape[1])
    coupling = compute_coupling(alpha, beta)
    inner = float(np.dot(coupling.masses, oriented[coupling.rows - 1, coupling.cols - 1]))
    return inner ** (1.0 / r)


def _descend(costs: np.ndarray, beta: np.ndarray, scores: np.ndarray, config: MinimizerConfig):
    """
    Adam descent on pre-softmax scores with a linearly decaying step; returns the best iterate.
    The start point counts as an iterate, so zero steps return it unchanged.
    """
    tensors = {"scores": np.array(scores, dtype=np.float64)}
    optimizer = AdamOptimizer(tensors, config.learning_rate, 0, config.steps + 1)
    alpha = softmax(tensors["scores"])
    value, grad_alpha = coupling_value_and_grad(alpha, beta, costs)
    best_value, best_alpha = value, alpha
    last_improvement = 0
    for step in range(1, config.steps + 1):
        if best_value <= 0.0 or step - last_improvement > config.patience:
            break
        grad = alpha * (grad_alpha - np.dot(alpha, grad_alpha))
        optimizer.step(tensors, {"scores": grad})
        alpha = softmax(tensors["scores"])
        value, grad_alpha = coupling_value_and_grad(alpha, beta, costs)
        if value < best_value - config.tolerance:
            last_improvement = step
        if value < best_value:
            best_value, best_alpha = value, alpha
    return best_value, best_alpha


def _starts(p: int, beta: StrictSimplexWeights, config: MinimizerConfig):
    if p == len(beta):
        warm = beta.values
    else:
        warm = alignment_to_weights(proportional_alignment(p, len(beta)), beta).values
    yield np.log(warm)
    rng = np.random.default_rng(config.seed)
    for _ in range(config.restarts):
        yield rng.normal(size=p)


def sotd_distance(x, y, r: int = 1, kind=CostKind.EUCLIDEAN, beta_policy: Union[BetaPolicy, None] = None,
                  minimizer_config: Optional[MinimizerConfig] = None) -> SOTDResult:
    """
    Minimises the SOTD objective over alpha by gradient descent on alpha = softmax(scores), using the analytic
    coupling gradient. Starts are evaluated in a fixed order and the first best objective wins.
    :param x: first sequence
    :param y: second sequence
    :param r: order
    :param kind: cost kind
    :param beta_policy: callable q -> beta, fixed beta weights, or None for uniform beta
    :param minimizer_config: minimizer options
    :return: SOTDResult with the best alpha, its coupling and the convergence flag
    """
    config = minimizer_config or MinimizerConfig()
    if r < 1:
        report_problem("Order r must be a positive integer.")
    costs = cost_matrix(x, y, kind) ** r
    beta = _resolve_beta(beta_policy, min(costs.shape))

    best = None
    for oriented, x_is_long in _orientations(costs):
        for start, scores in enumerate(_starts(oriented.shape[0], beta, config)):
            value, alpha = _descend(oriented, beta.values, scores, config)
            logging.info("SOTD start {} ({} long): objective {:.6g}".format(start, "x" if x_is_long else "y", value))
            if best is None or value < best[0]:
                best = (value, alpha, x_is_long)

    _, alpha, x_is_long = best
    alpha_star = SimplexWeights(alpha)
    coupling = compute_coupling(alpha_star, beta)
    oriented = costs if x_is_long else costs.T
    inner = float(np.dot(coupling.masses, oriented[coupling.rows - 1, coupling.cols - 1]))
    distance = inner ** (1.0 / r)

    oracle = sotd_oracle(x, y, r, kind, beta)
    converged = distance - oracle.distance <= config.gap_tol
    if not converged:
        logging.warning("SOTD minimizer stopped {:.3g} above the exact value.".format(distance - oracle.distance))
    return SOTDResult(distance, alpha_star, coupling, r, converged, oracle.distance, x_is_long)


def aggregate(sequence):
    """
    Removes consecutive duplicates. Works on VectorSequence, LabelSequence and plain sequences.
    """
    items = _items_of(sequence)
    kept = [index for index in range(len(items)) if index == 0 or not _same(items[index], items[index - 1])]
    return _rebuild(sequence, kept)


def prune(sequence, alpha, drop_threshold: float = 0.0):
    """
    Removes element i when alpha_i <= drop_threshold (threshold 0 removes exactly the zero-weight elements).
    The result has the input type; pruning every vector of a VectorSequence raises ValidationError.
    """
    weights = alpha.values if isinstance(alpha, SimplexWeights) else np.asarray(alpha, dtype=np.float64)
    items = _items_of(sequence)
    if len(items) != weights.size:
        report_problem("Sequence has {} elements but alpha has {}.".format(len(items), weights.size))
    if drop_threshold < 0:
        report_problem("Drop threshold must be nonnegative.")
    kept = [index for index in range(len(items)) if weights[index] > drop_threshold]
    return _rebuild(sequence, kept)


def check_non_separation(x, y, alpha_star) -> bool:
    """
    True iff aggregate(prune(x, alpha_star, 0)) equals aggregate(y) elementwise.
    """
    left = _items_of(aggregate(prune(x, alpha_star, 0.0)))
    right = _items_of(aggregate(y))
    return len(left) == len(right) and all(_same(a, b) for a, b in zip(left, right))


def _items_of(sequence):
    if isinstance(sequence, VectorSequence):
        return sequence.vectors
    if hasattr(sequence, "tokens"):
        return sequence.tokens
    return list(sequence)


def _same(a, b) -> bool:
    return bool(np.array_equal(np.asarray(a), np.asarray(b)))


def _rebuild(sequence, kept):
    if isinstance(sequence, VectorSequence):
        if not kept:
            report_problem("Pruning removed every vector of sequence '{}'.".format(sequence.id))
        return VectorSequence.of(sequence.vectors[kept], sequence.id)
    if hasattr(sequence, "tokens"):
        return type(sequence)(tuple(sequence.tokens[index] for index in kept), sequence.vocab_size)
    items = list(sequence)
    return [items[index] for index in kept]
