"""
1D optimal transport between weighted bin sequences with squared index distance as cost.

The optimal coupling is read off the merged grid of cumulative sums
A_i = alpha_1 + ... + alpha_i and B_j = beta_1 + ... + beta_j:

    gamma_ij = max(0, min(A_i, B_j) - max(A_{i-1}, B_{j-1}))

which is the north-west corner sweep "from the smallest bins to the largest" written in closed form.
"""
from typing import Callable, Tuple, Union

import numpy as np

from otta.model import MonotonicAlignment, SimplexWeights, SparseCoupling, as_simplex, as_strict_simplex
from otta.utils import report_problem

# merged-grid segments shorter than this are cumulative-sum ties and carry no entry
TIE_TOLERANCE = 1e-14

CostGrid = Union[np.ndarray, Callable[[np.ndarray, np.ndarray], np.ndarray]]


def compensated_cumsum(values: np.ndarray) -> np.ndarray:
    """
    Prefix sums with a leading zero, corrected by the exact rounding error of every sequential addition.
    :param values: 1-D array of nonnegative reals
    :return: array of length len(values) + 1 with result[0] = 0
    """
    values = np.asarray(values, dtype=np.float64)
    partial = np.cumsum(values)
    previous = np.concatenate(([0.0], partial[:-1]))
    virtual = partial - previous
    error = (previous - (partial - virtual)) + (values - virtual)
    corrected = np.maximum.accumulate(partial + np.cumsum(error))
    return np.concatenate(([0.0], corrected))


def _cumulative_grid(alpha_values: np.ndarray, beta_values: np.ndarray):
    cum_alpha = np.minimum(compensated_cumsum(alpha_values), 1.0)
    cum_beta = np.minimum(compensated_cumsum(beta_values), 1.0)
    cum_alpha[-1] = 1.0
    cum_beta[-1] = 1.0

    points = np.union1d(cum_alpha, cum_beta)
    lengths = np.diff(points)
    keep = lengths > TIE_TOLERANCE
    left = points[:-1][keep]
    right = points[1:][keep]
    # left-closed segments: [left, right) lies in row i with A_{i-1} <= left < A_i
    rows = np.searchsorted(cum_alpha, left, side='right')
    cols = np.searchsorted(cum_beta, left, side='right')
    return cum_alpha, cum_beta, rows, cols, right - left


def compute_coupling(alpha, beta) -> SparseCoupling:
    """
    Computes the optimal coupling between mu[alpha, n] and nu[beta, m] for the cost |i - j|^2.
    :param alpha: source weights on the simplex, zero components allowed (dropped frames)
    :param beta: target weights on the simplex without zero components
    :return: sparse coupling with 1-based indices, sorted by (i, j), at most n + m - 1 entries
    """
    alpha = as_simplex(alpha)
    beta = as_strict_simplex(beta)
    _, _, rows, cols, masses = _cumulative_grid(alpha.values, beta.values)
    return SparseCoupling(len(alpha), len(beta), rows, cols, masses)


def marginals(coupling: SparseCoupling) -> Tuple[SimplexWeights, SimplexWeights]:
    """
    Row and column sums of a coupling.
    """
    row_sums = np.bincount(coupling.rows - 1, weights=coupling.masses, minlength=coupling.n)
    col_sums = np.bincount(coupling.cols - 1, weights=coupling.masses, minlength=coupling.m)
    return SimplexWeights(row_sums), SimplexWeights(col_sums)


def transport_cost(coupling: SparseCoupling) -> float:
    return float(np.dot(coupling.masses, (coupling.rows - coupling.cols).astype(np.float64) ** 2))


def support(coupling: SparseCoupling) -> frozenset:
    return coupling.support()


def _costs_on_support(cost_grid: CostGrid, rows: np.ndarray, cols: np.ndarray, n: int, m: int) -> np.ndarray:
    if callable(cost_grid):
        costs = np.asarray(cost_grid(rows, cols), dtype=np.float64)
    else:
        grid = np.asarray(cost_grid, dtype=np.float64)
        if grid.shape != (n, m):
            report_problem("Cost grid has shape {}, expected {}.".format(grid.shape, (n, m)))
        costs = grid[rows - 1, cols - 1]
    if not np.all(np.isfinite(costs)):
        report_problem("Costs on the coupling support must be finite.")
    return costs


def coupling_value_and_grad(alpha_values: np.ndarray, beta_values: np.ndarray,
                            cost_grid: CostGrid) -> Tuple[float, np.ndarray]:
    """
    Value and gradient of L(alpha) = sum_ij gamma(alpha)_ij * c_ij on raw weight arrays, without validation.
    Callers are responsible for alpha and beta being valid simplex vectors.
    """
    n = alpha_values.size
    cum_alpha, cum_beta, rows, cols, masses = _cumulative_grid(alpha_values, beta_values)
    costs = _costs_on_support(cost_grid, rows, cols, n, beta_values.size)

    upper_from_alpha = cum_alpha[rows] <= cum_beta[cols]
    lower_from_alpha = (cum_alpha[rows - 1] >= cum_beta[cols - 1]) & (rows > 1)
    grad_cum = np.zeros(n + 1)
    np.add.at(grad_cum, rows[upper_from_alpha], costs[upper_from_alpha])
    np.add.at(grad_cum, rows[lower_from_alpha] - 1, -costs[lower_from_alpha])
    # A_0 is the constant 0; d A_k / d alpha_l = 1 for k >= l
    gradient = np.cumsum(grad_cum[1:][::-1])[::-1]
    return float(np.dot(masses, costs)), gradient


def coupling_backward(alpha, beta, cost_grid: CostGrid) -> np.ndarray:
    """
    Gradient of L(alpha) = sum_ij gamma(alpha)_ij * c_ij with respect to alpha.

    L is piecewise linear in the cumulative sums A_i, so the chain rule runs through
    d gamma_ij / d A_i (when A_i is the active upper bound) and d gamma_ij / d A_{i-1} (when A_{i-1} is the
    active lower bound). At an exact tie A_i = B_j the derivative is taken through A.
    The result is not projected onto the tangent space of the simplex.

    :param alpha: source weights
    :param beta: target weights without zero components
    :param cost_grid: n x m cost matrix, or a callable (rows, cols) -> costs taking 1-based index arrays
    :return: gradient vector of length n
    """
    alpha = as_simplex(alpha)
    beta = as_strict_simplex(beta)
    _, gradient = coupling_value_and_grad(alpha.values, beta.values, cost_grid)
    return gradient


def project_to_tangent(gradient: np.ndarray) -> np.ndarray:
    """
    Projects a gradient onto the tangent space of the simplex (components summing to zero).
    """
    gradient = np.asarray(gradient, dtype=np.float64)
    return gradient - gradient.mean()


def alignment_to_weights(alignment: MonotonicAlignment, beta) -> SimplexWeights:
    """
    Builds alpha such that the support of compute_coupling(alpha, beta) is exactly the given alignment.

    Every target mass beta_j is split evenly over the frames aligned to j; a frame's weight is the sum of its
    shares. Two frames sharing a boundary target get half of it each. Frames without any pair get zero weight.
    :param alignment: discrete monotonic alignment
    :param beta: target weights without zero components, length alignment.m
    :return: source weights of length alignment.n
    """
    beta = as_strict_simplex(beta)
    alignment.validate()
    if alignment.m != len(beta):
        report_problem("Alignment has {} targets but beta has {} components.".format(alignment.m, len(beta)))
    frame_count = np.zeros(alignment.m, dtype=np.int64)
    for _, j in alignment.pairs:
        frame_count[j - 1] += 1
    shares = [list() for _ in range(alignment.n)]
    for i, j in sorted(alignment.pairs):
        shares[i - 1].append(beta.values[j - 1] / frame_count[j - 1])
    alpha = np.array([sum(frame_shares) for frame_shares in shares])
    return SimplexWeights(alpha)


def proportional_alignment(n: int, m: int) -> MonotonicAlignment:
    """
    The diagonal alignment that stretches m targets evenly over n frames.
    """
    pairs = set()
    if n >= m:
        for i in range(1, n + 1):
            pairs.add((i, -(-i * m // n)))
    else:
        for i in range(1, n + 1):
            for j in range((i - 1) * m // n + 1, i * m // n + 1):
                pairs.add((i, j))
    return MonotonicAlignment.from_pairs(n, m, pairs)
