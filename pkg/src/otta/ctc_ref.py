"""
Reference CTC: collapse mapping, forward-backward loss and gradient, brute-force path enumeration,
Viterbi forced alignment and the label weights derived from a forced alignment.

The lattice is the usual blank-augmented expansion (blank, y_1, blank, y_2, ..., blank) of length 2m + 1.
"""
from typing import List, Tuple

import numpy as np

from otta.model import LabelSequence, Span, StrictSimplexWeights
from otta.ottc import LOG_FLOOR, greedy_decode
from otta.utils import InfeasibleTargetError, report_problem

MAX_BRUTEFORCE_FRAMES = 10
MAX_BRUTEFORCE_CLASSES = 6
BRUTEFORCE_CHUNK = 1 << 16


def collapse(path: LabelSequence) -> LabelSequence:
    """
    Removes consecutive duplicates, then removes the blank.
    """
    tokens = list()
    previous = None
    for token in path.tokens:
        if token != previous and token != path.blank_id:
            tokens.append(token)
        previous = token
    return LabelSequence(tuple(tokens), path.vocab_size)


def ctc_expand(y: LabelSequence) -> np.ndarray:
    """
    Blank-augmented lattice symbols: blank, y_1, blank, ..., y_m, blank.
    """
    if y.has_blank():
        report_problem("CTC targets must not contain the blank id {}.".format(y.blank_id))
    expanded = np.full(2 * len(y) + 1, y.blank_id, dtype=np.int64)
    expanded[1::2] = y.tokens
    return expanded


def _skip_allowed(expanded: np.ndarray, blank_id: int) -> np.ndarray:
    # state s may be entered from s - 2 when it holds a label different from the label at s - 2
    skip = np.zeros(expanded.size, dtype=bool)
    skip[2:] = (expanded[2:] != blank_id) & (expanded[2:] != expanded[:-2])
    return skip


def required_frames(y: LabelSequence) -> int:
    repeats = sum(1 for a, b in zip(y.tokens, y.tokens[1:]) if a == b)
    return len(y) + repeats


def _prepare(log_posteriors, y: LabelSequence) -> Tuple[np.ndarray, np.ndarray]:
    raw = np.asarray(log_posteriors, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[0] == 0:
        report_problem("Log-posteriors must be a non-empty n x K matrix.")
    if raw.shape[1] != y.num_classes:
        report_problem("Log-posteriors have {} classes, the vocabulary needs {}.".format(raw.shape[1], y.num_classes))
    if np.any(np.isnan(raw)):
        report_problem("Log-posteriors must not contain NaN.")
    if raw.shape[0] < required_frames(y):
        report_problem("Target of length {} needs at least {} frames, got {}."
                       .format(len(y), required_frames(y), raw.shape[0]), InfeasibleTargetError)
    return raw, np.maximum(raw, LOG_FLOOR)


def _shift(values: np.ndarray, steps: int) -> np.ndarray:
    # positive steps move values to higher states, negative to lower ones; vacated slots hold -inf
    shifted = np.full_like(values, -np.inf)
    if steps > 0:
        shifted[steps:] = values[:-steps]
    else:
        shifted[:steps] = values[-steps:]
    return shifted


def _forward(emissions: np.ndarray, skip: np.ndarray) -> np.ndarray:
    n, states = emissions.shape
    log_alpha = np.full((n, states), -np.inf)
    log_alpha[0, :min(2, states)] = emissions[0, :min(2, states)]
    for t in range(1, n):
        previous = log_alpha[t - 1]
        merged = np.logaddexp(previous, _shift(previous, 1))
        merged = np.logaddexp(merged, np.where(skip, _shift(previous, 2), -np.inf))
        log_alpha[t] = merged + emissions[t]
    return log_alpha


def _backward(emissions: np.ndarray, skip: np.ndarray) -> np.ndarray:
    n, states = emissions.shape
    log_beta = np.full((n, states), -np.inf)
    log_beta[n - 1, max(0, states - 2):] = 0.0
    for t in range(n - 2, -1, -1):
        ahead = emissions[t + 1] + log_beta[t + 1]
        merged = np.logaddexp(ahead, _shift(ahead, -1))
        log_beta[t] = np.logaddexp(merged, _shift(np.where(skip, ahead, -np.inf), -2))
    return log_beta


def _log_likelihood(log_alpha: np.ndarray) -> float:
    last = log_alpha[-1]
    if last.size == 1:
        return float(last[0])
    return float(np.logaddexp(last[-1], last[-2]))


def ctc_loss(log_posteriors, y: LabelSequence) -> float:
    """
    Negative log marginal probability of all paths collapsing to y.
    :param log_posteriors: n x (|L| + 1) log-probabilities, the blank in the last column
    :param y: blank-free targets, possibly empty
    :return: nonnegative loss
    """
    _, log_posteriors = _prepare(log_posteriors, y)
    expanded = ctc_expand(y)
    log_alpha = _forward(log_posteriors[:, expanded], _skip_allowed(expanded, y.blank_id))
    return max(0.0, -_log_likelihood(log_alpha))


def ctc_backward(log_posteriors, y: LabelSequence) -> Tuple[float, np.ndarray]:
    """
    CTC loss and its gradient with respect to the log-posterior inputs.
    The gradient at (t, k) is minus the posterior occupancy of the lattice states holding k at frame t.
    Entries clamped at the probability floor receive no gradient.
    :return: (loss, n x K gradient)
    """
    raw, log_posteriors = _prepare(log_posteriors, y)
    expanded = ctc_expand(y)
    skip = _skip_allowed(expanded, y.blank_id)
    emissions = log_posteriors[:, expanded]
    log_alpha = _forward(emissions, skip)
    log_beta = _backward(emissions, skip)
    log_likelihood = _log_likelihood(log_alpha)
    occupancy = np.exp(log_alpha + log_beta - log_likelihood)

    gradient = np.zeros_like(log_posteriors)
    for state, symbol in enumerate(expanded):
        gradient[:, symbol] -= occupancy[:, state]
    gradient[raw < LOG_FLOOR] = 0.0
    return max(0.0, -log_likelihood), gradient


def _enumerated_paths(start: int, stop: int, n: int, k: int) -> np.ndarray:
    indices = np.arange(start, stop, dtype=np.int64)
    powers = k ** np.arange(n - 1, -1, -1, dtype=np.int64)
    return (indices[:, None] // powers[None, :]) % k


def ctc_loss_bruteforce(posteriors, y: LabelSequence) -> float:
    """
    Sums the probability of every one of the K^n paths that collapses to y.
    :param posteriors: n x K probabilities with n <= 10 and K <= 6
    :param y: blank-free targets
    :return: -log of the summed probability, +inf when no path reaches y
    """
    posteriors = np.asarray(posteriors, dtype=np.float64)
    if posteriors.ndim != 2 or posteriors.shape[0] == 0:
        report_problem("Posteriors must be a non-empty n x K matrix.")
    n, k = posteriors.shape
    if n > MAX_BRUTEFORCE_FRAMES or k > MAX_BRUTEFORCE_CLASSES:
        report_problem("Path enumeration is limited to n <= {} and K <= {} (got n={}, K={})."
                       .format(MAX_BRUTEFORCE_FRAMES, MAX_BRUTEFORCE_CLASSES, n, k))
    if k != y.num_classes:
        report_problem("Posteriors have {} classes, the vocabulary needs {}.".format(k, y.num_classes))
    target = np.asarray(y.tokens, dtype=np.int64)
    m = target.size
    frame_ids = np.arange(n)
    total = 0.0
    for start in range(0, k ** n, BRUTEFORCE_CHUNK):
        paths = _enumerated_paths(start, min(start + BRUTEFORCE_CHUNK, k ** n), n, k)
        kept = np.ones_like(paths, dtype=bool)
        kept[:, 1:] = paths[:, 1:] != paths[:, :-1]
        kept &= paths != y.blank_id
        candidates = kept.sum(axis=1) == m
        if not np.any(candidates):
            continue
        collapsed = paths[candidates][kept[candidates]].reshape(int(np.count_nonzero(candidates)), m)
        matching = np.flatnonzero(candidates)[np.all(collapsed == target, axis=1)]
        if matching.size:
            total += float(np.sum(np.prod(posteriors[frame_ids, paths[matching]], axis=1)))
    if total <= 0.0:
        return float("inf")
    return -float(np.log(total))


def ctc_viterbi(log_posteriors, y: LabelSequence) -> LabelSequence:
    """
    Most probable path collapsing to y (forced alignment). Among equally probable predecessors the one with the
    smaller lattice index wins.
    :param log_posteriors: n x (|L| + 1) log-probabilities
    :param y: blank-free targets
    :return: path of n symbols, blanks included
    """
    _, log_posteriors = _prepare(log_posteriors, y)
    expanded = ctc_expand(y)
    skip = _skip_allowed(expanded, y.blank_id)
    emissions = log_posteriors[:, expanded]
    n, states = emissions.shape

    score = np.full(states, -np.inf)
    score[:min(2, states)] = emissions[0, :min(2, states)]
    back = np.zeros((n, states), dtype=np.int64)
    state_ids = np.arange(states)
    for t in range(1, n):
        candidates = np.stack((np.where(skip, _shift(score, 2), -np.inf), _shift(score, 1), score))
        choice = np.argmax(candidates, axis=0)
        back[t] = state_ids - 2 + choice
        score = candidates[choice, state_ids] + emissions[t]

    if states == 1:
        state = 0
    else:
        state = states - 2 if score[states - 2] >= score[states - 1] else states - 1
    path = np.zeros(n, dtype=np.int64)
    for t in range(n - 1, -1, -1):
        path[t] = expanded[state]
        state = back[t, state]
    return LabelSequence(tuple(path.tolist()), y.vocab_size)


def path_runs(path: LabelSequence) -> List[Span]:
    """
    Maximal runs of equal consecutive symbols as (symbol, start, end) spans, end exclusive.
    """
    runs = list()
    start = 0
    tokens = path.tokens
    for index in range(1, len(tokens) + 1):
        if index == len(tokens) or tokens[index] != tokens[start]:
            runs.append(Span(tokens[start], start, index))
            start = index
    return runs


def beta_from_forced_alignment(path: LabelSequence) -> Tuple[LabelSequence, StrictSimplexWeights]:
    """
    Run-length encodes a path into its distinct consecutive symbols, blanks included, each weighted by
    the fraction of frames it occupies.
    """
    if len(path) == 0:
        report_problem("Forced alignment path must not be empty.")
    runs = path_runs(path)
    relabeled = LabelSequence(tuple(run.label for run in runs), path.vocab_size)
    lengths = np.array([run.end - run.start for run in runs], dtype=np.float64)
    return relabeled, StrictSimplexWeights(lengths / len(path))


def ctc_greedy_decode(posteriors):
    return greedy_decode(posteriors)


def forced_alignment_record(utterance_id: str, path: LabelSequence) -> dict:
    return {"id": utterance_id, "path": path.to_list(), "runs": [list(run) for run in path_runs(path)]}
