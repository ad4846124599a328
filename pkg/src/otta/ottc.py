"""
OTTC loss: cross-entropy of per-frame label posteriors weighted by the 1D optimal-transport coupling between
frame weights alpha = softmax(scores) and label weights beta.
"""
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import softmax

from otta.model import (LabelSequence, Segmentation, SimplexWeights, SparseCoupling, as_simplex, as_strict_simplex,
                        validate_probability_rows)
from otta.ot_kernel import compute_coupling, coupling_backward
from otta.utils import InfeasibleTargetError, report_problem

PROBABILITY_FLOOR = 1e-30
LOG_FLOOR = float(np.log(PROBABILITY_FLOOR))
DEFAULT_DROP_FACTOR = 0.1


def augment_blanks(y: LabelSequence) -> LabelSequence:
    """
    Inserts the blank between every pair of equal adjacent labels.
    :param y: blank-free label sequence
    :return: blank-augmented label sequence
    """
    if y.has_blank():
        report_problem("Label sequence already contains the blank id {}.".format(y.blank_id))
    tokens = list()
    for token in y.tokens:
        if tokens and tokens[-1] == token:
            tokens.append(y.blank_id)
        tokens.append(token)
    return LabelSequence(tuple(tokens), y.vocab_size)


def drop_blanks(y: LabelSequence) -> LabelSequence:
    return y.without_blanks()


def alpha_from_scores(scores) -> SimplexWeights:
    """
    Softmax over the time axis of per-frame scalar scores.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size == 0 or not np.all(np.isfinite(scores)):
        report_problem("Alpha scores must be a non-empty vector of finite values.")
    return SimplexWeights(softmax(scores))


def _check_shapes(n_frames: int, num_classes: int, y_aug: LabelSequence):
    if num_classes != y_aug.num_classes:
        report_problem("Posteriors have {} classes, the vocabulary needs {}.".format(num_classes, y_aug.num_classes))
    if n_frames < len(y_aug):
        report_problem("OTTC needs at least as many frames as targets ({} < {}).".format(n_frames, len(y_aug)),
                       InfeasibleTargetError)
    if len(y_aug) == 0:
        report_problem("OTTC needs a non-empty target sequence.")


def _floored_log(posteriors: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(posteriors, PROBABILITY_FLOOR))


def ottc_loss_from_log_posteriors(log_posteriors: np.ndarray, y_aug: LabelSequence, alpha, beta,
                                  coupling: Optional[SparseCoupling] = None) -> float:
    """
    -sum_ij gamma(alpha)_ij log p_{y_j}(x_i), summed over the sparse coupling support.
    :param log_posteriors: n x K log-probabilities
    :param y_aug: blank-augmented targets of length m
    :param alpha: frame weights (length n)
    :param beta: label weights (length m)
    :param coupling: precomputed coupling of (alpha, beta), if available
    """
    log_posteriors = np.maximum(np.asarray(log_posteriors, dtype=np.float64), LOG_FLOOR)
    _check_shapes(log_posteriors.shape[0], log_posteriors.shape[1], y_aug)
    if coupling is None:
        coupling = compute_coupling(alpha, beta)
    tokens = np.asarray(y_aug.tokens, dtype=np.int64)
    return float(-np.dot(coupling.masses, log_posteriors[coupling.rows - 1, tokens[coupling.cols - 1]]))


def ottc_loss(posteriors, y_aug: LabelSequence, alpha, beta) -> float:
    """
    OTTC loss on per-frame posteriors.
    :param posteriors: n x (|L| + 1) probabilities, rows summing to 1
    :param y_aug: blank-augmented targets, n >= m
    :param alpha: frame weights
    :param beta: label weights without zero components
    :return: nonnegative loss
    """
    posteriors = validate_probability_rows(posteriors, y_aug.num_classes)
    alpha = as_simplex(alpha)
    beta = as_strict_simplex(beta)
    if len(alpha) != posteriors.shape[0] or len(beta) != len(y_aug):
        report_problem("alpha must match the frame count and beta the target count.")
    return ottc_loss_from_log_posteriors(_floored_log(posteriors), y_aug, alpha, beta)


def ottc_backward_from_log_posteriors(log_posteriors: np.ndarray, y_aug: LabelSequence, scores,
                                      beta) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Loss and gradients with respect to the log-posteriors (n x K) and the raw scores (n).
    Entries clamped at the probability floor receive no gradient.
    """
    raw = np.asarray(log_posteriors, dtype=np.float64)
    log_posteriors = np.maximum(raw, LOG_FLOOR)
    _check_shapes(log_posteriors.shape[0], log_posteriors.shape[1], y_aug)
    alpha = alpha_from_scores(scores)
    beta = as_strict_simplex(beta)
    if len(alpha) != log_posteriors.shape[0] or len(beta) != len(y_aug):
        report_problem("scores must match the frame count and beta the target count.")
    tokens = np.asarray(y_aug.tokens, dtype=np.int64)
    coupling = compute_coupling(alpha, beta)

    grad_log = np.zeros_like(log_posteriors)
    np.add.at(grad_log, (coupling.rows - 1, tokens[coupling.cols - 1]), -coupling.masses)
    grad_log[raw < LOG_FLOOR] = 0.0

    frame_costs = -log_posteriors[:, tokens]
    grad_alpha = coupling_backward(alpha, beta, frame_costs)
    weights = alpha.values
    grad_scores = weights * (grad_alpha - np.dot(weights, grad_alpha))

    loss = float(-np.dot(coupling.masses, log_posteriors[coupling.rows - 1, tokens[coupling.cols - 1]]))
    return loss, grad_log, grad_scores


def ottc_backward(posteriors, y_aug: LabelSequence, scores, beta) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gradients of the OTTC loss.
    :param posteriors: n x K probabilities
    :param y_aug: blank-augmented targets
    :param scores: per-frame alpha scores (alpha = softmax(scores))
    :param beta: label weights
    :return: (gradient over the log-posteriors, gradient over the scores)
    """
    posteriors = validate_probability_rows(posteriors, y_aug.num_classes)
    clamped = posteriors < PROBABILITY_FLOOR
    _, grad_log, grad_scores = ottc_backward_from_log_posteriors(_floored_log(posteriors), y_aug, scores, beta)
    grad_log[clamped] = 0.0
    return grad_log, grad_scores


def posterior_grad(grad_log_posteriors: np.ndarray, posteriors) -> np.ndarray:
    """
    Chains a gradient over log p into a gradient over p.
    """
    return grad_log_posteriors / np.maximum(np.asarray(posteriors, dtype=np.float64), PROBABILITY_FLOOR)


def logits_backward(grad_log_posteriors: np.ndarray, posteriors) -> np.ndarray:
    """
    Chains a gradient over log p = log_softmax(z) into a gradient over the logits z.
    """
    posteriors = np.asarray(posteriors, dtype=np.float64)
    return grad_log_posteriors - posteriors * grad_log_posteriors.sum(axis=1, keepdims=True)


def _frame_runs(frame_ids: np.ndarray) -> List[Tuple[int, int, int]]:
    runs = list()
    start = 0
    for index in range(1, frame_ids.size + 1):
        if index == frame_ids.size or frame_ids[index] != frame_ids[start]:
            runs.append((int(frame_ids[start]), start, index))
            start = index
    return runs


def greedy_decode(posteriors, blank_id: Optional[int] = None) -> Tuple[LabelSequence, Segmentation]:
    """
    Per-frame argmax, collapse of repeated frames, removal of blanks.
    :param posteriors: n x K probabilities (or log-probabilities; only the argmax is used)
    :param blank_id: blank id, the last class by default
    :return: decoded labels and the frame run backing each label
    """
    posteriors = np.asarray(posteriors, dtype=np.float64)
    if posteriors.ndim != 2 or posteriors.shape[0] == 0:
        report_problem("Posteriors must be a non-empty n x K matrix.")
    num_classes = posteriors.shape[1]
    blank = num_classes - 1 if blank_id is None else blank_id
    runs = [run for run in _frame_runs(np.argmax(posteriors, axis=1)) if run[0] != blank]
    labels = LabelSequence(tuple(run[0] for run in runs), num_classes - 1)
    return labels, Segmentation.of(runs, posteriors.shape[0])


def relative_drop_threshold(n_frames: int, factor: float = DEFAULT_DROP_FACTOR) -> float:
    return factor / n_frames


def dropped_frames(alpha, threshold: float) -> List[int]:
    """
    0-based indices of frames with alpha_i < threshold.
    """
    weights = alpha.values if isinstance(alpha, SimplexWeights) else np.asarray(alpha, dtype=np.float64)
    return np.flatnonzero(weights < threshold).tolist()


def alignment_record(utterance_id: str, alpha, coupling: SparseCoupling, frame_argmax, threshold: float) -> dict:
    """
    Plot-ready alignment export of one utterance.
    """
    weights = alpha.values if isinstance(alpha, SimplexWeights) else np.asarray(alpha, dtype=np.float64)
    return {"id": utterance_id, "alpha": weights.tolist(), "coupling": [list(entry) for entry in coupling.entries],
            "frame_argmax": [int(k) for k in frame_argmax], "dropped_frames": dropped_frames(weights, threshold)}
