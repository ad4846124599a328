"""
Alignment-quality metrics: peaky percentage, starting-frame F1, intersection duration ratio (IDR) and token
error rate. Predicted and reference tokens are paired by a minimum-edit-distance alignment of their labels.
"""
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from otta.model import LabelSequence, MetricsReport, Segmentation
from otta.utils import report_problem

DEFAULT_TOLERANCE_FRAMES = 2


def _tokens(sequence) -> List[int]:
    if isinstance(sequence, LabelSequence):
        return list(sequence.tokens)
    if isinstance(sequence, Segmentation):
        return sequence.labels
    return [int(token) for token in sequence]


def _suffix_distances(hyp: Sequence[int], ref: Sequence[int]) -> np.ndarray:
    # distances[i, j] = edit distance between hyp[i:] and ref[j:]
    rows, cols = len(hyp), len(ref)
    distances = np.zeros((rows + 1, cols + 1), dtype=np.int64)
    distances[rows, :] = np.arange(cols, -1, -1)
    distances[:, cols] = np.arange(rows, -1, -1)
    for i in range(rows - 1, -1, -1):
        for j in range(cols - 1, -1, -1):
            diagonal = distances[i + 1, j + 1] + (0 if hyp[i] == ref[j] else 1)
            distances[i, j] = min(diagonal, distances[i + 1, j] + 1, distances[i, j + 1] + 1)
    return distances


def levenshtein(hyp, ref) -> int:
    """
    Unit-cost edit distance between two token sequences.
    """
    return int(_suffix_distances(_tokens(hyp), _tokens(ref))[0, 0])


def match_tokens(hyp, ref) -> List[Tuple[int, int]]:
    """
    Pairs of 0-based (hyp index, ref index) with equal labels on a minimum-edit-distance alignment.
    The alignment is traced from the start so that, among optimal alignments, earlier matches are preferred.
    """
    hyp, ref = _tokens(hyp), _tokens(ref)
    distances = _suffix_distances(hyp, ref)
    pairs = list()
    i, j = 0, 0
    while i < len(hyp) and j < len(ref):
        if hyp[i] == ref[j] and distances[i, j] == distances[i + 1, j + 1]:
            pairs.append((i, j))
            i, j = i + 1, j + 1
        elif distances[i, j] == distances[i + 1, j + 1] + 1:
            i, j = i + 1, j + 1
        elif distances[i, j] == distances[i + 1, j] + 1:
            i += 1
        else:
            j += 1
    return pairs


def peaky_percent(frame_argmax: Iterable[int], non_alphabet: Iterable[int],
                  silence_fraction_to_subtract: float = 0.0) -> float:
    """
    Percentage of frames whose argmax is a non-alphabet symbol (blank, space), minus the real silence percentage.
    :param frame_argmax: per-frame argmax ids
    :param non_alphabet: ids counted as non-alphabet
    :param silence_fraction_to_subtract: fraction of frames that are true silence, in [0, 1]
    :return: value clamped to [0, 100]
    """
    frames = np.asarray(list(frame_argmax), dtype=np.int64)
    if frames.size == 0:
        report_problem("Peaky percentage needs at least one frame.")
    if not 0.0 <= silence_fraction_to_subtract <= 1.0:
        report_problem("Silence fraction must lie in [0, 1], got {}.".format(silence_fraction_to_subtract))
    symbols = np.asarray(sorted(set(int(k) for k in non_alphabet)), dtype=np.int64)
    share = 100.0 * np.count_nonzero(np.isin(frames, symbols)) / frames.size
    return float(min(100.0, max(0.0, share - 100.0 * silence_fraction_to_subtract)))


def boundary_counts(pred: Segmentation, ref: Segmentation,
                    tolerance_frames: int = DEFAULT_TOLERANCE_FRAMES) -> dict:
    """
    True positives are label-matched pairs whose start frames differ by at most tolerance_frames.
    :return: {"tp", "fp", "fn", "matched"}
    """
    if tolerance_frames < 0:
        report_problem("Boundary tolerance must be nonnegative, got {}.".format(tolerance_frames))
    pairs = match_tokens(pred, ref)
    true_positives = sum(1 for p, r in pairs if abs(pred.spans[p].start - ref.spans[r].start) <= tolerance_frames)
    return {"tp": true_positives, "fp": len(pred) - true_positives, "fn": len(ref) - true_positives,
            "matched": len(pairs)}


def f1_from_counts(counts: dict) -> float:
    predicted = counts["tp"] + counts["fp"]
    reference = counts["tp"] + counts["fn"]
    if predicted == 0 and reference == 0:
        return 1.0
    if counts["tp"] == 0:
        return 0.0
    precision = counts["tp"] / predicted
    recall = counts["tp"] / reference
    return 2.0 * precision * recall / (precision + recall)


def boundary_f1(pred: Segmentation, ref: Segmentation, tolerance_frames: int = DEFAULT_TOLERANCE_FRAMES) -> float:
    """
    Starting-frame F1 score of predicted against reference segmentations.
    Two empty segmentations agree perfectly and score 1.
    """
    return f1_from_counts(boundary_counts(pred, ref, tolerance_frames))


def idr(pred: Segmentation, ref: Segmentation) -> float:
    """
    Total overlap of label-matched spans divided by the total reference duration.
    """
    reference_duration = ref.duration()
    if reference_duration == 0:
        report_problem("IDR is undefined for an empty reference segmentation.")
    overlap = 0
    for p, r in match_tokens(pred, ref):
        predicted, reference = pred.spans[p], ref.spans[r]
        overlap += max(0, min(predicted.end, reference.end) - max(predicted.start, reference.start))
    return overlap / reference_duration


def token_error_rate(hyp, ref) -> float:
    reference = _tokens(ref)
    if not reference:
        report_problem("Token error rate is undefined for an empty reference.")
    return levenshtein(hyp, reference) / len(reference)


def dropped_frame_percent(dropped_count: int, n_frames: int) -> float:
    if n_frames <= 0:
        report_problem("Dropped-frame percentage needs at least one frame.")
    return 100.0 * dropped_count / n_frames


def utterance_report(frame_argmax, hyp: LabelSequence, pred: Segmentation, ref_labels: LabelSequence,
                     ref: Segmentation, non_alphabet: Iterable[int], silence_fraction: float = 0.0,
                     tolerance_frames: int = DEFAULT_TOLERANCE_FRAMES, dropped_count: int = 0) -> MetricsReport:
    """
    All metrics of a single utterance.
    """
    frames = list(frame_argmax)
    counts = boundary_counts(pred, ref, tolerance_frames)
    return MetricsReport(peaky_percent=peaky_percent(frames, non_alphabet, silence_fraction),
                         f1=f1_from_counts(counts),
                         idr=idr(pred, ref),
                         token_error_rate=token_error_rate(hyp, ref_labels),
                         dropped_frame_percent=dropped_frame_percent(dropped_count, len(frames)),
                         counts=counts)


def mean_report(reports: Sequence[MetricsReport]) -> MetricsReport:
    """
    Unweighted mean over utterances; counts are summed.
    """
    if not reports:
        report_problem("Cannot aggregate metrics of an empty dataset.")
    counts = dict()
    for report in reports:
        for key, value in report.counts.items():
            counts[key] = counts.get(key, 0) + value
    return MetricsReport(peaky_percent=float(np.mean([report.peaky_percent for report in reports])),
                         f1=float(np.mean([report.f1 for report in reports])),
                         idr=float(np.mean([report.idr for report in reports])),
                         token_error_rate=float(np.mean([report.token_error_rate for report in reports])),
                         dropped_frame_percent=float(np.mean([report.dropped_frame_percent for report in reports])),
                         counts=counts)
