import math
import unittest

import numpy as np
from numpy.testing import assert_allclose

from otta.ctc_ref import (beta_from_forced_alignment, collapse, ctc_backward, ctc_expand, ctc_loss,
                          ctc_loss_bruteforce, ctc_viterbi, forced_alignment_record, path_runs, required_frames)
from otta.model import LabelSequence
from otta.utils import InfeasibleTargetError, ValidationError

A, BLANK_1 = 0, 1
Y, E, S, BLANK_3 = 0, 1, 2, 3


def three_frame_posteriors():
    return np.array([[0.9, 0.1], [0.9, 0.1], [0.1, 0.9]])


class CollapseTests(unittest.TestCase):

    def test_repeats_and_blanks(self):
        g, o, d, blank = 0, 1, 2, 3
        path = LabelSequence((g, g, o, o, blank, o, d, d), 3)
        self.assertEqual((g, o, o, d), collapse(path).tokens)

    def test_all_blank_path(self):
        self.assertEqual((), collapse(LabelSequence((2, 2, 2), 2)).tokens)

    def test_expansion(self):
        assert_allclose([2, 0, 2, 1, 2], ctc_expand(LabelSequence((0, 1), 2)))
        assert_allclose([2], ctc_expand(LabelSequence((), 2)))

    def test_required_frames(self):
        self.assertEqual(3, required_frames(LabelSequence((0, 0), 2)))
        self.assertEqual(2, required_frames(LabelSequence((0, 1), 2)))


class LossTests(unittest.TestCase):

    def test_two_uniform_frames(self):
        loss = ctc_loss(np.log(np.full((2, 2), 0.5)), LabelSequence((A,), 1))
        self.assertAlmostEqual(-math.log(0.75), loss, places=12)
        self.assertAlmostEqual(0.287682, loss, places=6)

    def test_deterministic_path(self):
        posteriors = np.array([[1.0, 0.0], [0.0, 1.0]])
        with np.errstate(divide="ignore"):
            self.assertEqual(0.0, ctc_loss(np.log(posteriors), LabelSequence((A,), 1)))

    def test_empty_target_scores_the_all_blank_path(self):
        posteriors = np.array([[0.3, 0.7], [0.4, 0.6]])
        self.assertAlmostEqual(-math.log(0.42), ctc_loss(np.log(posteriors), LabelSequence((), 1)), places=12)

    def test_three_frame_enumeration(self):
        expected = -math.log(0.081 + 0.729 + 0.081 + 0.009 + 0.081 + 0.001)
        log_posteriors = np.log(three_frame_posteriors())
        self.assertAlmostEqual(expected, ctc_loss(log_posteriors, LabelSequence((A,), 1)), places=12)
        self.assertAlmostEqual(expected, ctc_loss_bruteforce(three_frame_posteriors(), LabelSequence((A,), 1)),
                               places=12)

    def test_too_few_frames(self):
        with self.assertRaises(InfeasibleTargetError):
            ctc_loss(np.log(np.full((1, 3), 1 / 3)), LabelSequence((0, 1), 2))
        with self.assertRaises(InfeasibleTargetError):
            ctc_loss(np.log(np.full((2, 2), 0.5)), LabelSequence((A, A), 1))

    def test_bruteforce_of_unreachable_target(self):
        self.assertEqual(float("inf"), ctc_loss_bruteforce(np.full((1, 3), 1 / 3), LabelSequence((0, 1), 2)))

    def test_bruteforce_size_limit(self):
        with self.assertRaises(ValidationError):
            ctc_loss_bruteforce(np.full((11, 2), 0.5), LabelSequence((A,), 1))

    def test_class_mismatch(self):
        with self.assertRaises(ValidationError):
            ctc_loss(np.log(np.full((3, 4), 0.25)), LabelSequence((0,), 2))

    def test_forward_backward_matches_bruteforce(self):
        rng = np.random.default_rng(23)
        for _ in range(500):
            n = int(rng.integers(1, 9))
            vocab_size = int(rng.integers(1, 4))
            y = LabelSequence(tuple(rng.integers(0, vocab_size, size=int(rng.integers(0, 4))).tolist()), vocab_size)
            posteriors = rng.dirichlet(np.ones(vocab_size + 1), size=n)
            brute = ctc_loss_bruteforce(posteriors, y)
            if required_frames(y) > n:
                self.assertEqual(float("inf"), brute)
                continue
            self.assertLessEqual(abs(ctc_loss(np.log(posteriors), y) - brute), 1e-9)


class GradientTests(unittest.TestCase):

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(29)
        step = 1e-6
        for _ in range(50):
            n = int(rng.integers(3, 8))
            y = LabelSequence(tuple(rng.integers(0, 3, size=int(rng.integers(1, 3))).tolist()), 3)
            if required_frames(y) > n:
                continue
            log_posteriors = np.log(rng.dirichlet(np.ones(4), size=n))
            _, gradient = ctc_backward(log_posteriors, y)
            t, k = int(rng.integers(0, n)), int(rng.integers(0, 4))
            plus, minus = log_posteriors.copy(), log_posteriors.copy()
            plus[t, k] += step
            minus[t, k] -= step
            numeric = (ctc_loss(plus, y) - ctc_loss(minus, y)) / (2 * step)
            self.assertLessEqual(abs(numeric - gradient[t, k]), 1e-5)

    def test_gradient_is_minus_occupancy(self):
        rng = np.random.default_rng(31)
        log_posteriors = np.log(rng.dirichlet(np.ones(3), size=6))
        loss, gradient = ctc_backward(log_posteriors, LabelSequence((0, 1), 2))
        self.assertAlmostEqual(loss, ctc_loss(log_posteriors, LabelSequence((0, 1), 2)), places=12)
        # every frame occupies exactly one lattice state
        assert_allclose(np.full(6, -1.0), gradient.sum(axis=1), atol=1e-12)


class ViterbiTests(unittest.TestCase):

    def test_three_frame_path(self):
        path = ctc_viterbi(np.log(three_frame_posteriors()), LabelSequence((A,), 1))
        self.assertEqual((A, A, BLANK_1), path.tokens)
        probability = np.prod(three_frame_posteriors()[np.arange(3), list(path.tokens)])
        self.assertAlmostEqual(0.729, probability, places=12)

    def test_ties_prefer_the_earlier_transition(self):
        path = ctc_viterbi(np.log(np.full((2, 2), 0.5)), LabelSequence((A,), 1))
        self.assertEqual((BLANK_1, A), path.tokens)

    def test_paths_collapse_to_target_and_stay_below_marginal(self):
        rng = np.random.default_rng(37)
        for _ in range(300):
            n = int(rng.integers(1, 12))
            y = LabelSequence(tuple(rng.integers(0, 3, size=int(rng.integers(0, 5))).tolist()), 3)
            if required_frames(y) > n:
                continue
            log_posteriors = np.log(rng.dirichlet(np.ones(4), size=n))
            path = ctc_viterbi(log_posteriors, y)
            self.assertEqual(n, len(path))
            self.assertEqual(y, collapse(path))
            path_log_probability = float(np.sum(log_posteriors[np.arange(n), list(path.tokens)]))
            self.assertLessEqual(path_log_probability, -ctc_loss(log_posteriors, y) + 1e-12)


class ForcedAlignmentTests(unittest.TestCase):

    def test_label_weights_of_yes(self):
        path = LabelSequence((BLANK_3, Y, BLANK_3, BLANK_3, E, E, S), 3)
        relabeled, beta = beta_from_forced_alignment(path)
        self.assertEqual((BLANK_3, Y, BLANK_3, E, S), relabeled.tokens)
        assert_allclose([1 / 7, 1 / 7, 2 / 7, 2 / 7, 1 / 7], beta.values, atol=1e-15)

    def test_runs(self):
        path = LabelSequence((2, 0, 0, 2, 1), 2)
        self.assertEqual([(2, 0, 1), (0, 1, 3), (2, 3, 4), (1, 4, 5)], [tuple(run) for run in path_runs(path)])

    def test_record(self):
        record = forced_alignment_record("utt00001", LabelSequence((2, 0, 0), 2))
        self.assertEqual({"id": "utt00001", "path": [2, 0, 0], "runs": [[2, 0, 1], [0, 1, 3]]}, record)

    def test_empty_path(self):
        with self.assertRaises(ValidationError):
            beta_from_forced_alignment(LabelSequence((), 2))


if __name__ == '__main__':
    unittest.main()
