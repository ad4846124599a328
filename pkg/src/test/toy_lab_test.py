import os
import unittest

import numpy as np
from numpy.testing import assert_array_equal
from scipy.special import log_softmax, softmax

from otta.model import LabelSequence, StrictSimplexWeights
from otta.optim import AdamOptimizer
from otta.ottc import ottc_loss
from otta.toy_lab import (LOG_COLUMNS, PARAMETER_NAMES, SCORE_HEAD, DatasetConfig, EncoderParams,
                          TrainConfig, TrainingTarget, alpha_of, encoder_forward, evaluate, freeze_sweep,
                          generate_dataset, generate_from_config, init_params, load_checkpoint,
                          loss_and_output_grads, make_codebook, model_loss_and_grads, prepare_targets, read_dataset,
                          save_checkpoint, train, trainable_names, write_dataset)
from otta.utils import ValidationError, write_json_file

TEST_DATA_FOLDER = os.path.join(os.path.dirname(os.path.realpath(__file__)), "./test_data/")
TEST_CHECKPOINT = os.path.join(TEST_DATA_FOLDER, "toy_checkpoint.json")
TEST_DATASET = os.path.join(TEST_DATA_FOLDER, "toy_dataset.jsonl")


def tiny_dataset(count=12, seed=5, silence_prob=0.2):
    return generate_dataset(3, count, (2, 3), (2, 3), 0.3, silence_prob, seed, feature_dim=8)


def tiny_config(**overrides):
    settings = {"epochs": 3, "freeze_last_epochs": 0, "lr": 1e-2, "warmup_steps": 0, "batch_size": 4,
                "hidden": 8, "probe_count": 2, "monitor_count": 4}
    settings.update(overrides)
    return TrainConfig(**settings)


class DatasetTests(unittest.TestCase):

    def test_same_seed_same_data(self):
        first, second = tiny_dataset(), tiny_dataset()
        for left, right in zip(first, second):
            self.assertEqual(left.id, right.id)
            assert_array_equal(left.features, right.features)
            self.assertEqual(left.labels, right.labels)
            self.assertEqual(left.gt_segmentation, right.gt_segmentation)

    def test_zero_noise_recovers_labels(self):
        utterances = generate_dataset(4, 50, (2, 5), (1, 3), 0.0, 0.0, 9, feature_dim=8)
        codebook = make_codebook(4, 8, np.random.default_rng(9))
        for utterance in utterances:
            nearest = np.argmin(np.linalg.norm(utterance.features[:, None, :] - codebook[None, :, :], axis=2), axis=1)
            for span in utterance.gt_segmentation.spans:
                assert_array_equal(codebook[span.label], utterance.features[span.start])
                self.assertTrue(np.all(nearest[span.start:span.end] == span.label))
            self.assertEqual(0.0, utterance.silence_fraction)

    def test_segmentation_tiles_the_speech_frames(self):
        utterances = generate_from_config(DatasetConfig())
        self.assertEqual(2000, len(utterances))
        for utterance in utterances:
            m = len(utterance.labels)
            self.assertTrue(3 <= m <= 8)
            self.assertEqual(utterance.labels.to_list(), utterance.gt_segmentation.labels)
            speech = utterance.gt_segmentation.duration()
            self.assertTrue(2 * m <= speech <= 6 * m)
            self.assertEqual(utterance.n_frames, speech + len(utterance.silence_frames()))
            self.assertAlmostEqual(len(utterance.silence_frames()) / utterance.n_frames, utterance.silence_fraction)
        mean_frames = np.mean([utterance.n_frames for utterance in utterances])
        self.assertGreaterEqual(mean_frames, 2 * 3)
        self.assertLessEqual(mean_frames, 6 * 8 + 6 * 9)

    def test_without_repeats(self):
        for utterance in generate_dataset(2, 100, (4, 8), (1, 2), 0.1, 0.0, 3, allow_repeats=False):
            tokens = utterance.labels.tokens
            self.assertTrue(all(a != b for a, b in zip(tokens, tokens[1:])))

    def test_invalid_arguments(self):
        with self.assertRaises(ValidationError):
            generate_dataset(1, 10, (2, 3), (2, 3), 0.1, 0.0, 0)
        with self.assertRaises(ValidationError):
            generate_dataset(3, 10, (5, 3), (2, 3), 0.1, 0.0, 0)
        with self.assertRaises(ValidationError):
            generate_dataset(3, 10, (2, 3), (0, 3), 0.1, 0.0, 0)
        with self.assertRaises(ValidationError):
            generate_dataset(3, 10, (2, 3), (2, 3), 0.1, 1.0, 0)

    def test_dataset_file(self):
        if os.path.exists(TEST_DATASET):
            os.remove(TEST_DATASET)
        utterances = tiny_dataset(count=3)
        write_dataset(utterances, TEST_DATASET)
        restored = read_dataset(TEST_DATASET)
        self.assertEqual([u.id for u in utterances], [u.id for u in restored])
        assert_array_equal(utterances[2].features, restored[2].features)
        self.assertAlmostEqual(utterances[2].silence_fraction, restored[2].silence_fraction)
        os.remove(TEST_DATASET)


class EncoderTests(unittest.TestCase):

    def test_zero_parameters_give_uniform_outputs(self):
        params = init_params(8, 4, hidden=8)
        zeros = EncoderParams({name: np.zeros_like(params[name]) for name in PARAMETER_NAMES})
        logits, scores = encoder_forward(zeros, np.random.default_rng(0).standard_normal((5, 8)))
        assert_array_equal(np.full((5, 4), 0.25), softmax(logits, axis=1))
        assert_array_equal(np.full(5, 0.2), softmax(scores))

    def test_rejects_feature_mismatch(self):
        with self.assertRaises(ValidationError):
            encoder_forward(init_params(8, 4, hidden=8), np.zeros((3, 5)))

    def test_rejects_bad_shapes(self):
        tensors = dict(init_params(8, 4, hidden=8).tensors)
        tensors["logits_b"] = np.zeros(5)
        with self.assertRaises(ValidationError):
            EncoderParams(tensors)

    def check_gradients(self, params, features, target, mode, names, count=120):
        rng = np.random.default_rng(1)
        step = 1e-6
        _, grads = model_loss_and_grads(params, features, target, mode)
        coordinates = [(name, index) for name in names for index in np.ndindex(*params[name].shape)]
        self.assertGreaterEqual(len(coordinates), count)
        for position in rng.choice(len(coordinates), size=count, replace=False):
            name, index = coordinates[int(position)]
            plus, minus = params.copy(), params.copy()
            plus.tensors[name][index] += step
            minus.tensors[name][index] -= step
            numeric = (model_loss_and_grads(plus, features, target, mode)[0] -
                       model_loss_and_grads(minus, features, target, mode)[0]) / (2 * step)
            analytic = grads[name][index]
            self.assertLessEqual(abs(numeric - analytic), 1e-5 + 1e-4 * abs(analytic), (name, index))
        return grads

    def test_fixed_alpha_gradients(self):
        utterance = tiny_dataset()[0]
        target = prepare_targets("ottc-fixed-alpha", [utterance])[0]
        params = init_params(8, 4, hidden=8, seed=3)
        self.check_gradients(params, utterance.features, target, "ottc-fixed-alpha", PARAMETER_NAMES[:6])

    def test_ctc_gradients(self):
        utterance = tiny_dataset()[1]
        params = init_params(8, 4, hidden=8, seed=4)
        self.check_gradients(params, utterance.features, TrainingTarget(utterance.labels), "ctc", PARAMETER_NAMES[:6])

    def test_ottc_gradients_through_posteriors_and_scores(self):
        utterance = tiny_dataset()[2]
        target = prepare_targets("ottc", [utterance])[0]
        cumulative_beta = np.cumsum(target.beta.values)[:-1]
        for seed in range(100):
            params = init_params(8, 4, hidden=8, seed=seed)
            _, scores = encoder_forward(params, utterance.features)
            cumulative_alpha = np.cumsum(softmax(scores))[:-1]
            # the coupling is smooth in alpha while no cumulative alpha meets a cumulative beta
            if np.min(np.abs(cumulative_alpha[:, None] - cumulative_beta[None, :])) >= 1e-3:
                break
        else:
            self.fail("no initialisation keeps the alpha breakpoints away from the beta breakpoints")
        grads = self.check_gradients(params, utterance.features, target, "ottc", PARAMETER_NAMES, count=150)
        self.assertGreater(np.abs(grads["score_w1"]).max(), 0.0)
        self.assertGreater(np.abs(grads["score_w2"]).max(), 0.0)

    def test_single_path_loss_is_mean_frame_cross_entropy(self):
        rng = np.random.default_rng(2)
        logits = rng.standard_normal((4, 3))
        path = LabelSequence((0, 0, 2, 1), 2)
        loss, grad_logits, grad_scores = loss_and_output_grads("single-path-ce", logits, np.zeros(4),
                                                               TrainingTarget(LabelSequence((0, 1), 2), path=path))
        posteriors = softmax(logits, axis=1)
        self.assertAlmostEqual(-np.mean(np.log(posteriors[np.arange(4), [0, 0, 2, 1]])), loss, places=12)
        self.assertIsNone(grad_scores)
        self.assertEqual((4, 3), grad_logits.shape)

    def test_fixed_alpha_is_uniform_weighting(self):
        rng = np.random.default_rng(3)
        logits = rng.standard_normal((6, 3))
        labels = LabelSequence((0, 2, 0), 2)
        target = TrainingTarget(labels, beta=np.full(3, 1 / 3))
        loss, _, grad_scores = loss_and_output_grads("ottc-fixed-alpha", logits, rng.standard_normal(6), target)
        self.assertAlmostEqual(ottc_loss(softmax(logits, axis=1), labels, np.full(6, 1 / 6), np.full(3, 1 / 3)),
                               loss, places=9)
        self.assertIsNone(grad_scores)


class OptimizerTests(unittest.TestCase):

    def test_warmup_then_decay(self):
        optimizer = AdamOptimizer(init_params(8, 4, hidden=8).tensors, 1.0, 10, 110)
        self.assertAlmostEqual(0.1, optimizer.learning_rate(1))
        self.assertAlmostEqual(1.0, optimizer.learning_rate(10))
        self.assertAlmostEqual(0.5, optimizer.learning_rate(60))
        self.assertEqual(0.0, optimizer.learning_rate(110))

    def test_zero_learning_rate_keeps_parameters(self):
        dataset = tiny_dataset()
        initial = init_params(8, 4, hidden=8, seed=1)
        params, _ = train(tiny_config(lr=0.0, epochs=2), dataset, initial_params=initial)
        for name in PARAMETER_NAMES:
            assert_array_equal(initial[name], params[name])

    def test_trainable_names(self):
        self.assertEqual(PARAMETER_NAMES, trainable_names("ottc", frozen=False))
        self.assertEqual(("logits_w", "logits_b"), trainable_names("ottc", frozen=True))
        self.assertFalse(set(SCORE_HEAD) & set(trainable_names("ctc", frozen=False)))


class TrainingTests(unittest.TestCase):

    def test_log_records(self):
        params, log = train(tiny_config(), tiny_dataset())
        self.assertEqual([1, 2, 3], [record["epoch"] for record in log.records])
        for row in log.csv_rows():
            self.assertEqual(LOG_COLUMNS, list(row))
            self.assertTrue(np.isfinite(row["loss"]))
        self.assertEqual(3 * 2, len(log.alpha_snapshots))

    def test_same_seed_same_parameters(self):
        first, _ = train(tiny_config(), tiny_dataset())
        second, _ = train(tiny_config(), tiny_dataset())
        for name in PARAMETER_NAMES:
            assert_array_equal(first[name], second[name])

    def test_frozen_epochs_keep_alpha(self):
        dataset = tiny_dataset()
        initial = init_params(8, 4, hidden=8, seed=0)
        params, log = train(tiny_config(epochs=4, freeze_last_epochs=2), dataset, initial_params=initial)
        for utterance in dataset[:2]:
            snapshots = [snapshot["alpha"] for snapshot in log.alpha_snapshots if snapshot["id"] == utterance.id]
            self.assertEqual(4, len(snapshots))
            self.assertEqual(snapshots[1], snapshots[2])
            self.assertEqual(snapshots[1], snapshots[3])
            self.assertEqual(snapshots[3], alpha_of(params, utterance.features).to_list())
        self.assertFalse(np.array_equal(initial["logits_w"], params["logits_w"]))

    def test_ctc_mode_never_touches_the_score_head(self):
        initial = init_params(8, 4, hidden=8, seed=2)
        params, log = train(tiny_config(mode="ctc"), tiny_dataset(), initial_params=initial)
        for name in SCORE_HEAD:
            assert_array_equal(initial[name], params[name])
        self.assertEqual([], log.alpha_snapshots)
        self.assertEqual(0.0, log.records[-1]["dropped_pct"])

    def test_oracle_modes_need_a_ctc_encoder(self):
        with self.assertRaises(ValidationError):
            train(tiny_config(mode="ottc-oracle-beta"), tiny_dataset())
        with self.assertRaises(ValidationError):
            train(tiny_config(mode="single-path-ce"), tiny_dataset())

    def test_oracle_modes_with_ctc_encoder(self):
        dataset = tiny_dataset()
        ctc_params, _ = train(tiny_config(mode="ctc", epochs=1), dataset)
        targets = prepare_targets("ottc-oracle-beta", dataset, ctc_params)
        for utterance, target in zip(dataset, targets):
            self.assertLessEqual(len(target.labels), utterance.n_frames)
            self.assertAlmostEqual(1.0, float(np.sum(target.beta.values)))
        for mode in ("ottc-oracle-beta", "single-path-ce"):
            _, log = train(tiny_config(mode=mode, epochs=1), dataset, ctc_params)
            self.assertEqual(1, len(log.records))

    def test_invalid_config(self):
        with self.assertRaises(ValidationError):
            train(tiny_config(mode="unknown"), tiny_dataset())
        with self.assertRaises(ValidationError):
            train(tiny_config(epochs=2, freeze_last_epochs=3), tiny_dataset())


class EvaluationTests(unittest.TestCase):

    def test_metrics_within_ranges(self):
        dataset = tiny_dataset()
        params = init_params(8, 4, hidden=8, seed=6)
        for skip_dropped in (False, True):
            report = evaluate(params, dataset, "ottc", drop_threshold=0.5, skip_dropped=skip_dropped,
                              subtract_silence=True)
            self.assertTrue(0.0 <= report.peaky_percent <= 100.0)
            self.assertTrue(0.0 <= report.f1 <= 1.0)
            self.assertTrue(0.0 <= report.idr <= 1.0)
            self.assertGreaterEqual(report.token_error_rate, 0.0)
            self.assertTrue(0.0 <= report.dropped_frame_percent <= 100.0)

    def test_dropped_frames_only_for_alpha_modes(self):
        dataset = tiny_dataset()
        params = init_params(8, 4, hidden=8, seed=6)
        self.assertEqual(0.0, evaluate(params, dataset, "ctc", drop_threshold=1000.0).dropped_frame_percent)
        self.assertEqual(100.0, evaluate(params, dataset, "ottc", drop_threshold=1000.0).dropped_frame_percent)

    def test_freeze_sweep(self):
        dataset = tiny_dataset()
        results = freeze_sweep(tiny_config(epochs=2), dataset[:8], dataset[8:], freeze_values=(0, 1))
        self.assertEqual([0, 1], [result["freeze_last_epochs"] for result in results])
        self.assertIn("token_error_rate", results[0])


class LearningBehaviourTests(unittest.TestCase):

    def test_fixed_alpha_with_one_frame_per_target_is_cross_entropy(self):
        rng = np.random.default_rng(4)
        logits = rng.standard_normal((4, 4))
        labels = LabelSequence((0, 2, 1, 0), 3)
        target = TrainingTarget(labels, beta=StrictSimplexWeights.uniform(4))
        loss, _, _ = loss_and_output_grads("ottc-fixed-alpha", logits, rng.standard_normal(4), target)
        log_posteriors = log_softmax(logits, axis=1)
        cross_entropy = -np.mean(log_posteriors[np.arange(4), list(labels.tokens)])
        self.assertLessEqual(abs(cross_entropy - loss), 1e-12)

    def test_zero_noise_training_converges(self):
        dataset = generate_dataset(4, 40, (2, 4), (3, 3), 0.0, 0.0, 13, feature_dim=8, allow_repeats=False)
        config = tiny_config(epochs=30, lr=2e-2, batch_size=8, hidden=16, monitor_count=40)
        params, log = train(config, dataset)
        losses = [record["loss"] for record in log.records]
        for first, last in zip(losses, losses[4:]):
            self.assertLessEqual(last, first)
        self.assertLess(losses[-1], losses[0])
        report = evaluate(params, dataset, "ottc")
        self.assertEqual(0.0, report.token_error_rate)
        self.assertAlmostEqual(1.0, report.idr, places=9)

    def test_ottc_is_less_peaky_than_ctc(self):
        train_set = generate_dataset(8, 600, (3, 8), (2, 6), 0.3, 0.15, 7)
        test_set = generate_dataset(8, 100, (3, 8), (2, 6), 0.3, 0.15, 8)
        reports = dict()
        for mode, freeze_last_epochs in (("ctc", 0), ("ottc", 4)):
            config = TrainConfig(mode=mode, epochs=20, freeze_last_epochs=freeze_last_epochs, seed=7,
                                 probe_count=0, monitor_count=10)
            params, _ = train(config, train_set)
            reports[mode] = evaluate(params, test_set, mode)
        self.assertLessEqual(reports["ottc"].peaky_percent + 10.0, reports["ctc"].peaky_percent)


class CheckpointTests(unittest.TestCase):

    def setUp(self):
        if os.path.exists(TEST_CHECKPOINT):
            os.remove(TEST_CHECKPOINT)

    def tearDown(self):
        if os.path.exists(TEST_CHECKPOINT):
            os.remove(TEST_CHECKPOINT)

    def test_save_and_load(self):
        params = init_params(8, 4, hidden=8, seed=7)
        save_checkpoint(params, TEST_CHECKPOINT, {"mode": "ctc", "vocab_size": 3})
        self.assertTrue(os.path.exists(TEST_CHECKPOINT))
        restored, metadata = load_checkpoint(TEST_CHECKPOINT)
        self.assertEqual({"mode": "ctc", "vocab_size": 3}, metadata)
        for name in PARAMETER_NAMES:
            assert_array_equal(params[name], restored[name])

    def test_rejects_foreign_documents(self):
        write_json_file({"format": "something-else"}, TEST_CHECKPOINT)
        with self.assertRaises(ValidationError):
            load_checkpoint(TEST_CHECKPOINT)
        write_json_file({"format": "otta-encoder", "version": 99}, TEST_CHECKPOINT)
        with self.assertRaises(ValidationError):
            load_checkpoint(TEST_CHECKPOINT)


if __name__ == '__main__':
    unittest.main()
