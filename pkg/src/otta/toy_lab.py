"""
Desk-scale training lab: synthetic monotonic sequence data with ground-truth segmentations, a per-frame encoder
with a logits head and an alignment-weight (score) head, and a training loop for OTTC, CTC and the ablation modes.
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf, log_softmax, softmax

from otta.align_metrics import DEFAULT_TOLERANCE_FRAMES, mean_report, utterance_report
from otta.ctc_ref import beta_from_forced_alignment, ctc_backward, ctc_viterbi, required_frames
from otta.model import LabelSequence, MetricsReport, Segmentation, SimplexWeights, StrictSimplexWeights
from otta.optim import AdamOptimizer
from otta.ottc import (augment_blanks, dropped_frames, greedy_decode, logits_backward,
                       ottc_backward_from_log_posteriors, relative_drop_threshold)
from otta.utils import (InfeasibleTargetError, read_json_file, read_jsonl_file, report_problem,
                        write_json_file, write_jsonl_file)

MODE_OTTC = "ottc"
MODE_CTC = "ctc"
MODE_FIXED_ALPHA = "ottc-fixed-alpha"
MODE_ORACLE_BETA = "ottc-oracle-beta"
MODE_SINGLE_PATH_CE = "single-path-ce"
TRAINING_MODES = (MODE_OTTC, MODE_CTC, MODE_FIXED_ALPHA, MODE_ORACLE_BETA, MODE_SINGLE_PATH_CE)
ALPHA_MODES = (MODE_OTTC, MODE_ORACLE_BETA)
CTC_CHECKPOINT_MODES = (MODE_ORACLE_BETA, MODE_SINGLE_PATH_CE)

CODEBOOK_SCALE = 2.0
DEFAULT_FEATURE_DIM = 16
DEFAULT_HIDDEN = 32

TRUNK = ("trunk_w1", "trunk_b1", "trunk_w2", "trunk_b2")
LOGITS_HEAD = ("logits_w", "logits_b")
SCORE_HEAD = ("score_w1", "score_b1", "score_w2", "score_b2")
PARAMETER_NAMES = TRUNK + LOGITS_HEAD + SCORE_HEAD

CHECKPOINT_FORMAT = "otta-encoder"
CHECKPOINT_VERSION = 1

LOG_COLUMNS = ["epoch", "loss", "ter", "peaky", "f1", "idr", "dropped_pct"]


@dataclass
class DatasetConfig:
    vocab_size: int = 8
    utterance_count: int = 2000
    target_len_range: Tuple[int, int] = (3, 8)
    duration_range: Tuple[int, int] = (2, 6)
    noise_sigma: float = 0.3
    silence_prob: float = 0.15
    seed: int = 7
    feature_dim: int = DEFAULT_FEATURE_DIM
    allow_repeats: bool = True


@dataclass
class SyntheticUtterance:
    """
    Frame features with the label sequence they were generated from and the frames each label occupies.
    Frames outside every span are silence.
    """
    id: str
    features: np.ndarray
    labels: LabelSequence
    gt_segmentation: Segmentation
    silence_fraction: float

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    def silence_frames(self) -> List[int]:
        covered = np.zeros(self.n_frames, dtype=bool)
        for span in self.gt_segmentation.spans:
            covered[span.start:span.end] = True
        return np.flatnonzero(~covered).tolist()

    def to_dict(self) -> dict:
        return {"id": self.id, "features": self.features.tolist(), "labels": self.labels.to_list(),
                "vocab_size": self.labels.vocab_size, "gt_segmentation": self.gt_segmentation.to_list(),
                "silence_frames": self.silence_frames()}

    @classmethod
    def from_dict(cls, record: dict):
        try:
            features = np.asarray(record["features"], dtype=np.float64)
            labels = LabelSequence(tuple(record["labels"]), int(record["vocab_size"]))
            segmentation = Segmentation.of(record["gt_segmentation"], features.shape[0])
            silence = len(record["silence_frames"])
            utterance_id = str(record["id"])
        except (KeyError, TypeError, ValueError) as error:
            report_problem("Malformed utterance record: {}".format(error))
        if features.ndim != 2 or features.shape[0] == 0:
            report_problem("Utterance '{}' has no frames.".format(utterance_id))
        if segmentation.labels != labels.to_list():
            report_problem("Utterance '{}' segmentation does not match its labels.".format(utterance_id))
        return cls(utterance_id, features, labels, segmentation, silence / features.shape[0])


def _check_range(value_range: Sequence[int], name: str, minimum: int = 1) -> Tuple[int, int]:
    if len(value_range) != 2 or value_range[0] > value_range[1] or value_range[0] < minimum:
        report_problem("{} must be a range MIN:MAX with {} <= MIN <= MAX, got {}.".format(name, minimum, value_range))
    return int(value_range[0]), int(value_range[1])


def make_codebook(vocab_size: int, feature_dim: int, rng: np.random.Generator) -> np.ndarray:
    """
    One prototype per label plus a silence prototype in the last row. Rows are orthonormal when the feature
    dimension allows it, unit-norm random directions otherwise.
    """
    count = vocab_size + 1
    if feature_dim >= count:
        basis, _ = np.linalg.qr(rng.standard_normal((feature_dim, count)))
        prototypes = basis.T
    else:
        prototypes = rng.standard_normal((count, feature_dim))
        prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)
    return CODEBOOK_SCALE * prototypes


def _sample_labels(rng: np.random.Generator, vocab_size: int, length: int, allow_repeats: bool) -> List[int]:
    if allow_repeats:
        return rng.integers(0, vocab_size, size=length).tolist()
    labels = [int(rng.integers(0, vocab_size))]
    for _ in range(length - 1):
        shifted = int(rng.integers(0, vocab_size - 1))
        labels.append(shifted if shifted < labels[-1] else shifted + 1)
    return labels


def generate_dataset(vocab_size: int, utterance_count: int, target_len_range: Sequence[int],
                     duration_range: Sequence[int], noise_sigma: float, silence_prob: float, seed: int,
                     feature_dim: int = DEFAULT_FEATURE_DIM, allow_repeats: bool = True) -> List[SyntheticUtterance]:
    """
    Generates synthetic utterances. Every label occupies a run of frames drawn around its codebook prototype;
    with probability silence_prob a run of silence frames is inserted into each gap between (and around) labels.
    :param vocab_size: number of labels, at least 2
    :param utterance_count: number of utterances
    :param target_len_range: (min, max) number of labels per utterance
    :param duration_range: (min, max) frames per label and per silence run
    :param noise_sigma: standard deviation of the Gaussian feature noise
    :param silence_prob: probability of a silence run per gap, in [0, 1)
    :param seed: random seed; the same seed gives bit-identical datasets
    :param feature_dim: feature dimension d
    :param allow_repeats: whether adjacent labels may be equal
    :return: list of utterances
    """
    if vocab_size < 2:
        report_problem("Vocabulary size must be at least 2, got {}.".format(vocab_size))
    if utterance_count < 1:
        report_problem("Utterance count must be positive, got {}.".format(utterance_count))
    min_len, max_len = _check_range(target_len_range, "Target length range")
    min_dur, max_dur = _check_range(duration_range, "Duration range")
    if noise_sigma < 0:
        report_problem("Noise sigma must be nonnegative, got {}.".format(noise_sigma))
    if not 0.0 <= silence_prob < 1.0:
        report_problem("Silence probability must lie in [0, 1), got {}.".format(silence_prob))
    if feature_dim < 1:
        report_problem("Feature dimension must be positive, got {}.".format(feature_dim))

    rng = np.random.default_rng(seed)
    codebook = make_codebook(vocab_size, feature_dim, rng)
    silence_id = vocab_size
    utterances = list()
    for index in range(utterance_count):
        length = int(rng.integers(min_len, max_len + 1))
        labels = _sample_labels(rng, vocab_size, length, allow_repeats)
        frame_ids = list()
        spans = list()
        for position in range(length + 1):
            if rng.random() < silence_prob:
                frame_ids.extend([silence_id] * int(rng.integers(min_dur, max_dur + 1)))
            if position < length:
                duration = int(rng.integers(min_dur, max_dur + 1))
                spans.append((labels[position], len(frame_ids), len(frame_ids) + duration))
                frame_ids.extend([labels[position]] * duration)
        features = codebook[frame_ids] + noise_sigma * rng.standard_normal((len(frame_ids), feature_dim))
        silence_count = sum(1 for frame_id in frame_ids if frame_id == silence_id)
        utterances.append(SyntheticUtterance("utt{:05d}".format(index), features,
                                             LabelSequence(tuple(labels), vocab_size),
                                             Segmentation.of(spans, len(frame_ids)), silence_count / len(frame_ids)))
    logging.info("Generated {} utterances ({} frames).".format(len(utterances),
                                                                sum(u.n_frames for u in utterances)))
    return utterances


def generate_from_config(config: DatasetConfig) -> List[SyntheticUtterance]:
    return generate_dataset(config.vocab_size, config.utterance_count, config.target_len_range,
                            config.duration_range, config.noise_sigma, config.silence_prob, config.seed,
                            config.feature_dim, config.allow_repeats)


def write_dataset(utterances: Sequence[SyntheticUtterance], file_path: str):
    write_jsonl_file((utterance.to_dict() for utterance in utterances), file_path)


def read_dataset(file_path: str) -> List[SyntheticUtterance]:
    utterances = [SyntheticUtterance.from_dict(record) for record in read_jsonl_file(file_path)]
    if utterances and len({(u.features.shape[1], u.labels.vocab_size) for u in utterances}) != 1:
        report_problem("Dataset '{}' mixes feature dimensions or vocabularies.".format(file_path))
    return utterances


class EncoderParams:
    """
    Named parameter tensors of the per-frame encoder:
    trunk d -> H -> H (GeLU after each layer), logits head H -> K and score head H -> H/2 -> 1 (GeLU in between).
    """

    def __init__(self, tensors: Dict[str, np.ndarray]):
        missing = [name for name in PARAMETER_NAMES if name not in tensors]
        if missing:
            report_problem("Encoder parameters {} are missing.".format(missing))
        self.tensors = {name: np.array(tensors[name], dtype=np.float64) for name in PARAMETER_NAMES}
        self._check_shapes()

    def _check_shapes(self):
        feature_dim, hidden = self.tensors["trunk_w1"].shape
        half = self.tensors["score_w1"].shape[1]
        num_classes = self.tensors["logits_w"].shape[1]
        expected = {"trunk_w1": (feature_dim, hidden), "trunk_b1": (hidden,), "trunk_w2": (hidden, hidden),
                    "trunk_b2": (hidden,), "logits_w": (hidden, num_classes), "logits_b": (num_classes,),
                    "score_w1": (hidden, half), "score_b1": (half,), "score_w2": (half,), "score_b2": (1,)}
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                report_problem("Parameter '{}' has shape {}, expected {}.".format(name, self.tensors[name].shape,
                                                                                 shape))
            if not np.all(np.isfinite(self.tensors[name])):
                report_problem("Parameter '{}' contains non-finite values.".format(name))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def feature_dim(self) -> int:
        return self.tensors["trunk_w1"].shape[0]

    @property
    def hidden(self) -> int:
        return self.tensors["trunk_w1"].shape[1]

    @property
    def num_classes(self) -> int:
        return self.tensors["logits_w"].shape[1]

    def copy(self):
        return EncoderParams({name: value.copy() for name, value in self.tensors.items()})

    def to_dict(self) -> dict:
        return {name: {"shape": list(value.shape), "values": value.reshape(-1).tolist()}
                for name, value in self.tensors.items()}

    @classmethod
    def from_dict(cls, content: dict):
        tensors = dict()
        for name in PARAMETER_NAMES:
            try:
                entry = content[name]
                tensors[name] = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
            except (KeyError, TypeError, ValueError):
                report_problem("Checkpoint tensor '{}' is missing or malformed.".format(name))
        return cls(tensors)


def init_params(feature_dim: int, num_classes: int, hidden: int = DEFAULT_HIDDEN, seed: int = 0) -> EncoderParams:
    """
    Glorot-normal weights and zero biases.
    """
    if hidden < 2 or hidden % 2:
        report_problem("Hidden size must be an even number >= 2, got {}.".format(hidden))
    rng = np.random.default_rng(seed)
    half = hidden // 2

    def glorot(fan_in, fan_out):
        return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / (fan_in + fan_out))

    return EncoderParams({"trunk_w1": glorot(feature_dim, hidden), "trunk_b1": np.zeros(hidden),
                          "trunk_w2": glorot(hidden, hidden), "trunk_b2": np.zeros(hidden),
                          "logits_w": glorot(hidden, num_classes), "logits_b": np.zeros(num_classes),
                          "score_w1": glorot(hidden, half), "score_b1": np.zeros(half),
                          "score_w2": glorot(half, 1).reshape(-1), "score_b2": np.zeros(1)})


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / np.sqrt(2.0))) + x * np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


def _forward_with_cache(params: EncoderParams, features: np.ndarray):
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != params.feature_dim:
        report_problem("Features of shape {} do not match the encoder input dimension {}."
                       .format(features.shape, params.feature_dim))
    cache = {"x": features}
    cache["h1_pre"] = features @ params["trunk_w1"] + params["trunk_b1"]
    cache["h1"] = gelu(cache["h1_pre"])
    cache["h2_pre"] = cache["h1"] @ params["trunk_w2"] + params["trunk_b2"]
    cache["h2"] = gelu(cache["h2_pre"])
    logits = cache["h2"] @ params["logits_w"] + params["logits_b"]
    cache["s_pre"] = cache["h2"] @ params["score_w1"] + params["score_b1"]
    cache["s"] = gelu(cache["s_pre"])
    scores = cache["s"] @ params["score_w2"] + params["score_b2"][0]
    return logits, scores, cache


def encoder_forward(params: EncoderParams, features) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-frame forward pass.
    :param params: encoder parameters
    :param features: n x d features
    :return: (n x K logits, n alpha scores)
    """
    logits, scores, _ = _forward_with_cache(params, features)
    return logits, scores


def encoder_backward(params: EncoderParams, cache: dict, grad_logits: np.ndarray,
                     grad_scores: Optional[np.ndarray]) -> Dict[str, np.ndarray]:
    """
    Parameter gradients given the gradients over the logits and (optionally) the scores.
    """
    grads = dict()
    h2 = cache["h2"]
    grads["logits_w"] = h2.T @ grad_logits
    grads["logits_b"] = grad_logits.sum(axis=0)
    grad_h2 = grad_logits @ params["logits_w"].T
    if grad_scores is None:
        for name in SCORE_HEAD:
            grads[name] = np.zeros_like(params[name])
    else:
        grads["score_w2"] = cache["s"].T @ grad_scores
        grads["score_b2"] = np.array([grad_scores.sum()])
        grad_s_pre = np.outer(grad_scores, params["score_w2"]) * gelu_grad(cache["s_pre"])
        grads["score_w1"] = h2.T @ grad_s_pre
        grads["score_b1"] = grad_s_pre.sum(axis=0)
        grad_h2 = grad_h2 + grad_s_pre @ params["score_w1"].T
    grad_h2_pre = grad_h2 * gelu_grad(cache["h2_pre"])
    grads["trunk_w2"] = cache["h1"].T @ grad_h2_pre
    grads["trunk_b2"] = grad_h2_pre.sum(axis=0)
    grad_h1_pre = (grad_h2_pre @ params["trunk_w2"].T) * gelu_grad(cache["h1_pre"])
    grads["trunk_w1"] = cache["x"].T @ grad_h1_pre
    grads["trunk_b1"] = grad_h1_pre.sum(axis=0)
    return grads


@dataclass
class TrainConfig:
    mode: str = MODE_OTTC
    epochs: int = 50
    freeze_last_epochs: int = 10
    lr: float = 1e-3
    warmup_steps: int = 100
    seed: int = 0
    batch_size: int = 16
    drop_threshold: float = 0.1
    hidden: int = DEFAULT_HIDDEN
    probe_count: int = 4
    monitor_count: int = 200

    def validate(self):
        if self.mode not in TRAINING_MODES:
            report_problem("Unknown training mode '{}', expected one of {}.".format(self.mode, TRAINING_MODES))
        if self.epochs < 1:
            report_problem("Epoch count must be positive, got {}.".format(self.epochs))
        if not 0 <= self.freeze_last_epochs <= self.epochs:
            report_problem("freeze_last_epochs must lie in [0, epochs], got {}.".format(self.freeze_last_epochs))
        if self.lr < 0 or not np.isfinite(self.lr):
            report_problem("Learning rate must be a finite nonnegative value, got {}.".format(self.lr))
        if self.warmup_steps < 0 or self.batch_size < 1:
            report_problem("warmup_steps must be >= 0 and batch_size >= 1.")
        if self.drop_threshold < 0:
            report_problem("Drop threshold must be nonnegative, got {}.".format(self.drop_threshold))
        return self


@dataclass
class TrainingTarget:
    """
    What one utterance is trained against: labels (blank-augmented for the OTTC modes) with their weights, or a
    frame-level path for single-path cross-entropy.
    """
    labels: LabelSequence
    beta: Optional[StrictSimplexWeights] = None
    path: Optional[LabelSequence] = None


@dataclass
class TrainingLog:
    records: List[dict] = field(default_factory=list)
    alpha_snapshots: List[dict] = field(default_factory=list)

    def csv_rows(self) -> List[dict]:
        return [{column: record[column] for column in LOG_COLUMNS} for record in self.records]

    def to_dict(self) -> dict:
        return {"records": self.records, "alpha_snapshots": self.alpha_snapshots}


def forced_paths(ctc_params: EncoderParams, dataset: Sequence[SyntheticUtterance]) -> List[Optional[LabelSequence]]:
    """
    Viterbi forced alignments of a trained CTC encoder, None where the labels do not fit the frames.
    """
    paths = list()
    for utterance in dataset:
        logits, _ = encoder_forward(ctc_params, utterance.features)
        try:
            paths.append(ctc_viterbi(log_softmax(logits, axis=1), utterance.labels))
        except InfeasibleTargetError:
            logging.warning("Skipping forced alignment of '{}': too few frames.".format(utterance.id))
            paths.append(None)
    return paths


def prepare_targets(mode: str, dataset: Sequence[SyntheticUtterance],
                    ctc_params: Optional[EncoderParams] = None) -> List[Optional[TrainingTarget]]:
    """
    Builds the per-utterance training targets of a mode; None marks an utterance the mode cannot use.
    """
    if mode in CTC_CHECKPOINT_MODES:
        if ctc_params is None:
            report_problem("Mode '{}' needs a trained CTC checkpoint.".format(mode))
        targets = list()
        for utterance, path in zip(dataset, forced_paths(ctc_params, dataset)):
            if path is None:
                targets.append(None)
            elif mode == MODE_ORACLE_BETA:
                relabeled, beta = beta_from_forced_alignment(path)
                targets.append(TrainingTarget(relabeled, beta))
            else:
                targets.append(TrainingTarget(utterance.labels, path=path))
        return targets

    targets = list()
    for utterance in dataset:
        if mode == MODE_CTC:
            if required_frames(utterance.labels) > utterance.n_frames:
                logging.warning("Skipping '{}': labels need more than {} frames.".format(utterance.id,
                                                                                         utterance.n_frames))
                targets.append(None)
            else:
                targets.append(TrainingTarget(utterance.labels))
            continue
        augmented = augment_blanks(utterance.labels)
        if len(augmented) > utterance.n_frames:
            logging.warning("Skipping '{}': {} targets for {} frames.".format(utterance.id, len(augmented),
                                                                              utterance.n_frames))
            targets.append(None)
        else:
            targets.append(TrainingTarget(augmented, StrictSimplexWeights.uniform(len(augmented))))
    return targets


def loss_and_output_grads(mode: str, logits: np.ndarray, scores: np.ndarray,
                          target: TrainingTarget) -> Tuple[float, np.ndarray, Optional[np.ndarray]]:
    """
    Loss of one utterance with its gradients over the logits and the scores (None when the mode has no alpha).
    """
    log_posteriors = log_softmax(logits, axis=1)
    posteriors = np.exp(log_posteriors)
    grad_scores = None
    if mode in ALPHA_MODES:
        loss, grad_log, grad_scores = ottc_backward_from_log_posteriors(log_posteriors, target.labels, scores,
                                                                        target.beta)
    elif mode == MODE_FIXED_ALPHA:
        loss, grad_log, _ = ottc_backward_from_log_posteriors(log_posteriors, target.labels,
                                                              np.zeros(logits.shape[0]), target.beta)
    elif mode == MODE_CTC:
        loss, grad_log = ctc_backward(log_posteriors, target.labels)
    else:
        n = logits.shape[0]
        frames = np.arange(n)
        path = np.asarray(target.path.tokens, dtype=np.int64)
        loss = float(-np.mean(log_posteriors[frames, path]))
        grad_log = np.zeros_like(log_posteriors)
        grad_log[frames, path] = -1.0 / n
    return loss, logits_backward(grad_log, posteriors), grad_scores


def model_loss_and_grads(params: EncoderParams, features, target: TrainingTarget,
                         mode: str) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    Loss of one utterance and its gradient with respect to every encoder parameter.
    """
    logits, scores, cache = _forward_with_cache(params, features)
    loss, grad_logits, grad_scores = loss_and_output_grads(mode, logits, scores, target)
    return loss, encoder_backward(params, cache, grad_logits, grad_scores)


def _batch_loss_and_grads(params: EncoderParams, mode: str, utterances: Sequence[SyntheticUtterance],
                          targets: Sequence[TrainingTarget]) -> Tuple[float, Dict[str, np.ndarray]]:
    features = np.concatenate([utterance.features for utterance in utterances])
    logits, scores, cache = _forward_with_cache(params, features)
    grad_logits = np.zeros_like(logits)
    grad_scores = np.zeros_like(scores) if mode in ALPHA_MODES else None
    total = 0.0
    start = 0
    for utterance, target in zip(utterances, targets):
        end = start + utterance.n_frames
        loss, utterance_grad_logits, utterance_grad_scores = loss_and_output_grads(mode, logits[start:end],
                                                                                   scores[start:end], target)
        total += loss
        grad_logits[start:end] = utterance_grad_logits
        if grad_scores is not None:
            grad_scores[start:end] = utterance_grad_scores
        start = end
    count = len(utterances)
    grads = encoder_backward(params, cache, grad_logits / count, None if grad_scores is None else grad_scores / count)
    return total / count, grads


def trainable_names(mode: str, frozen: bool) -> Tuple[str, ...]:
    """
    Parameters updated in an epoch. While frozen, alpha modes keep the trunk and the score head fixed so that
    alpha stays unchanged and only the logits head trains.
    """
    if mode in ALPHA_MODES:
        return LOGITS_HEAD if frozen else PARAMETER_NAMES
    return TRUNK + LOGITS_HEAD


def alpha_of(params: EncoderParams, features) -> SimplexWeights:
    _, scores = encoder_forward(params, features)
    return SimplexWeights(softmax(scores))


def train(config: TrainConfig, dataset: Sequence[SyntheticUtterance], ctc_params: Optional[EncoderParams] = None,
          initial_params: Optional[EncoderParams] = None) -> Tuple[EncoderParams, TrainingLog]:
    """
    Trains the encoder in one of the training modes.
    :param config: training configuration
    :param dataset: training utterances
    :param ctc_params: trained CTC encoder, required by the oracle-beta and single-path-ce modes
    :param initial_params: starting parameters, freshly initialised from the seed when absent
    :return: trained parameters and the training log
    """
    config.validate()
    if not dataset:
        report_problem("Training needs a non-empty dataset.")
    targets = prepare_targets(config.mode, dataset, ctc_params)
    usable = [index for index, target in enumerate(targets) if target is not None]
    if not usable:
        report_problem("No utterance of the dataset can be used in mode '{}'.".format(config.mode))

    rng = np.random.default_rng(config.seed)
    num_classes = dataset[0].labels.num_classes
    params = initial_params.copy() if initial_params is not None else \
        init_params(dataset[0].features.shape[1], num_classes, config.hidden, config.seed)
    batches_per_epoch = -(-len(usable) // config.batch_size)
    optimizer = AdamOptimizer(params.tensors, config.lr, config.warmup_steps, batches_per_epoch * config.epochs)
    monitor = list(dataset[:config.monitor_count])
    probes = list(dataset[:config.probe_count])
    log = TrainingLog()

    for epoch in range(1, config.epochs + 1):
        frozen = epoch > config.epochs - config.freeze_last_epochs
        names = trainable_names(config.mode, frozen)
        order = rng.permutation(len(usable))
        losses = list()
        for batch_start in range(0, len(order), config.batch_size):
            batch = [usable[k] for k in order[batch_start:batch_start + config.batch_size]]
            loss, grads = _batch_loss_and_grads(params, config.mode, [dataset[k] for k in batch],
                                                [targets[k] for k in batch])
            optimizer.step(params.tensors, grads, names)
            losses.append(loss * len(batch))
        report = evaluate(params, monitor, config.mode, config.drop_threshold)
        record = {"epoch": epoch, "loss": float(np.sum(losses) / len(usable)),
                  "ter": report.token_error_rate, "peaky": report.peaky_percent, "f1": report.f1,
                  "idr": report.idr, "dropped_pct": report.dropped_frame_percent}
        log.records.append(record)
        if config.mode in ALPHA_MODES:
            for utterance in probes:
                log.alpha_snapshots.append({"epoch": epoch, "id": utterance.id,
                                            "alpha": alpha_of(params, utterance.features).to_list()})
        logging.info("Epoch {}/{} ({}{}): loss {:.5f} ter {:.4f} peaky {:.2f} idr {:.4f}"
                     .format(epoch, config.epochs, config.mode, ", frozen" if frozen else "", record["loss"],
                             record["ter"], record["peaky"], record["idr"]))
    return params, log


def _decode_kept_frames(posteriors: np.ndarray, kept: np.ndarray) -> Tuple[LabelSequence, Segmentation]:
    labels, segmentation = greedy_decode(posteriors[kept])
    spans = [(span.label, kept[span.start], kept[span.end - 1] + 1) for span in segmentation.spans]
    return labels, Segmentation.of(spans, posteriors.shape[0])


def evaluate(params: EncoderParams, dataset: Sequence[SyntheticUtterance], mode: str = MODE_OTTC,
             drop_threshold: float = 0.1, tolerance_frames: int = DEFAULT_TOLERANCE_FRAMES,
             skip_dropped: bool = False, subtract_silence: bool = False) -> MetricsReport:
    """
    Greedy-decodes every utterance and averages the alignment metrics over utterances.
    :param params: encoder parameters
    :param dataset: utterances with ground-truth segmentations
    :param mode: training mode of the parameters; dropped frames are only reported for modes that learn alpha
    :param drop_threshold: frame i is dropped when alpha_i < drop_threshold / n
    :param tolerance_frames: start-frame tolerance of the boundary F1
    :param skip_dropped: decode without the dropped frames instead of from all posteriors
    :param subtract_silence: subtract the true silence percentage from the peaky percentage
    :return: metrics averaged over utterances
    """
    if not dataset:
        report_problem("Evaluation needs a non-empty dataset.")
    reports = list()
    for utterance in dataset:
        logits, scores = encoder_forward(params, utterance.features)
        posteriors = softmax(logits, axis=1)
        n = utterance.n_frames
        dropped = list()
        if mode in ALPHA_MODES:
            dropped = dropped_frames(softmax(scores), relative_drop_threshold(n, drop_threshold))
        if skip_dropped and dropped:
            kept = np.setdiff1d(np.arange(n), dropped)
            hyp, segmentation = _decode_kept_frames(posteriors, kept) if kept.size else \
                (LabelSequence((), utterance.labels.vocab_size), Segmentation())
        else:
            hyp, segmentation = greedy_decode(posteriors)
        reports.append(utterance_report(np.argmax(posteriors, axis=1), hyp, segmentation, utterance.labels,
                                        utterance.gt_segmentation, {utterance.labels.blank_id},
                                        utterance.silence_fraction if subtract_silence else 0.0,
                                        tolerance_frames, len(dropped)))
    return mean_report(reports)


def save_checkpoint(params: EncoderParams, file_path: str, metadata: Optional[dict] = None):
    """
    Writes the named parameter tensors as a versioned JSON document.
    """
    content = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "metadata": metadata or dict(),
               "tensors": params.to_dict()}
    write_json_file(content, file_path)


def load_checkpoint(file_path: str) -> Tuple[EncoderParams, dict]:
    content = read_json_file(file_path)
    if not isinstance(content, dict) or content.get("format") != CHECKPOINT_FORMAT:
        report_problem("'{}' is not an encoder checkpoint.".format(file_path))
    if content.get("version") != CHECKPOINT_VERSION:
        report_problem("Checkpoint version {} is not supported (expected {})."
                       .format(content.get("version"), CHECKPOINT_VERSION))
    return EncoderParams.from_dict(content.get("tensors", dict())), content.get("metadata", dict())


def freeze_sweep(config: TrainConfig, train_set: Sequence[SyntheticUtterance],
                 test_set: Sequence[SyntheticUtterance], freeze_values: Sequence[int] = (5, 10, 15),
                 ctc_params: Optional[EncoderParams] = None) -> List[dict]:
    """
    Trains once per freeze length with otherwise identical settings and evaluates each run on the test set.
    """
    results = list()
    for freeze_last_epochs in freeze_values:
        run_config = TrainConfig(**{**asdict(config), "freeze_last_epochs": int(freeze_last_epochs)})
        params, _ = train(run_config, train_set, ctc_params)
        report = evaluate(params, test_set, run_config.mode, run_config.drop_threshold)
        results.append({"freeze_last_epochs": int(freeze_last_epochs), **report.to_dict()})
        logging.info("Freeze last {} epochs: ter {:.4f} idr {:.4f}".format(freeze_last_epochs,
                                                                          report.token_error_rate, report.idr))
    return results
