import argparse
import json
import logging
import os
import pathlib
import sys

import numpy as np
from scipy.special import log_softmax, softmax

from otta.ctc_ref import ctc_viterbi, forced_alignment_record
from otta.model import StrictSimplexWeights, VectorSequence
from otta.ot_kernel import compute_coupling
from otta.ottc import alignment_record, augment_blanks, relative_drop_threshold
from otta.sotd import MinimizerConfig, sotd_distance, sotd_oracle
from otta.toy_lab import (LOG_COLUMNS, MODE_CTC, TRAINING_MODES, TrainConfig, encoder_forward, evaluate,
                          freeze_sweep, generate_dataset, load_checkpoint, read_dataset, save_checkpoint, train,
                          write_dataset)
from otta.utils import (InfeasibleTargetError, OttaError, UsageError, read_config, read_json_file, read_jsonl_file,
                        resolve_seed, write_csv_file, write_json_file, write_jsonl_file)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

COST_CHOICES = ["sqeuclid", "euclid", "xent"]

# flags that must have a value once the command line and the configuration file are merged
REQUIRED_FLAGS = {
    "gen": ["vocab", "count", "target_len", "dur", "noise", "silence_prob", "out"],
    "train": ["mode", "data", "epochs", "ckpt_out"],
    "eval": ["ckpt", "data", "report_out"],
    "align": ["alpha", "beta", "out"],
    "sotd": ["x", "y", "out"],
    "export-alignment": ["ckpt", "data", "out"],
    "force-align": ["ckpt", "data", "out"],
    "freeze-sweep": ["data", "test_data", "out"],
}

DEFAULTS = {
    "train": {"lr": 1e-3, "warmup": 100, "batch": 16, "drop_threshold": 0.1, "hidden": 32},
    "eval": {"tolerance_frames": 2, "drop_threshold": 0.1, "skip_dropped": False, "subtract_silence": False},
    "sotd": {"r": 1, "cost": "euclid", "oracle": False, "steps": 500, "restarts": 4},
    "export-alignment": {"drop_threshold": 0.1},
    "freeze-sweep": {"mode": "ottc", "epochs": 50, "freeze_values": "5,10,15", "lr": 1e-3, "warmup": 100,
                     "batch": 16, "drop_threshold": 0.1, "hidden": 32},
}

# freeze epochs used when --freeze-last is not given, capped at the number of epochs
DEFAULT_FREEZE_LAST = 10

OUTPUT_FLAGS = ["out", "ckpt_out", "log_out", "report_out", "snapshots_out"]


class CliArgumentParser(argparse.ArgumentParser):
    """Argument parser exiting with the usage error code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, "{}: error: {}\n".format(self.prog, message))


def main(argv=None) -> int:
    parser = CliArgumentParser(prog="otta", description='Optimal-transport temporal alignment tools.')
    parser.add_argument('--config', action='store', type=pathlib.Path,
                        help="YAML file supplying values for flags not given on the command line.")
    parser.add_argument('--out-dir', action='store', type=pathlib.Path,
                        help="Directory relative output paths are resolved against.")
    parser.add_argument('-v', '--verbose', action='store_true', help="Log progress messages.")
    subparsers = parser.add_subparsers(help='Available actions', dest='action', parser_class=CliArgumentParser)

    create_gen_operation_parser(subparsers)
    create_train_operation_parser(subparsers)
    create_eval_operation_parser(subparsers)
    create_align_operation_parser(subparsers)
    create_sotd_operation_parser(subparsers)
    create_export_alignment_operation_parser(subparsers)
    create_force_align_operation_parser(subparsers)
    create_freeze_sweep_operation_parser(subparsers)

    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_request:
        return exit_request.code if isinstance(exit_request.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    if not args.action:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

    try:
        args = resolve_arguments(args)
        if args.action == "gen":
            run_gen(args)
        elif args.action == "train":
            run_train(args)
        elif args.action == "eval":
            run_eval(args)
        elif args.action == "align":
            run_align(args)
        elif args.action == "sotd":
            run_sotd(args)
        elif args.action == "export-alignment":
            run_export_alignment(args)
        elif args.action == "force-align":
            run_force_align(args)
        elif args.action == "freeze-sweep":
            run_freeze_sweep(args)
    except UsageError as error:
        print("Usage error: {}".format(error), file=sys.stderr)
        return EXIT_USAGE
    except json.JSONDecodeError as error:
        print("Malformed JSON input: {}".format(error), file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as error:
        print("File error: {}".format(error), file=sys.stderr)
        return EXIT_RUNTIME
    except OttaError as error:
        print("Error: {}".format(error), file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, TypeError, KeyError) as error:
        logging.error("Unexpected input content: %r", error)
        print("Invalid input content: {}".format(error), file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def resolve_arguments(args: argparse.Namespace) -> argparse.Namespace:
    """
    Fills unset flags from the configuration file (the section named after the action, then the top level),
    then from the defaults, and checks that every required flag has a value.
    """
    values = vars(args)
    if args.config:
        content = read_config(str(args.config))
        section = content.get(args.action, dict())
        if not isinstance(section, dict):
            raise UsageError("Configuration section '{}' must be a mapping.".format(args.action))
        for source in (section, content):
            for key, value in source.items():
                dest = str(key).replace("-", "_")
                if dest in values and values[dest] is None and not isinstance(value, dict):
                    values[dest] = value
    for dest, value in DEFAULTS.get(args.action, dict()).items():
        if values.get(dest) is None:
            values[dest] = value
    missing = [dest for dest in REQUIRED_FLAGS[args.action] if values.get(dest) is None]
    if missing:
        raise UsageError("Missing required flags for '{}': {}".format(
            args.action, ", ".join("--" + dest.replace("_", "-") for dest in missing)))
    if "seed" in values:
        values["seed"] = resolve_seed(values["seed"])
    for dest in OUTPUT_FLAGS:
        if values.get(dest) is not None:
            values[dest] = _output_path(args.out_dir, values[dest])
    return argparse.Namespace(**values)


def _output_path(out_dir, path) -> str:
    path = pathlib.Path(path)
    if out_dir is not None and not path.is_absolute():
        path = pathlib.Path(out_dir) / path
    if path.parent and not path.parent.exists():
        os.makedirs(path.parent, exist_ok=True)
    return str(path)


def parse_range(value) -> tuple:
    """
    Parses 'MIN:MAX' (or a two-element list from the configuration file).
    """
    if isinstance(value, (list, tuple)) and len(value) == 2:
        parts = value
    else:
        parts = str(value).split(":")
    try:
        low, high = (int(part) for part in parts)
    except ValueError:
        raise UsageError("Expected a range MIN:MAX, got '{}'.".format(value))
    return low, high


def parse_int_list(value) -> list:
    if isinstance(value, (list, tuple)):
        return [int(item) for item in value]
    try:
        return [int(item) for item in str(value).split(",") if item.strip()]
    except ValueError:
        raise UsageError("Expected a comma separated list of integers, got '{}'.".format(value))


def parse_ids(value) -> list:
    if value is None:
        return None
    if isinstance(value, (list, tuple)):
        return [str(item) for item in value]
    return [item.strip() for item in str(value).split(",") if item.strip()]


def _load_dataset(path, ids=None):
    utterances = read_dataset(str(path))
    if not utterances:
        raise UsageError("Dataset '{}' is empty.".format(path))
    if ids is None:
        return utterances
    by_id = {utterance.id: utterance for utterance in utterances}
    unknown = [utterance_id for utterance_id in ids if utterance_id not in by_id]
    if unknown:
        raise UsageError("Unknown utterance ids: {}".format(", ".join(unknown)))
    return [by_id[utterance_id] for utterance_id in ids]


def _train_config(args, mode, epochs, freeze_last) -> TrainConfig:
    return TrainConfig(mode=mode, epochs=int(epochs), freeze_last_epochs=int(freeze_last), lr=float(args.lr),
                       warmup_steps=int(args.warmup), seed=args.seed, batch_size=int(args.batch),
                       drop_threshold=float(args.drop_threshold), hidden=int(args.hidden))


def _ctc_params(args):
    if not args.ctc_ckpt:
        return None
    params, metadata = load_checkpoint(str(args.ctc_ckpt))
    if metadata.get("mode", MODE_CTC) != MODE_CTC:
        logging.warning("Checkpoint '{}' was trained in mode '{}', not ctc.".format(args.ctc_ckpt,
                                                                                   metadata.get("mode")))
    return params


def run_gen(args):
    utterances = generate_dataset(int(args.vocab), int(args.count), parse_range(args.target_len),
                                  parse_range(args.dur), float(args.noise), float(args.silence_prob), args.seed)
    write_dataset(utterances, args.out)
    print("Dataset successfully written at: " + args.out)


def run_train(args):
    if args.mode not in TRAINING_MODES:
        raise UsageError("Unknown mode '{}'.".format(args.mode))
    dataset = _load_dataset(args.data)
    freeze_last = args.freeze_last
    if freeze_last is None:
        freeze_last = min(DEFAULT_FREEZE_LAST, int(args.epochs))
    config = _train_config(args, args.mode, args.epochs, freeze_last)
    params, log = train(config, dataset, _ctc_params(args))
    save_checkpoint(params, args.ckpt_out, {"mode": args.mode, "vocab_size": dataset[0].labels.vocab_size,
                                            "seed": args.seed, "epochs": config.epochs,
                                            "freeze_last_epochs": config.freeze_last_epochs})
    print("Checkpoint successfully written at: " + args.ckpt_out)
    if args.log_out:
        write_csv_file(log.csv_rows(), LOG_COLUMNS, args.log_out)
        print("Training log successfully written at: " + args.log_out)
    if args.snapshots_out:
        write_jsonl_file(log.alpha_snapshots, args.snapshots_out)


def run_eval(args):
    params, metadata = load_checkpoint(str(args.ckpt))
    mode = args.mode or metadata.get("mode", "ottc")
    dataset = _load_dataset(args.data)
    report = evaluate(params, dataset, mode, float(args.drop_threshold), int(args.tolerance_frames),
                      bool(args.skip_dropped), bool(args.subtract_silence))
    write_json_file(report.to_dict(), args.report_out)
    print("Metrics report successfully written at: " + args.report_out)


def _read_weights(path):
    content = read_json_file(str(path))
    if isinstance(content, dict):
        content = content.get("values", content.get("alpha", content.get("beta")))
    if not isinstance(content, list):
        raise UsageError("'{}' must hold a JSON list of weights.".format(path))
    return content


def run_align(args):
    coupling = compute_coupling(_read_weights(args.alpha), StrictSimplexWeights(_read_weights(args.beta)))
    write_json_file(coupling.to_dict(), args.out)
    print("Coupling successfully written at: " + args.out)


def _read_sequences(path):
    sequences = list()
    for index, record in enumerate(read_jsonl_file(str(path))):
        vectors = record.get("vectors", record.get("features")) if isinstance(record, dict) else record
        if vectors is None:
            raise UsageError("Record {} of '{}' has no 'vectors' field.".format(index + 1, path))
        sequences.append(VectorSequence.of(vectors, record.get("id", str(index)) if isinstance(record, dict)
                                           else str(index)))
    return sequences


def run_sotd(args):
    xs, ys = _read_sequences(args.x), _read_sequences(args.y)
    if len(xs) != len(ys):
        raise UsageError("--x has {} sequences but --y has {}.".format(len(xs), len(ys)))
    config = MinimizerConfig(steps=int(args.steps), restarts=int(args.restarts), seed=args.seed)
    records = list()
    for x, y in zip(xs, ys):
        if args.oracle:
            oracle = sotd_oracle(x, y, int(args.r), args.cost)
            record = {"distance": oracle.distance, "assignment": list(oracle.assignment),
                      "alpha_on": "x" if oracle.x_is_long else "y"}
        else:
            record = sotd_distance(x, y, int(args.r), args.cost, minimizer_config=config).to_dict()
        record.update({"x_id": x.id, "y_id": y.id})
        records.append(record)
    write_jsonl_file(records, args.out)
    print("Distances successfully written at: " + args.out)


def run_export_alignment(args):
    params, _ = load_checkpoint(str(args.ckpt))
    records = list()
    for utterance in _load_dataset(args.data, parse_ids(args.ids)):
        logits, scores = encoder_forward(params, utterance.features)
        augmented = augment_blanks(utterance.labels)
        if len(augmented) > utterance.n_frames:
            raise InfeasibleTargetError("Utterance '{}' has fewer frames than targets.".format(utterance.id))
        alpha = softmax(scores)
        coupling = compute_coupling(alpha, StrictSimplexWeights.uniform(len(augmented)))
        threshold = relative_drop_threshold(utterance.n_frames, float(args.drop_threshold))
        records.append(alignment_record(utterance.id, alpha, coupling, np.argmax(logits, axis=1), threshold))
    write_jsonl_file(records, args.out)
    print("Alignments successfully written at: " + args.out)


def run_force_align(args):
    params, _ = load_checkpoint(str(args.ckpt))
    records = list()
    for utterance in _load_dataset(args.data, parse_ids(args.ids)):
        logits, _ = encoder_forward(params, utterance.features)
        path = ctc_viterbi(log_softmax(logits, axis=1), utterance.labels)
        records.append(forced_alignment_record(utterance.id, path))
    write_jsonl_file(records, args.out)
    print("Forced alignments successfully written at: " + args.out)


def run_freeze_sweep(args):
    train_set = _load_dataset(args.data)
    test_set = _load_dataset(args.test_data)
    config = _train_config(args, args.mode, args.epochs, 0)
    results = freeze_sweep(config, train_set, test_set, parse_int_list(args.freeze_values),
                           _ctc_params(args))
    write_json_file(results, args.out)
    print("Freeze sweep successfully written at: " + args.out)


def _add_training_flags(parser):
    parser.add_argument('--lr', action='store', type=float, help="Peak learning rate (default 1e-3).")
    parser.add_argument('--warmup', action='store', type=int, help="Linear warm-up steps (default 100).")
    parser.add_argument('--batch', action='store', type=int, help="Utterances per batch (default 16).")
    parser.add_argument('--seed', action='store', type=int, help="Random seed (default $OTTC_SEED, then 0).")
    parser.add_argument('--hidden', action='store', type=int, help="Encoder hidden size (default 32).")
    parser.add_argument('--drop-threshold', action='store', type=float,
                        help="Frame i counts as dropped when alpha_i < threshold / n (default 0.1).")
    parser.add_argument('--ctc-ckpt', action='store', type=pathlib.Path,
                        help="Trained CTC checkpoint, required by ottc-oracle-beta and single-path-ce.")


def create_gen_operation_parser(subparsers):
    parser_gen = subparsers.add_parser("gen", description="The synthetic dataset generator",
                                       help="Generates synthetic utterances with ground-truth segmentations.")
    parser_gen.add_argument('--vocab', action='store', type=int, help="Vocabulary size (at least 2).")
    parser_gen.add_argument('--count', action='store', type=int, help="Number of utterances.")
    parser_gen.add_argument('--target-len', action='store', help="Labels per utterance as MIN:MAX.")
    parser_gen.add_argument('--dur', action='store', help="Frames per label and per silence run as MIN:MAX.")
    parser_gen.add_argument('--noise', action='store', type=float, help="Feature noise standard deviation.")
    parser_gen.add_argument('--silence-prob', action='store', type=float, help="Silence probability per gap.")
    parser_gen.add_argument('--seed', action='store', type=int, help="Random seed (default $OTTC_SEED, then 0).")
    parser_gen.add_argument('-o', '--out', action='store', help="Output JSON Lines file path.")


def create_train_operation_parser(subparsers):
    parser_train = subparsers.add_parser("train", description="The encoder trainer",
                                         help="Trains the toy encoder with OTTC, CTC or an ablation mode.")
    parser_train.add_argument('--mode', action='store', choices=TRAINING_MODES, help="Training mode.")
    parser_train.add_argument('--data', action='store', type=pathlib.Path, help="Training dataset file path.")
    parser_train.add_argument('--epochs', action='store', type=int, help="Number of epochs.")
    parser_train.add_argument('--freeze-last', action='store', type=int,
                              help="Final epochs during which alpha stays fixed (default 10, capped at --epochs).")
    _add_training_flags(parser_train)
    parser_train.add_argument('--ckpt-out', action='store', help="Checkpoint output file path.")
    parser_train.add_argument('--log-out', action='store', help="Training log CSV output file path.")
    parser_train.add_argument('--snapshots-out', action='store',
                              help="Per-epoch alpha snapshots of probe utterances (JSON Lines).")


def create_eval_operation_parser(subparsers):
    parser_eval = subparsers.add_parser("eval", description="The evaluation parser",
                                        help="Evaluates a checkpoint and writes the metrics report.")
    parser_eval.add_argument('--ckpt', action='store', type=pathlib.Path, help="Checkpoint file path.")
    parser_eval.add_argument('--data', action='store', type=pathlib.Path, help="Evaluation dataset file path.")
    parser_eval.add_argument('--mode', action='store', choices=TRAINING_MODES,
                             help="Training mode of the checkpoint (default: recorded in the checkpoint).")
    parser_eval.add_argument('--tolerance-frames', action='store', type=int,
                             help="Start-frame tolerance of the boundary F1 (default 2).")
    parser_eval.add_argument('--drop-threshold', action='store', type=float,
                             help="Frame i counts as dropped when alpha_i < threshold / n (default 0.1).")
    parser_eval.add_argument('--skip-dropped', action='store_true', default=None,
                             help="Decode without the dropped frames.")
    parser_eval.add_argument('--subtract-silence', action='store_true', default=None,
                             help="Subtract the true silence percentage from the peaky percentage.")
    parser_eval.add_argument('--report-out', action='store', help="Metrics report output file path.")


def create_align_operation_parser(subparsers):
    parser_align = subparsers.add_parser("align", description="The coupling parser",
                                         help="Computes the 1D optimal-transport coupling of two weight vectors.")
    parser_align.add_argument('--alpha', action='store', type=pathlib.Path, help="JSON list of source weights.")
    parser_align.add_argument('--beta', action='store', type=pathlib.Path, help="JSON list of target weights.")
    parser_align.add_argument('-o', '--out', action='store', help="Coupling output file path.")


def create_sotd_operation_parser(subparsers):
    parser_sotd = subparsers.add_parser("sotd", description="The sequence distance parser",
                                        help="Computes the sequence optimal transport distance of paired sequences.")
    parser_sotd.add_argument('--x', action='store', type=pathlib.Path,
                             help="JSON Lines file of sequences ({\"id\", \"vectors\"} records).")
    parser_sotd.add_argument('--y', action='store', type=pathlib.Path, help="JSON Lines file paired line by line.")
    parser_sotd.add_argument('--r', action='store', type=int, help="Order r (default 1).")
    parser_sotd.add_argument('--cost', action='store', choices=COST_CHOICES, help="Ground cost (default euclid).")
    parser_sotd.add_argument('--oracle', action='store_true', default=None,
                             help="Use the exact dynamic programming value instead of the minimizer.")
    parser_sotd.add_argument('--steps', action='store', type=int, help="Minimizer steps per start (default 500).")
    parser_sotd.add_argument('--restarts', action='store', type=int, help="Random minimizer starts (default 4).")
    parser_sotd.add_argument('--seed', action='store', type=int, help="Random seed (default $OTTC_SEED, then 0).")
    parser_sotd.add_argument('-o', '--out', action='store', help="Output JSON Lines file path.")


def create_export_alignment_operation_parser(subparsers):
    parser_export = subparsers.add_parser("export-alignment", description="The alignment exporter parser",
                                          help="Exports per-frame alpha, coupling and argmax for plotting.")
    parser_export.add_argument('--ckpt', action='store', type=pathlib.Path, help="OTTC checkpoint file path.")
    parser_export.add_argument('--data', action='store', type=pathlib.Path, help="Dataset file path.")
    parser_export.add_argument('--ids', action='store', help="Comma separated utterance ids (default: all).")
    parser_export.add_argument('--drop-threshold', action='store', type=float,
                               help="Frame i counts as dropped when alpha_i < threshold / n (default 0.1).")
    parser_export.add_argument('-o', '--out', action='store', help="Output JSON Lines file path.")


def create_force_align_operation_parser(subparsers):
    parser_force = subparsers.add_parser("force-align", description="The forced alignment parser",
                                         help="Exports Viterbi forced alignments of a CTC checkpoint.")
    parser_force.add_argument('--ckpt', action='store', type=pathlib.Path, help="CTC checkpoint file path.")
    parser_force.add_argument('--data', action='store', type=pathlib.Path, help="Dataset file path.")
    parser_force.add_argument('--ids', action='store', help="Comma separated utterance ids (default: all).")
    parser_force.add_argument('-o', '--out', action='store', help="Output JSON Lines file path.")


def create_freeze_sweep_operation_parser(subparsers):
    parser_sweep = subparsers.add_parser("freeze-sweep", description="The freeze sweep parser",
                                         help="Trains once per freeze length and evaluates each run.")
    parser_sweep.add_argument('--mode', action='store', choices=TRAINING_MODES, help="Training mode (default ottc).")
    parser_sweep.add_argument('--data', action='store', type=pathlib.Path, help="Training dataset file path.")
    parser_sweep.add_argument('--test-data', action='store', type=pathlib.Path, help="Test dataset file path.")
    parser_sweep.add_argument('--epochs', action='store', type=int, help="Number of epochs (default 50).")
    parser_sweep.add_argument('--freeze-values', action='store',
                              help="Comma separated freeze lengths (default 5,10,15).")
    _add_training_flags(parser_sweep)
    parser_sweep.add_argument('-o', '--out', action='store', help="Sweep results JSON output file path.")


if __name__ == "__main__":
    sys.exit(main())
