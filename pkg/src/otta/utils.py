import csv
import json
import logging
import os
from typing import Iterable, List, Optional

import yaml

SEED_ENV = 'OTTC_SEED'
DEFAULT_SEED = 0


class OttaError(Exception):
    """Base class of all errors raised by otta."""


class ValidationError(OttaError, ValueError):
    """An input violates the preconditions of an operation."""


class InfeasibleTargetError(ValidationError):
    """The target sequence cannot be aligned to the given number of frames."""


class UsageError(OttaError):
    """Command line flags are missing or inconsistent."""


def report_problem(msg: str, error_type=ValidationError):
    """
    Logs the problem and raises an exception.
    :param msg: error message
    :param error_type: exception class to raise
    """
    logging.error(msg)
    raise error_type(msg)


def resolve_seed(seed: Optional[int] = None) -> int:
    """
    Resolves the seed to use: explicit value first, then the OTTC_SEED environment variable.
    :param seed: seed given by the caller, may be None
    :return: seed value
    """
    if seed is not None:
        return int(seed)
    env_seed = os.environ.get(SEED_ENV)
    if env_seed:
        try:
            return int(env_seed)
        except ValueError:
            report_problem("'{}' environment variable is not an integer: {}".format(SEED_ENV, env_seed), UsageError)
    return DEFAULT_SEED


def read_config(config_path: str) -> dict:
    """
    Reads a YAML configuration file and returns it as dictionary.
    Params:
        config_path: path of the configuration file.
    Returns: configuration dictionary (empty if the file is empty)
    """
    with open(config_path, 'r') as config_file:
        content = yaml.safe_load(config_file)
    if content is None:
        return dict()
    if not isinstance(content, dict):
        report_problem("Configuration file '{}' must contain a mapping.".format(config_path), UsageError)
    return content


def read_json_file(file_path: str):
    """
    Reads a JSON document.
    :param file_path: path of the json file
    :return: parsed content
    """
    with open(file_path, 'r') as json_file:
        return json.load(json_file)


def write_json_file(content, file_path: str):
    """
    Writes the given content as a JSON document. Keys are sorted so that identical content produces identical bytes.
    :param content: json serializable content
    :param file_path: output path
    """
    with open(file_path, 'w') as json_file:
        json.dump(content, json_file, indent=2, sort_keys=True)
        json_file.write("\n")


def read_jsonl_file(file_path: str) -> List[dict]:
    """
    Reads a JSON Lines file, one record per non-empty line.
    :param file_path: path of the jsonl file
    :return: list of records
    """
    records = list()
    with open(file_path, 'r') as jsonl_file:
        for line in jsonl_file:
            if line.strip():
                records.append(json.loads(line))
    return records


def write_jsonl_file(records: Iterable[dict], file_path: str):
    """
    Writes records as JSON Lines.
    :param records: json serializable records
    :param file_path: output path
    """
    with open(file_path, 'w') as jsonl_file:
        for record in records:
            jsonl_file.write(json.dumps(record, sort_keys=True))
            jsonl_file.write("\n")


def write_csv_file(rows: Iterable[dict], columns: List[str], file_path: str):
    """
    Writes rows to a CSV file with the given column order.
    :param rows: dictionaries keyed by column name
    :param columns: column names in output order
    :param file_path: output path
    """
    with open(file_path, 'w', newline='') as csv_file:
        writer = csv.DictWriter(csv_file, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({column: row[column] for column in columns})
