"""
Domain types shared by the alignment, distance, loss and metric modules.

Indices of couplings and alignments are 1-based; frame indices of segmentations are 0-based.
"""
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import coo_matrix

from otta.utils import report_problem

SIMPLEX_TOLERANCE = 1e-9
MIN_STRICT_WEIGHT = 1e-12
MARGINAL_TOLERANCE = 1e-12
MAX_SEQUENCE_LENGTH = 100000


def _as_vector(values, name: str) -> np.ndarray:
    try:
        vector = np.array(values, dtype=np.float64)
    except (TypeError, ValueError):
        report_problem("{} must be a flat list of numbers.".format(name))
    if vector.ndim > 1 and vector.size != max(vector.shape):
        report_problem("{} must be a flat list of numbers, got shape {}.".format(name, vector.shape))
    vector = vector.reshape(-1)
    if vector.size == 0:
        report_problem("{} must not be empty.".format(name))
    if not np.all(np.isfinite(vector)):
        report_problem("{} must contain finite values only.".format(name))
    return vector


class SimplexWeights:
    """
    A length-n vector on the probability simplex. Components may be zero.
    """
    name = "simplex weights"

    def __init__(self, values):
        vector = _as_vector(values, self.name)
        if np.any(vector < 0) or np.any(vector > 1):
            report_problem("Every component of the {} must lie in [0, 1].".format(self.name))
        total = math.fsum(vector)
        if abs(total - 1.0) > SIMPLEX_TOLERANCE:
            report_problem("The {} must sum to 1 (got {!r}).".format(self.name, total))
        if total != 1.0:
            vector = vector / total
        self._check_components(vector)
        vector.setflags(write=False)
        self._values = vector

    def _check_components(self, vector: np.ndarray):
        pass

    @property
    def values(self) -> np.ndarray:
        return self._values

    @classmethod
    def uniform(cls, n: int):
        if n < 1:
            report_problem("Length of the {} must be at least 1.".format(cls.name))
        return cls(np.full(n, 1.0 / n))

    def __len__(self):
        return self._values.size

    def __eq__(self, other):
        return isinstance(other, SimplexWeights) and np.array_equal(self._values, other._values)

    def __repr__(self):
        return "{}({})".format(type(self).__name__, self._values.tolist())

    def to_list(self) -> List[float]:
        return self._values.tolist()


class StrictSimplexWeights(SimplexWeights):
    """
    Simplex weights without zero components, every component at least MIN_STRICT_WEIGHT.
    """
    name = "strictly positive simplex weights"

    def _check_components(self, vector: np.ndarray):
        if np.any(vector < MIN_STRICT_WEIGHT):
            report_problem("The {} must not have zero components (minimum {}).".format(self.name, MIN_STRICT_WEIGHT))


def as_simplex(values) -> SimplexWeights:
    return values if isinstance(values, SimplexWeights) else SimplexWeights(values)


def as_strict_simplex(values) -> StrictSimplexWeights:
    if isinstance(values, StrictSimplexWeights):
        return values
    if isinstance(values, SimplexWeights):
        values = values.values
    return StrictSimplexWeights(values)


class SparseCoupling:
    """
    Sparse monotone transport plan between n source bins and m target bins.
    Entries are stored as parallel arrays of 1-based row indices, 1-based column indices and masses,
    sorted by (row, column).
    """

    def __init__(self, n: int, m: int, rows, cols, masses):
        self.n = int(n)
        self.m = int(m)
        self.rows = np.asarray(rows, dtype=np.int64)
        self.cols = np.asarray(cols, dtype=np.int64)
        self.masses = np.asarray(masses, dtype=np.float64)
        if not (self.rows.shape == self.cols.shape == self.masses.shape):
            report_problem("Coupling rows, columns and masses must have the same length.")
        for array in (self.rows, self.cols, self.masses):
            array.setflags(write=False)

    @property
    def entries(self) -> List[Tuple[int, int, float]]:
        return list(zip(self.rows.tolist(), self.cols.tolist(), self.masses.tolist()))

    def __len__(self):
        return self.masses.size

    def __repr__(self):
        return "SparseCoupling(n={}, m={}, entries={})".format(self.n, self.m, self.entries)

    def support(self) -> frozenset:
        return frozenset(zip(self.rows.tolist(), self.cols.tolist()))

    def to_dense(self) -> np.ndarray:
        return self.to_sparse().toarray()

    def to_sparse(self) -> coo_matrix:
        return coo_matrix((self.masses, (self.rows - 1, self.cols - 1)), shape=(self.n, self.m))

    def to_dict(self) -> dict:
        return {"n": self.n, "m": self.m, "entries": [[i, j, mass] for i, j, mass in self.entries]}

    def validate(self, alpha=None, beta=None, tolerance: float = MARGINAL_TOLERANCE):
        """
        Checks the structural invariants: sorted entries, positive masses, staircase support and sparsity.
        Marginals are checked too when alpha and beta are given.
        """
        if np.any(self.masses <= 0):
            report_problem("Coupling masses must be positive.")
        if np.any(self.rows < 1) or np.any(self.rows > self.n) or np.any(self.cols < 1) or np.any(self.cols > self.m):
            report_problem("Coupling indices are out of range.")
        if len(self) > self.n + self.m - 1:
            report_problem("Coupling has more than n + m - 1 entries.")
        keys = self.rows * (self.m + 1) + self.cols
        if np.any(np.diff(keys) <= 0):
            report_problem("Coupling entries must be sorted by (i, j) without duplicates.")
        if not is_staircase(self.support()):
            report_problem("Coupling support is not monotone.")
        if alpha is not None and beta is not None:
            row_sums = np.bincount(self.rows - 1, weights=self.masses, minlength=self.n)
            col_sums = np.bincount(self.cols - 1, weights=self.masses, minlength=self.m)
            if np.max(np.abs(row_sums - np.asarray(alpha))) > tolerance or \
                    np.max(np.abs(col_sums - np.asarray(beta))) > tolerance:
                report_problem("Coupling marginals do not match the given weights.")
        return self


def coupling_from_dict(content: dict) -> SparseCoupling:
    """
    Builds a coupling from its JSON form {"n", "m", "entries": [[i, j, mass], ...]}.
    """
    try:
        entries = sorted((int(i), int(j), float(mass)) for i, j, mass in content["entries"])
        n, m = int(content["n"]), int(content["m"])
    except (KeyError, TypeError, ValueError):
        report_problem("Malformed coupling: expected {\"n\", \"m\", \"entries\": [[i, j, mass], ...]}.")
    rows = [entry[0] for entry in entries]
    cols = [entry[1] for entry in entries]
    masses = [entry[2] for entry in entries]
    return SparseCoupling(n, m, rows, cols, masses)


def is_staircase(pairs: Iterable[Tuple[int, int]]) -> bool:
    """
    True when for distinct pairs (i, j), (k, l): i < k implies j <= l.
    """
    highest_col = None
    previous_row = None
    for i, j in sorted(pairs):
        if i != previous_row:
            # the smallest column of a new row must reach the largest column of the earlier rows
            if highest_col is not None and j < highest_col:
                return False
            previous_row = i
        highest_col = j
    return True


@dataclass(frozen=True)
class MonotonicAlignment:
    """
    Discrete monotonic alignment: a set of 1-based (frame, target) pairs covering every target.
    """
    n: int
    m: int
    pairs: frozenset

    @classmethod
    def from_pairs(cls, n: int, m: int, pairs: Iterable[Tuple[int, int]]):
        return cls(int(n), int(m), frozenset((int(i), int(j)) for i, j in pairs))

    def validate(self):
        if self.n < 1 or self.m < 1:
            report_problem("Alignment lengths must be positive.")
        for i, j in self.pairs:
            if not (1 <= i <= self.n and 1 <= j <= self.m):
                report_problem("Alignment pair ({}, {}) is out of range.".format(i, j))
        covered = {j for _, j in self.pairs}
        missing = sorted(set(range(1, self.m + 1)) - covered)
        if missing:
            report_problem("Target elements {} are not aligned.".format(missing))
        if not is_staircase(self.pairs):
            report_problem("Alignment is not monotonic.")
        return self

    def targets_of(self, i: int) -> List[int]:
        return sorted(j for k, j in self.pairs if k == i)

    def frames_of(self, j: int) -> List[int]:
        return sorted(i for i, k in self.pairs if k == j)


@dataclass(frozen=True)
class VectorSequence:
    """
    An ordered sequence of d-dimensional real vectors.
    """
    vectors: np.ndarray
    id: str = ""

    @classmethod
    def of(cls, vectors, id: str = "", max_length: int = MAX_SEQUENCE_LENGTH):
        try:
            array = np.array(vectors, dtype=np.float64)
        except (TypeError, ValueError):
            report_problem("Sequence '{}' must be a list of numeric vectors of a shared dimension.".format(id))
        if array.ndim == 1:
            array = array.reshape(-1, 1)
        if array.ndim != 2 or array.shape[0] == 0 or array.shape[1] == 0:
            report_problem("Sequence '{}' must be a non-empty list of vectors of a shared dimension.".format(id))
        if array.shape[0] > max_length:
            report_problem("Sequence '{}' is longer than the configured maximum {}.".format(id, max_length))
        if not np.all(np.isfinite(array)):
            report_problem("Sequence '{}' contains non-finite values.".format(id))
        array.setflags(write=False)
        return cls(array, str(id))

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def to_dict(self) -> dict:
        return {"id": self.id, "vectors": self.vectors.tolist()}


class CostKind(Enum):
    SQUARED_EUCLIDEAN = "squared-euclidean"
    EUCLIDEAN = "euclidean"
    CROSS_ENTROPY = "cross-entropy"

    @classmethod
    def from_name(cls, name: str):
        aliases = {"sqeuclid": cls.SQUARED_EUCLIDEAN, "euclid": cls.EUCLIDEAN, "xent": cls.CROSS_ENTROPY}
        if isinstance(name, CostKind):
            return name
        if name in aliases:
            return aliases[name]
        try:
            return cls(name)
        except ValueError:
            report_problem("Unknown cost kind '{}'.".format(name))

    @property
    def is_metric(self) -> bool:
        return self is CostKind.EUCLIDEAN


@dataclass
class SOTDResult:
    distance: float
    alpha_star: SimplexWeights
    coupling: SparseCoupling
    r: int
    converged: bool
    oracle_distance: Optional[float] = None
    x_is_long: bool = True

    def to_dict(self) -> dict:
        result = {"distance": self.distance, "alpha": self.alpha_star.to_list(), "coupling": self.coupling.to_dict(),
                  "r": self.r, "converged": self.converged, "alpha_on": "x" if self.x_is_long else "y"}
        if self.oracle_distance is not None:
            result["oracle_distance"] = self.oracle_distance
        return result


@dataclass(frozen=True)
class LabelSequence:
    """
    Label ids from a vocabulary of size vocab_size; id vocab_size is the blank.
    """
    tokens: Tuple[int, ...]
    vocab_size: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(token) for token in self.tokens))
        if self.vocab_size < 1:
            report_problem("Vocabulary size must be positive.")
        for token in self.tokens:
            if token < 0 or token > self.vocab_size:
                report_problem("Label id {} is outside [0, {}].".format(token, self.vocab_size))

    @property
    def blank_id(self) -> int:
        return self.vocab_size

    @property
    def num_classes(self) -> int:
        return self.vocab_size + 1

    def has_blank(self) -> bool:
        return self.blank_id in self.tokens

    def without_blanks(self):
        return LabelSequence(tuple(token for token in self.tokens if token != self.blank_id), self.vocab_size)

    def __len__(self):
        return len(self.tokens)

    def to_list(self) -> List[int]:
        return list(self.tokens)


class Span(NamedTuple):
    label: int
    start: int
    end: int


@dataclass(frozen=True)
class Segmentation:
    """
    Token spans over frames, start inclusive and end exclusive, 0-based.
    """
    spans: Tuple[Span, ...] = ()

    @classmethod
    def of(cls, spans: Iterable[Sequence[int]], n_frames: Optional[int] = None):
        built = tuple(Span(int(label), int(start), int(end)) for label, start, end in spans)
        previous_end = 0
        for span in built:
            if span.end <= span.start:
                report_problem("Span {} must have end > start.".format(tuple(span)))
            if span.start < previous_end:
                report_problem("Spans must be sorted and non-overlapping.")
            if span.start < 0 or (n_frames is not None and span.end > n_frames):
                report_problem("Span {} is outside the frame range.".format(tuple(span)))
            previous_end = span.end
        return cls(built)

    def __len__(self):
        return len(self.spans)

    @property
    def labels(self) -> List[int]:
        return [span.label for span in self.spans]

    def duration(self) -> int:
        return sum(span.end - span.start for span in self.spans)

    def to_list(self) -> List[List[int]]:
        return [list(span) for span in self.spans]


@dataclass
class MetricsReport:
    peaky_percent: float
    f1: float
    idr: float
    token_error_rate: float
    dropped_frame_percent: float
    counts: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        result = {"peaky_percent": self.peaky_percent, "f1": self.f1, "idr": self.idr,
                  "token_error_rate": self.token_error_rate, "dropped_frame_percent": self.dropped_frame_percent}
        result.update(self.counts)
        return result


def validate_probability_rows(matrix, num_classes: Optional[int] = None, name: str = "posteriors",
                              tolerance: float = 1e-6) -> np.ndarray:
    """
    Validates an n x K matrix of per-frame probabilities.
    """
    array = np.asarray(matrix, dtype=np.float64)
    if array.ndim != 2 or array.shape[0] == 0:
        report_problem("{} must be a non-empty n x K matrix.".format(name))
    if num_classes is not None and array.shape[1] != num_classes:
        report_problem("{} have {} columns, expected {}.".format(name, array.shape[1], num_classes))
    if not np.all(np.isfinite(array)) or np.any(array < 0):
        report_problem("{} must be finite and nonnegative.".format(name))
    if np.max(np.abs(array.sum(axis=1) - 1.0)) > tolerance:
        report_problem("Every row of the {} must sum to 1.".format(name))
    return array
