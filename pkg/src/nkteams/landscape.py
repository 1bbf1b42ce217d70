"""NK task environment: interdependence matrices and performance landscapes.

Solutions are handled as integer codes in which decision 0 is the most
significant of ``n_decisions`` bits, so ``format(code, "012b")`` reads the
decisions left to right. Every public function also accepts a sequence of
0/1 values in place of a code. Decision and subtask indices are 0-based.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence, Union

import numba
import numpy as np

from .exceptions import EnumerationLimitError, GeometryError, ParameterError

Solution = Union[int, Sequence[int], np.ndarray]

DEFAULT_ENUMERATION_CAP = 24
_CHUNK = 1 << 16


class Pattern(str, enum.Enum):
    DECOMPOSABLE = "decomposable"
    STRUCTURED = "structured"
    UNSTRUCTURED = "unstructured"

    def __str__(self) -> str:
        return self.value


def encode(bits: Sequence[int]) -> int:
    """Pack a sequence of 0/1 decisions into a solution code."""
    code = 0
    for b in bits:
        if b not in (0, 1):
            raise ParameterError(f"decisions must be 0 or 1, got {b!r}")
        code = (code << 1) | int(b)
    return code


def decode(code: int, n_decisions: int) -> tuple[int, ...]:
    return tuple((code >> (n_decisions - 1 - i)) & 1 for i in range(n_decisions))


def as_code(solution: Solution, n_decisions: int) -> int:
    if isinstance(solution, (int, np.integer)):
        code = int(solution)
        if not 0 <= code < (1 << n_decisions):
            raise ParameterError(f"solution code {code} out of range for N={n_decisions}")
        return code
    bits = list(solution)
    if len(bits) != n_decisions:
        raise ParameterError(f"expected {n_decisions} decisions, got {len(bits)}")
    return encode(bits)


@dataclass(frozen=True)
class InterdependenceMatrix:
    """Which contributions (rows) depend on which decisions (columns)."""

    entries: np.ndarray
    pattern: Pattern
    k: int
    subtask_size: int

    def __post_init__(self):
        self.entries.setflags(write=False)

    @property
    def n_decisions(self) -> int:
        return self.entries.shape[0]

    @property
    def n_subtasks(self) -> int:
        return self.n_decisions // self.subtask_size

    def dependencies(self, n: int) -> list[int]:
        """Columns other than ``n`` that contribution ``n`` reads, ascending."""
        return [int(c) for c in np.flatnonzero(self.entries[n]) if c != n]

    @cached_property
    def key_columns(self) -> np.ndarray:
        # own decision first, then the dependencies in ascending column order
        cols = [[n] + self.dependencies(n) for n in range(self.n_decisions)]
        out = np.array(cols, dtype=np.int64)
        out.setflags(write=False)
        return out

    def crosses_subtasks(self) -> bool:
        block = np.arange(self.n_decisions) // self.subtask_size
        rows, cols = np.nonzero(self.entries)
        return bool(np.any(block[rows] != block[cols]))


def build_matrix(
    pattern: Pattern | str,
    n_decisions: int,
    k: int,
    subtask_size: int,
    rng: np.random.Generator | None = None,
) -> InterdependenceMatrix:
    """Build the interdependence matrix for one of the three patterns.

    Decomposable and structured matrices are deterministic. The unstructured
    pattern draws ``k`` distinct off-diagonal columns per row and redraws the
    whole matrix until at least one dependency crosses a subtask boundary.
    """
    pattern = Pattern(pattern)
    if n_decisions < 1 or subtask_size < 1:
        raise ParameterError("n_decisions and subtask_size must be positive")
    if not 0 <= k < n_decisions:
        raise ParameterError(f"k must satisfy 0 <= k < n_decisions, got k={k}, N={n_decisions}")
    if n_decisions % subtask_size:
        raise GeometryError(f"subtask_size {subtask_size} does not divide N={n_decisions}")

    n = n_decisions
    entries = np.zeros((n, n), dtype=bool)
    if pattern is Pattern.DECOMPOSABLE:
        if n % (k + 1):
            raise GeometryError(f"blocks of size K+1={k + 1} do not tile N={n}")
        for start in range(0, n, k + 1):
            entries[start:start + k + 1, start:start + k + 1] = True
    elif pattern is Pattern.STRUCTURED:
        for row in range(n):
            if row <= k:
                entries[row, :k + 1] = True
            else:
                entries[row, :k] = True
                entries[row, row] = True
    else:
        if rng is None:
            raise ParameterError("the unstructured pattern needs a random generator")
        while True:
            entries[:] = False
            for row in range(n):
                others = np.delete(np.arange(n), row)
                entries[row, rng.choice(others, size=k, replace=False)] = True
                entries[row, row] = True
            matrix = InterdependenceMatrix(entries.copy(), pattern, k, subtask_size)
            if matrix.crosses_subtasks() or k == 0:
                return matrix
    return InterdependenceMatrix(entries, pattern, k, subtask_size)


@numba.njit(cache=True)
def _contribution_kernel(key_columns, tables, codes, n, out):
    width = key_columns.shape[1]
    for i in range(codes.shape[0]):
        code = codes[i]
        for row in range(n):
            key = 0
            for j in range(width):
                key = (key << 1) | ((code >> (n - 1 - key_columns[row, j])) & 1)
            out[i, row] = tables[row, key]


def _contributions(matrix: InterdependenceMatrix, tables: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Contribution of every decision for every code, shape ``(len(codes), N)``."""
    out = np.empty((codes.shape[0], matrix.n_decisions))
    _contribution_kernel(matrix.key_columns, tables, codes.astype(np.int64), matrix.n_decisions, out)
    return out


def compute_global_max(
    matrix: InterdependenceMatrix,
    tables: np.ndarray,
    max_decisions: int = DEFAULT_ENUMERATION_CAP,
) -> float:
    """Exact maximum performance over all ``2**N`` solutions."""
    n = matrix.n_decisions
    if n > max_decisions:
        raise EnumerationLimitError(f"N={n} exceeds the enumeration cap of {max_decisions}")
    best = -np.inf
    for start in range(0, 1 << n, _CHUNK):
        codes = np.arange(start, min(start + _CHUNK, 1 << n), dtype=np.int64)
        best = max(best, float(_contributions(matrix, tables, codes).mean(axis=1).max()))
    return best


class Landscape:
    """Contribution tables over an interdependence matrix.

    Instances are immutable. For ``N`` up to the enumeration cap the
    performance of every solution is tabulated once and cached, which is what
    the simulation engine reads from.

    Parameters
    ----------
    matrix : InterdependenceMatrix
    tables : ndarray of shape (N, 2**(K+1))
        Contribution of decision ``n`` for each key. Key bits list the
        decision's own value first (most significant), then the values of its
        dependencies in ascending column order.
    global_max : float, optional
        Computed by exhaustive enumeration when omitted.
    """

    def __init__(self, matrix: InterdependenceMatrix, tables: np.ndarray, global_max: float | None = None):
        tables = np.array(tables, dtype=np.float64)
        expected = (matrix.n_decisions, 1 << (matrix.k + 1))
        if tables.shape != expected:
            raise ParameterError(f"tables must have shape {expected}, got {tables.shape}")
        tables.setflags(write=False)
        self.matrix = matrix
        self.tables = tables
        if global_max is None:
            if matrix.n_decisions > DEFAULT_ENUMERATION_CAP:
                raise EnumerationLimitError(
                    f"N={matrix.n_decisions} exceeds the enumeration cap of {DEFAULT_ENUMERATION_CAP}")
            # same enumeration as compute_global_max, reusing the cached table
            global_max = self.performance_table.max()
        self.global_max = float(global_max)

    @property
    def n_decisions(self) -> int:
        return self.matrix.n_decisions

    @property
    def n_subtasks(self) -> int:
        return self.matrix.n_subtasks

    @property
    def subtask_size(self) -> int:
        return self.matrix.subtask_size

    @cached_property
    def contribution_table(self) -> np.ndarray:
        codes = np.arange(1 << self.n_decisions, dtype=np.int64)
        out = _contributions(self.matrix, self.tables, codes)
        out.setflags(write=False)
        return out

    @cached_property
    def performance_table(self) -> np.ndarray:
        out = self.contribution_table.mean(axis=1)
        out.setflags(write=False)
        return out

    @cached_property
    def subtask_table(self) -> np.ndarray:
        """Mean contribution per subtask, shape ``(2**N, M)``."""
        c = self.contribution_table
        out = c.reshape(c.shape[0], self.n_subtasks, self.subtask_size).mean(axis=2)
        out.setflags(write=False)
        return out

    @cached_property
    def utility_table(self) -> np.ndarray:
        """Agent utility of each solution for each subtask owner, shape ``(2**N, M)``."""
        sub = self.subtask_table
        m = self.n_subtasks
        if m < 2:
            raise ParameterError("utility needs at least two subtasks")
        rest = (sub.sum(axis=1, keepdims=True) - sub) / (m - 1)
        out = np.ascontiguousarray(0.5 * (sub + rest))
        out.setflags(write=False)
        return out

    def to_dict(self) -> dict:
        return {
            "pattern": self.matrix.pattern.value,
            "N": self.n_decisions,
            "K": self.matrix.k,
            "S": self.subtask_size,
            "matrix": ["".join("1" if v else "0" for v in row) for row in self.matrix.entries],
            "tables": self.tables.tolist(),
            "global_max": self.global_max,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, payload: dict) -> "Landscape":
        entries = np.array([[c == "1" for c in row] for row in payload["matrix"]], dtype=bool)
        n = int(payload["N"])
        matrix = InterdependenceMatrix(entries, Pattern(payload["pattern"]), int(payload["K"]),
                                       int(payload.get("S", n)))
        return cls(matrix, np.array(payload["tables"]), payload.get("global_max"))


def generate_landscape(matrix: InterdependenceMatrix, rng: np.random.Generator) -> Landscape:
    """Draw every contribution i.i.d. from U[0, 1) and cache the global optimum."""
    tables = rng.random((matrix.n_decisions, 1 << (matrix.k + 1)))
    return Landscape(matrix, tables)


def contribution(landscape: Landscape, solution: Solution, n: int) -> float:
    if not 0 <= n < landscape.n_decisions:
        raise IndexError(f"decision index {n} out of range")
    bits = decode(as_code(solution, landscape.n_decisions), landscape.n_decisions)
    key = 0
    for col in landscape.matrix.key_columns[n]:
        key = (key << 1) | bits[col]
    return float(landscape.tables[n, key])


def performance(landscape: Landscape, solution: Solution) -> float:
    """Mean of the N contributions."""
    code = as_code(solution, landscape.n_decisions)
    return float(landscape.performance_table[code])


def subtask_performance(landscape: Landscape, solution: Solution, m: int) -> float:
    """Mean contribution over the decisions of subtask ``m``.

    Dependencies on other subtasks are resolved from the full solution.
    """
    if not 0 <= m < landscape.n_subtasks:
        raise IndexError(f"subtask index {m} out of range")
    code = as_code(solution, landscape.n_decisions)
    return float(landscape.subtask_table[code, m])


def count_local_optima(landscape: Landscape) -> int:
    """Number of solutions no single-bit flip improves on (strictly)."""
    perf = landscape.performance_table
    codes = np.arange(perf.shape[0])
    is_opt = np.ones(perf.shape[0], dtype=bool)
    for bit in range(landscape.n_decisions):
        is_opt &= perf >= perf[codes ^ (1 << bit)]
    return int(is_opt.sum())
