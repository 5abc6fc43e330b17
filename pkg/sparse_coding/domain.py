"""
Sparse code containers.

The shared code matrix is held column-compressed (one column per signal),
which matches how the coding phase produces it. The dictionary-update
phase reads it row-wise through `SparseCode.rows`.
"""

from dataclasses import dataclass
from functools import cached_property
from typing import List, Sequence, Tuple

import numpy as np
from scipy import sparse


@dataclass(frozen=True, eq=False)
class SparseCode:
    """
    natoms x count coefficient matrix with sorted, duplicate-free row
    indices in every column.

    Explicit zeros are allowed: a coefficient refreshed to exactly zero
    during a dictionary sweep stays stored until the next coding phase.
    """
    matrix: sparse.csc_matrix

    def __post_init__(self):
        matrix = sparse.csc_matrix(self.matrix, dtype=np.float64, copy=True)
        matrix.sort_indices()
        if not matrix.has_canonical_format:
            raise InvalidCodeError("Sparse code columns contain duplicate atom indices")
        if not np.all(np.isfinite(matrix.data)):
            raise InvalidCodeError("Sparse code coefficients must be finite")
        object.__setattr__(self, 'matrix', matrix)

    @classmethod
    def from_columns(
        cls,
        natoms: int,
        columns: Sequence[Tuple[np.ndarray, np.ndarray]],
    ) -> 'SparseCode':
        """Build from per-signal (indices, values) pairs, in signal order."""
        lengths = np.fromiter((len(indices) for indices, _ in columns), dtype=np.int64, count=len(columns))
        indptr = np.concatenate(([0], np.cumsum(lengths)))
        if len(columns):
            indices = np.concatenate([np.asarray(ix, dtype=np.int64) for ix, _ in columns])
            values = np.concatenate([np.asarray(vals, dtype=np.float64) for _, vals in columns])
        else:
            indices = np.empty(0, dtype=np.int64)
            values = np.empty(0, dtype=np.float64)
        if indices.size and (indices.min() < 0 or indices.max() >= natoms):
            raise InvalidCodeError(f"Atom index out of range [0, {natoms})")
        return cls(sparse.csc_matrix((values, indices, indptr), shape=(natoms, len(columns))))

    @classmethod
    def empty(cls, natoms: int, count: int) -> 'SparseCode':
        return cls(sparse.csc_matrix((natoms, count), dtype=np.float64))

    @property
    def natoms(self) -> int:
        return self.matrix.shape[0]

    @property
    def count(self) -> int:
        return self.matrix.shape[1]

    @property
    def stored(self) -> int:
        """Stored entries, explicit zeros included."""
        return self.matrix.nnz

    @property
    def nonzeros(self) -> int:
        return int(np.count_nonzero(self.matrix.data))

    def column(self, i: int) -> Tuple[np.ndarray, np.ndarray]:
        start, stop = self.matrix.indptr[i], self.matrix.indptr[i + 1]
        return self.matrix.indices[start:stop], self.matrix.data[start:stop]

    def columns(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        return [self.column(i) for i in range(self.count)]

    def column_supports(self) -> List[np.ndarray]:
        return [self.column(i)[0] for i in range(self.count)]

    @cached_property
    def rows(self) -> sparse.csr_matrix:
        """Row-compressed copy with sorted signal indices per atom."""
        rows = self.matrix.tocsr(copy=True)
        rows.sort_indices()
        return rows

    def reconstruct(self, atoms: np.ndarray) -> np.ndarray:
        """Dense D @ code for a dim x natoms atom matrix."""
        return np.asarray((self.matrix.T @ atoms.T).T)

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def same_as(self, other: 'SparseCode') -> bool:
        """Bitwise equality of structure and stored values."""
        return (
            self.matrix.shape == other.matrix.shape
            and np.array_equal(self.matrix.indptr, other.matrix.indptr)
            and np.array_equal(self.matrix.indices, other.matrix.indices)
            and np.array_equal(self.matrix.data, other.matrix.data)
        )


@dataclass(frozen=True)
class CodingLimits:
    """
    Per-signal stopping rule: at most `max_nonzeros` atoms, or stop once the
    squared joint residual norm is <= `error_threshold`.
    """
    max_nonzeros: int
    error_threshold: float = 0.0

    def __post_init__(self):
        if self.max_nonzeros < 1:
            raise InvalidCodeError(f"max_nonzeros must be >= 1, got {self.max_nonzeros}")
        if not self.error_threshold >= 0:
            raise InvalidCodeError(f"error_threshold must be >= 0, got {self.error_threshold}")


class InvalidCodeError(ValueError):
    """Sparse code or coding limits violate their invariants."""
    pass
