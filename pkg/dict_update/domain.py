from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class AtomSupport:
    """
    Signals using atom `atom_index`: strictly increasing signal indices and
    the matching coefficients of that atom's code row.
    """
    atom_index: int
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        indices = np.asarray(self.indices, dtype=np.int64)
        values = np.asarray(self.values, dtype=np.float64)
        if indices.shape != values.shape or indices.ndim != 1:
            raise ValueError(f"Support indices {indices.shape} and values {values.shape} must be equal-length vectors")
        if indices.size > 1 and np.any(np.diff(indices) <= 0):
            raise ValueError("Support indices must be strictly increasing")
        object.__setattr__(self, 'indices', indices)
        object.__setattr__(self, 'values', values)

    @property
    def size(self) -> int:
        return self.indices.shape[0]

    @property
    def is_empty(self) -> bool:
        return self.indices.shape[0] == 0


@dataclass(frozen=True, eq=False)
class ErrorSlice:
    """
    Residual of one feature space with atom `atom_index` added back,
    restricted to the atom's support: dim x |support|.
    """
    space: int
    atom_index: int
    matrix: np.ndarray

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise ValueError(f"Error slice must be 2-D, got shape {matrix.shape}")
        object.__setattr__(self, 'matrix', matrix)

    @property
    def columns(self) -> int:
        return self.matrix.shape[1]
