"""
Signal containers shared by every stage of the learning pipeline.

Images, datasets and dictionaries are plain numpy-backed value objects.
They validate their invariants on construction and are never mutated in
place by the services; every operation returns a new instance.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

# Unit-norm tolerance for dictionary atoms
ATOM_NORM_TOLERANCE = 1e-9


@dataclass(frozen=True, eq=False)
class Image:
    """
    Grayscale image with intensities in [0, 1].
    `samples` has shape (height, width), row-major.
    """
    samples: np.ndarray

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 2 or samples.size == 0:
            raise InvalidImageError(f"Image samples must be a non-empty 2-D array, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise InvalidImageError("Image samples must be finite")
        if samples.min() < 0.0 or samples.max() > 1.0:
            raise InvalidImageError("Image samples must lie in [0, 1]")
        object.__setattr__(self, 'samples', samples)

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def height(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Column signals of one feature space: `signals` is dim x count.
    `means` holds the per-signal means removed by mean-centering, if any.
    """
    signals: np.ndarray
    means: Optional[np.ndarray] = None

    def __post_init__(self):
        signals = np.asarray(self.signals, dtype=np.float64)
        if signals.ndim != 2 or signals.shape[0] < 1 or signals.shape[1] < 1:
            raise DatasetShapeError(f"Dataset needs a dim x count matrix with dim, count >= 1, got {signals.shape}")
        if not np.all(np.isfinite(signals)):
            raise DatasetShapeError("Dataset signals must be finite")
        object.__setattr__(self, 'signals', signals)

        if self.means is not None:
            means = np.asarray(self.means, dtype=np.float64).reshape(-1)
            if means.shape[0] != signals.shape[1]:
                raise DatasetShapeError(
                    f"Expected {signals.shape[1]} removed means, got {means.shape[0]}"
                )
            object.__setattr__(self, 'means', means)

    @property
    def dim(self) -> int:
        return self.signals.shape[0]

    @property
    def count(self) -> int:
        return self.signals.shape[1]

    def restored(self) -> np.ndarray:
        """Signals with the removed means added back."""
        if self.means is None:
            return self.signals.copy()
        return self.signals + self.means[np.newaxis, :]


@dataclass(frozen=True, eq=False)
class Dictionary:
    """
    Overcomplete dictionary whose columns (atoms) have unit Euclidean norm.
    """
    atoms: np.ndarray

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=np.float64)
        if atoms.ndim != 2 or atoms.shape[0] < 1 or atoms.shape[1] < 1:
            raise DictionaryShapeError(f"Dictionary needs a dim x natoms matrix, got {atoms.shape}")
        if not np.all(np.isfinite(atoms)):
            raise DictionaryShapeError("Dictionary atoms must be finite")
        norms = np.linalg.norm(atoms, axis=0)
        worst = np.max(np.abs(norms - 1.0))
        if worst > ATOM_NORM_TOLERANCE:
            raise DictionaryShapeError(f"Dictionary atoms must have unit norm (worst deviation {worst:.3e})")
        object.__setattr__(self, 'atoms', atoms)

    @property
    def dim(self) -> int:
        return self.atoms.shape[0]

    @property
    def natoms(self) -> int:
        return self.atoms.shape[1]

    def atom(self, t: int) -> np.ndarray:
        return self.atoms[:, t]

    @classmethod
    def normalized(cls, matrix: np.ndarray) -> 'Dictionary':
        """Build a dictionary by scaling every column of `matrix` to unit norm."""
        matrix = np.asarray(matrix, dtype=np.float64)
        norms = np.linalg.norm(matrix, axis=0)
        if np.any(norms == 0.0):
            raise DictionaryShapeError("Cannot normalize a zero column")
        return cls(matrix / norms[np.newaxis, :])


def stack_dictionaries(*dictionaries: Dictionary) -> np.ndarray:
    """Joint dictionary: vertical concatenation of the per-space atoms (not unit norm)."""
    natoms = {d.natoms for d in dictionaries}
    if len(natoms) != 1:
        raise DictionaryShapeError(f"Stacked dictionaries must share the atom count, got {sorted(natoms)}")
    return np.vstack([d.atoms for d in dictionaries])


def stack_datasets(*datasets: Dataset) -> Dataset:
    """Joint dataset: vertical concatenation of the per-space signals."""
    counts = {d.count for d in datasets}
    if len(counts) != 1:
        raise DatasetShapeError(f"Stacked datasets must share the signal count, got {sorted(counts)}")
    return Dataset(np.vstack([d.signals for d in datasets]))


class DataPipeError(ValueError):
    """Base exception for rejected signal inputs."""
    pass


class InvalidImageError(DataPipeError):
    """Image samples are malformed or the file is not a grayscale PGM."""
    pass


class PatchSizeError(DataPipeError):
    """Patch geometry does not fit the image."""
    pass


class DatasetShapeError(DataPipeError):
    """Dataset matrix violates its shape or finiteness invariants."""
    pass


class DictionaryShapeError(DataPipeError):
    """Dictionary matrix violates its shape or unit-norm invariants."""
    pass
