"""
Learning configuration, per-cycle metrics and the learned model.
"""

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from datapipe.domain import Dictionary
from sparse_coding.domain import SparseCode

SCHEDULE_GRADUATED = 'graduated'
SCHEDULE_CONSTANT = 'constant'
SCHEDULE_MODES = (SCHEDULE_GRADUATED, SCHEDULE_CONSTANT)


@dataclass(frozen=True)
class LearnConfig:
    """
    Parameters of one learning run. Defaults follow the 8x8-patch setup:
    T0 = 32 (half the patch size), eps = 4, K = 256.
    """
    cycles: int = 32
    max_nonzeros: int = 32
    error_threshold: float = 4.0
    schedule_mode: str = SCHEDULE_GRADUATED
    natoms: int = 256
    seed: int = 0
    record_metrics: bool = True
    workers: Optional[int] = None

    def __post_init__(self):
        if self.cycles < 1:
            raise ConfigurationError(f"cycles must be >= 1, got {self.cycles}")
        if self.max_nonzeros < 1:
            raise ConfigurationError(f"max_nonzeros must be >= 1, got {self.max_nonzeros}")
        if not self.error_threshold >= 0:
            raise ConfigurationError(f"error_threshold must be >= 0, got {self.error_threshold}")
        if self.schedule_mode not in SCHEDULE_MODES:
            raise ConfigurationError(
                f"schedule_mode must be one of {SCHEDULE_MODES}, got {self.schedule_mode!r}"
            )
        if self.natoms < 1:
            raise ConfigurationError(f"natoms must be >= 1, got {self.natoms}")


@dataclass(frozen=True)
class CycleMetrics:
    cycle: int
    wall_time: float
    avg_nonzeros: float
    avg_error: float
    schedule_limit: int


@dataclass(frozen=True, eq=False)
class CoupledModel:
    """
    Dictionaries of every feature space plus the code they share.
    Two dictionaries for coupled learning, one for single learning.
    """
    dictionaries: Tuple[Dictionary, ...]
    code: SparseCode
    metrics: Tuple[CycleMetrics, ...] = field(default_factory=tuple)

    def __post_init__(self):
        dictionaries = tuple(self.dictionaries)
        if not dictionaries:
            raise ConfigurationError("A model needs at least one dictionary")
        natoms = {d.natoms for d in dictionaries} | {self.code.natoms}
        if len(natoms) != 1:
            raise ConfigurationError(f"Dictionaries and code disagree on the atom count: {sorted(natoms)}")
        object.__setattr__(self, 'dictionaries', dictionaries)
        object.__setattr__(self, 'metrics', tuple(self.metrics))

    @property
    def spaces(self) -> int:
        return len(self.dictionaries)

    @property
    def natoms(self) -> int:
        return self.code.natoms

    @property
    def dict1(self) -> Dictionary:
        return self.dictionaries[0]

    @property
    def dict2(self) -> Dictionary:
        if self.spaces < 2:
            raise ConfigurationError("Single-dictionary model has no second dictionary")
        return self.dictionaries[1]

    def dictionary(self, space: int) -> Dictionary:
        """Dictionary of feature space `space`, 1-based."""
        if not 1 <= space <= self.spaces:
            raise ConfigurationError(f"Space {space} out of range [1, {self.spaces}]")
        return self.dictionaries[space - 1]

    def same_as(self, other: 'CoupledModel') -> bool:
        """Bitwise equality on every matrix entry and metric."""
        return (
            self.spaces == other.spaces
            and all(
                a.atoms.shape == b.atoms.shape and np.array_equal(a.atoms, b.atoms)
                for a, b in zip(self.dictionaries, other.dictionaries)
            )
            and self.code.same_as(other.code)
            and self.metrics == other.metrics
        )


@dataclass(frozen=True, eq=False)
class CycleState:
    """What an `on_cycle` observer sees after each learning cycle."""
    metrics: CycleMetrics
    coding_error: float
    coding_code: SparseCode
    code: SparseCode
    dictionaries: Tuple[Dictionary, ...]


class LearningError(ValueError):
    """Base exception for the learner."""
    pass


class ConfigurationError(LearningError):
    """Learning parameters violate their invariants."""
    pass


class ShapeMismatchError(LearningError):
    """Feature spaces disagree on the signal count, or K < dim."""
    pass
