"""
Coupled dictionary learning.

Alternates joint sparse coding of the stacked feature spaces with the fast
dictionary-update sweep, under a per-cycle sparsity limit that grows from
one nonzero to T0 (graduated schedule) or stays at T0 (constant schedule).
"""

import logging
import math
import time
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from datapipe.domain import Dataset, Dictionary, stack_dictionaries, stack_datasets
from datapipe.services import initial_dictionary
from dict_update.services import sweep_spaces
from sparse_coding.domain import SparseCode, CodingLimits
from sparse_coding.services import code_dataset, atom_matrix
from .domain import (
    LearnConfig, CycleMetrics, CoupledModel, CycleState,
    SCHEDULE_CONSTANT, ConfigurationError, ShapeMismatchError,
)

logger = logging.getLogger(__name__)

UpdatePhase = Callable[
    [Sequence[Dataset], Sequence[Dictionary], SparseCode],
    Tuple[Tuple[Dictionary, ...], SparseCode],
]
Clock = Callable[[], float]
CycleObserver = Callable[[CycleState], None]

# Relative slack before an error increase over the update phase is reported
MONOTONICITY_SLACK = 1e-9


def sparsity_schedule(cycles: int, max_nonzeros: int, mode: str = 'graduated') -> List[int]:
    """
    Per-cycle nonzero limits: round-half-up of linspace(1, T0, N), or T0
    repeated in constant mode. A single cycle always uses T0.
    """
    if cycles < 1 or max_nonzeros < 1:
        raise ConfigurationError(f"Need cycles >= 1 and max_nonzeros >= 1 (got {cycles}, {max_nonzeros})")
    if mode == SCHEDULE_CONSTANT or cycles == 1:
        return [max_nonzeros] * cycles
    points = np.linspace(1, max_nonzeros, cycles)
    return [int(math.floor(p + 0.5)) for p in points]


def avg_learning_error(
    data: Dataset,
    dictionary: Union[Dictionary, np.ndarray],
    code: SparseCode,
) -> float:
    """sqrt(sum_i ||x_i - D g_i||^2) / n over the (stacked) dataset."""
    atoms = atom_matrix(dictionary)
    if atoms.shape[0] != data.dim or atoms.shape[1] != code.natoms or data.count != code.count:
        raise ShapeMismatchError(
            f"Cannot evaluate {data.dim}x{data.count} data against "
            f"{atoms.shape[0]}x{atoms.shape[1]} atoms and a {code.natoms}x{code.count} code"
        )
    residual = data.signals - code.reconstruct(atoms)
    return math.sqrt(float(np.sum(residual ** 2))) / data.count


def run_cycles(
    datasets: Sequence[Dataset],
    config: LearnConfig,
    schedule: Sequence[int],
    update_phase: UpdatePhase,
    clock: Clock = time.perf_counter,
    on_cycle: Optional[CycleObserver] = None,
) -> CoupledModel:
    """
    Alternate coding and `update_phase` over `schedule`.

    Shared by the proposed learner and the K-SVD baseline so that both
    produce the same metrics records.
    """
    datasets = list(datasets)
    if not datasets:
        raise ShapeMismatchError("Need at least one dataset")
    counts = {d.count for d in datasets}
    if len(counts) != 1:
        raise ShapeMismatchError(f"Feature spaces disagree on the signal count: {sorted(counts)}")
    widest = max(d.dim for d in datasets)
    if config.natoms < widest:
        raise ShapeMismatchError(f"natoms={config.natoms} is smaller than signal dim {widest}")

    dictionaries = tuple(initial_dictionary(d.dim, config.natoms, config.seed) for d in datasets)

    stacked = stack_datasets(*datasets)
    code = SparseCode.empty(config.natoms, stacked.count)
    metrics: List[CycleMetrics] = []

    for cycle, limit in enumerate(schedule, start=1):
        limits = CodingLimits(limit, config.error_threshold)
        coding_dictionaries = dictionaries

        start = clock()
        coding_code = code_dataset(
            stack_dictionaries(*coding_dictionaries), stacked, limits, workers=config.workers
        )
        coded = clock()
        dictionaries, code = update_phase(datasets, coding_dictionaries, coding_code)
        elapsed = clock() - start
        phases = f"coding={coded - start:.3f}s update={elapsed - (coded - start):.3f}s"

        if not (config.record_metrics or on_cycle is not None):
            logger.info(f"Cycle {cycle}/{len(schedule)}: limit={limit} time={elapsed:.3f}s ({phases})")
            continue

        coding_error = avg_learning_error(stacked, stack_dictionaries(*coding_dictionaries), coding_code)
        avg_error = avg_learning_error(stacked, stack_dictionaries(*dictionaries), code)
        record = CycleMetrics(
            cycle=cycle,
            wall_time=elapsed,
            avg_nonzeros=coding_code.nonzeros / stacked.count,
            avg_error=avg_error,
            schedule_limit=limit,
        )
        if config.record_metrics:
            metrics.append(record)

        if avg_error > coding_error + MONOTONICITY_SLACK * max(1.0, coding_error):
            logger.warning(
                f"Cycle {cycle}: update phase raised avg_error from {coding_error:.12g} to {avg_error:.12g}"
            )
        logger.info(
            f"Cycle {cycle}/{len(schedule)}: limit={limit} avg_nnz={record.avg_nonzeros:.3f} "
            f"avg_error={avg_error:.6f} time={elapsed:.3f}s ({phases})"
        )

        if on_cycle is not None:
            on_cycle(CycleState(
                metrics=record,
                coding_error=coding_error,
                coding_code=coding_code,
                code=code,
                dictionaries=dictionaries,
            ))

    return CoupledModel(dictionaries, code, tuple(metrics))


def learn_joint(
    datasets: Sequence[Dataset],
    config: LearnConfig,
    clock: Clock = time.perf_counter,
    on_cycle: Optional[CycleObserver] = None,
) -> CoupledModel:
    """
    Learn one dictionary per feature space with a shared sparse code.

    The shared row refresh averages d_i^T E_i over the spaces, which is the
    exact least-squares row for unit-norm per-space atoms.
    """
    schedule = sparsity_schedule(config.cycles, config.max_nonzeros, config.schedule_mode)
    logger.info(
        f"Learning {len(datasets)} space(s): K={config.natoms} T0={config.max_nonzeros} "
        f"eps={config.error_threshold} cycles={config.cycles} schedule={config.schedule_mode}"
    )
    return run_cycles(datasets, config, schedule, sweep_spaces, clock=clock, on_cycle=on_cycle)


def learn_coupled(
    data1: Dataset,
    data2: Dataset,
    config: LearnConfig,
    clock: Clock = time.perf_counter,
    on_cycle: Optional[CycleObserver] = None,
) -> CoupledModel:
    """Coupled dictionaries for two feature spaces of the same signals."""
    if data1.count != data2.count:
        raise ShapeMismatchError(f"Signal counts differ: {data1.count} vs {data2.count}")
    return learn_joint([data1, data2], config, clock=clock, on_cycle=on_cycle)


def learn_single(
    data: Dataset,
    config: LearnConfig,
    clock: Clock = time.perf_counter,
    on_cycle: Optional[CycleObserver] = None,
) -> CoupledModel:
    """Same pipeline with a single feature space."""
    return learn_joint([data], config, clock=clock, on_cycle=on_cycle)
