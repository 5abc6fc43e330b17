"""
Joint orthogonal matching pursuit.

Signals of the coupled feature spaces are stacked on top of each other and
coded over the stacked dictionary, so one greedy pass yields the code
shared by both spaces. Least squares on the growing support is solved
through an incrementally updated Cholesky factor of the support Gram
matrix.

Whole datasets are coded block by block: one block runs the pursuit of
many signals in lockstep, so the per-iteration work is a few matrix
products instead of a Python loop over signals.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from django.conf import settings
from django.core.exceptions import ImproperlyConfigured
from scipy import linalg

from datapipe.domain import Dataset, Dictionary
from .domain import SparseCode, CodingLimits

logger = logging.getLogger(__name__)

# Below this best correlation the residual is treated as exhausted
CORRELATION_UNDERFLOW = 1e-12

# Relative floor on the new Cholesky pivot; below it the atom is dependent
# on the current support
DEPENDENCE_TOLERANCE = np.finfo(np.float64).eps

# Signals coded together by one batched pursuit
CODING_BLOCK = 256

AtomMatrix = Union[Dictionary, np.ndarray]


def atom_matrix(dictionary: AtomMatrix) -> np.ndarray:
    """Atoms of a Dictionary, or a raw (possibly stacked) atom matrix."""
    if isinstance(dictionary, Dictionary):
        return dictionary.atoms
    atoms = np.asarray(dictionary, dtype=np.float64)
    if atoms.ndim != 2:
        raise SignalShapeError(f"Atom matrix must be 2-D, got shape {atoms.shape}")
    return atoms


@dataclass
class PursuitStep:
    """Snapshot after one pursuit iteration."""
    selected: List[int]
    coefficients: np.ndarray
    residual: np.ndarray


@dataclass
class PursuitResult:
    """
    Outcome of pursuit on one signal. `selected` and `coefficients` are in
    selection order; `errors` holds the squared residual norm before the
    first and after every iteration.
    """
    selected: List[int]
    coefficients: np.ndarray
    residual: np.ndarray
    errors: List[float]
    stop_reason: str
    steps: List[PursuitStep] = field(default_factory=list)

    def sparse_column(self) -> Tuple[np.ndarray, np.ndarray]:
        """(indices, values) sorted by atom index, exact zeros dropped."""
        indices = np.asarray(self.selected, dtype=np.int64)
        order = np.argsort(indices, kind='stable')
        indices, values = indices[order], self.coefficients[order]
        keep = values != 0.0
        return indices[keep], values[keep]


def _best_match(atoms: np.ndarray, residual: np.ndarray, excluded: np.ndarray) -> Tuple[int, float]:
    correlations = np.abs(atoms.T @ residual)
    correlations[excluded] = -1.0
    # argmax returns the first maximum, i.e. the lowest index on ties
    best = int(np.argmax(correlations))
    if excluded[best]:
        raise AtomsExhaustedError("Every atom is already selected")
    return best, float(correlations[best])


def match_atom(
    dictionary: AtomMatrix,
    residual: np.ndarray,
    excluded: Iterable[int] = (),
) -> int:
    """
    Index of the non-excluded atom with the largest |d^T r|, lowest index
    on ties.
    """
    atoms = atom_matrix(dictionary)
    residual = np.asarray(residual, dtype=np.float64).reshape(-1)
    if residual.shape[0] != atoms.shape[0]:
        raise SignalShapeError(f"Residual length {residual.shape[0]} != dictionary dim {atoms.shape[0]}")

    mask = np.zeros(atoms.shape[1], dtype=bool)
    mask[list(excluded)] = True
    best, _ = _best_match(atoms, residual, mask)
    return best


def solve_ls_on_support(
    dictionary: AtomMatrix,
    signal: np.ndarray,
    support: Sequence[int],
) -> np.ndarray:
    """
    Least-squares coefficients of `signal` over the atoms in `support`,
    in support order.
    """
    atoms = atom_matrix(dictionary)
    signal = np.asarray(signal, dtype=np.float64).reshape(-1)
    support = list(support)
    if len(set(support)) != len(support):
        raise SignalShapeError("Support indices must be distinct")
    if len(support) > atoms.shape[0]:
        raise DegenerateSupportError(
            f"Support of size {len(support)} exceeds signal dim {atoms.shape[0]}"
        )
    if not support:
        return np.empty(0)

    submatrix = atoms[:, support]
    coefficients, _, rank, _ = linalg.lstsq(submatrix, signal)
    if rank < len(support):
        raise DegenerateSupportError(f"Support {support} spans only rank {rank}")
    return coefficients


def omp_path(
    dictionary: AtomMatrix,
    signal: np.ndarray,
    limits: CodingLimits,
    trace: bool = False,
) -> PursuitResult:
    """
    Greedy pursuit on one (joint) signal.

    Iterates match -> least squares -> residual update until the squared
    residual norm is <= limits.error_threshold, the support reaches
    limits.max_nonzeros, the best correlation underflows, or the next atom
    is linearly dependent on the support (the previous iterate is kept).
    """
    atoms = atom_matrix(dictionary)
    x = np.asarray(signal, dtype=np.float64).reshape(-1)
    if x.shape[0] != atoms.shape[0]:
        raise SignalShapeError(f"Signal length {x.shape[0]} != dictionary dim {atoms.shape[0]}")

    natoms = atoms.shape[1]
    capacity = min(limits.max_nonzeros, natoms)

    alpha = atoms.T @ x
    residual = x.copy()
    error = float(residual @ residual)
    errors = [error]
    selected: List[int] = []
    coefficients = np.empty(0)
    excluded = np.zeros(natoms, dtype=bool)
    factor = np.zeros((capacity, capacity))
    steps: List[PursuitStep] = []

    while True:
        if error <= limits.error_threshold:
            stop_reason = 'threshold'
            break
        if len(selected) >= capacity:
            stop_reason = 'limit'
            break

        best, correlation = _best_match(atoms, residual, excluded)
        if correlation < CORRELATION_UNDERFLOW:
            stop_reason = 'underflow'
            break

        atom = atoms[:, best]
        energy = float(atom @ atom)
        active = len(selected)
        if active > 0:
            # Extend the Cholesky factor of the support Gram matrix
            row = linalg.solve_triangular(
                factor[:active, :active],
                atoms[:, selected].T @ atom,
                lower=True,
                check_finite=False,
            )
            pivot = energy - float(row @ row)
            if pivot <= DEPENDENCE_TOLERANCE * energy:
                logger.debug(f"Atom {best} is dependent on support {selected}; stopping")
                stop_reason = 'degenerate'
                break
            factor[active, :active] = row
            factor[active, active] = math.sqrt(pivot)
        else:
            factor[0, 0] = math.sqrt(energy)

        selected.append(best)
        excluded[best] = True
        active += 1

        coefficients = linalg.cho_solve(
            (factor[:active, :active], True),
            alpha[selected],
            check_finite=False,
        )
        residual = x - atoms[:, selected] @ coefficients
        error = float(residual @ residual)
        errors.append(error)

        if trace:
            steps.append(PursuitStep(list(selected), coefficients.copy(), residual.copy()))

    return PursuitResult(
        selected=selected,
        coefficients=coefficients,
        residual=residual,
        errors=errors,
        stop_reason=stop_reason,
        steps=steps,
    )


def omp_joint(
    joint_dict: AtomMatrix,
    joint_signal: np.ndarray,
    limits: CodingLimits,
) -> Tuple[np.ndarray, np.ndarray]:
    """Sparse column (indices, values), sorted by atom index."""
    return omp_path(joint_dict, joint_signal, limits).sparse_column()


def omp_batch(
    joint_dict: AtomMatrix,
    signals: np.ndarray,
    limits: CodingLimits,
) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    Pursuit on the columns of `signals` in lockstep.

    Every column follows the rules of `omp_path` (selection, stop order,
    Cholesky pivot test); the block only shares the matrix products, and
    the support Gram entries come from the precomputed D^T D.
    """
    atoms = atom_matrix(joint_dict)
    signals = np.asarray(signals, dtype=np.float64)
    if signals.ndim != 2 or signals.shape[0] != atoms.shape[0]:
        raise SignalShapeError(f"Signal block {signals.shape} does not match dictionary dim {atoms.shape[0]}")

    natoms, count = atoms.shape[1], signals.shape[1]
    capacity = min(limits.max_nonzeros, natoms)

    gram = atoms.T @ atoms
    alpha = atoms.T @ signals
    residual = signals.copy()
    errors = np.einsum('ij,ij->j', residual, residual)

    selected = np.zeros((count, capacity), dtype=np.int64)
    coefficients = np.zeros((count, capacity))
    factor = np.zeros((count, capacity, capacity))
    excluded = np.zeros((count, natoms), dtype=bool)
    sizes = np.zeros(count, dtype=np.int64)
    active = np.arange(count)

    for step in range(capacity + 1):
        active = active[errors[active] > limits.error_threshold]
        if step == capacity or not active.size:
            break

        correlations = np.abs(atoms.T @ residual[:, active])
        correlations[excluded[active].T] = -1.0
        # argmax returns the first maximum, i.e. the lowest index on ties
        best = np.argmax(correlations, axis=0)
        matched = correlations[best, np.arange(active.size)] >= CORRELATION_UNDERFLOW
        active, best = active[matched], best[matched]
        if not active.size:
            break

        energy = gram[best, best]
        if step == 0:
            factor[active, 0, 0] = np.sqrt(energy)
        else:
            row = _forward_substitute(factor[active, :step, :step], gram[selected[active, :step], best[:, np.newaxis]])
            pivot = energy - np.einsum('ij,ij->i', row, row)
            independent = pivot > DEPENDENCE_TOLERANCE * energy
            active, best = active[independent], best[independent]
            row, pivot = row[independent], pivot[independent]
            if not active.size:
                break
            factor[active, step, :step] = row
            factor[active, step, step] = np.sqrt(pivot)

        size = step + 1
        selected[active, step] = best
        excluded[active, best] = True
        lower = factor[active, :size, :size]
        support = selected[active, :size]
        solution = _back_substitute(lower, _forward_substitute(lower, alpha[support, active[:, np.newaxis]]))
        coefficients[active, :size] = solution
        sizes[active] = size

        residual[:, active] = signals[:, active] - np.einsum('ijk,jk->ij', atoms[:, support], solution)
        errors[active] = np.einsum('ij,ij->j', residual[:, active], residual[:, active])

    columns = []
    for i in range(count):
        indices, values = selected[i, :sizes[i]], coefficients[i, :sizes[i]]
        order = np.argsort(indices, kind='stable')
        indices, values = indices[order], values[order]
        keep = values != 0.0
        columns.append((indices[keep], values[keep]))
    return columns


def _forward_substitute(lower: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve L y = b for a stack of lower-triangular L (count x k x k)."""
    solution = np.empty_like(rhs)
    for i in range(rhs.shape[1]):
        partial = np.einsum('ij,ij->i', lower[:, i, :i], solution[:, :i])
        solution[:, i] = (rhs[:, i] - partial) / lower[:, i, i]
    return solution


def _back_substitute(lower: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve L^T x = b for a stack of lower-triangular L."""
    solution = np.empty_like(rhs)
    for i in reversed(range(rhs.shape[1])):
        partial = np.einsum('ij,ij->i', lower[:, i + 1:, i], solution[:, i + 1:])
        solution[:, i] = (rhs[:, i] - partial) / lower[:, i, i]
    return solution


def default_workers() -> int:
    """SPARSE_CODING_WORKERS, or 1 when Django settings are not configured."""
    try:
        return getattr(settings, 'SPARSE_CODING_WORKERS', 1)
    except ImproperlyConfigured:
        return 1


def code_dataset(
    joint_dict: AtomMatrix,
    joint_data: Dataset,
    limits: CodingLimits,
    workers: Optional[int] = None,
) -> SparseCode:
    """
    Code every column of `joint_data`; column order is preserved.

    Columns are coded in fixed blocks of CODING_BLOCK signals, so the
    result is identical for any worker count.
    """
    atoms = atom_matrix(joint_dict)
    if joint_data.dim != atoms.shape[0]:
        raise SignalShapeError(
            f"Data dim {joint_data.dim} does not match dictionary dim {atoms.shape[0]}"
        )

    if workers is None:
        workers = default_workers()

    signals = joint_data.signals
    starts = range(0, joint_data.count, CODING_BLOCK)

    def code_block(start: int) -> List[Tuple[np.ndarray, np.ndarray]]:
        return omp_batch(atoms, signals[:, start:start + CODING_BLOCK], limits)

    if workers <= 1:
        blocks = [code_block(start) for start in starts]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(code_block, starts))

    return SparseCode.from_columns(atoms.shape[1], [column for block in blocks for column in block])


class SparseCodingError(ValueError):
    """Base exception for sparse coding."""
    pass


class SignalShapeError(SparseCodingError):
    """Signal or support does not fit the dictionary."""
    pass


class AtomsExhaustedError(SparseCodingError):
    """No atom is left to match."""
    pass


class DegenerateSupportError(SparseCodingError):
    """Selected atoms are linearly dependent."""
    pass
