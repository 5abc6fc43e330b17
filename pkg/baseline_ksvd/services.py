"""
K-SVD reference learner.

Single dictionary, OMP coding at a constant limit T0, and an exact rank-1
update of every error slice. Used only as the comparison baseline for the
fast coupled learner; it shares the cycle loop and metrics with it.
"""

import logging
import time
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from datapipe.domain import Dataset, Dictionary
from dict_update.domain import AtomSupport, ErrorSlice
from dict_update.services import AtomReplacer
from learner.domain import LearnConfig, CoupledModel, SCHEDULE_CONSTANT
from learner.services import sparsity_schedule, run_cycles, Clock, CycleObserver
from sparse_coding.domain import SparseCode

logger = logging.getLogger(__name__)

POWER_TOLERANCE = 1e-10
POWER_MAX_ITERATIONS = 1000

AtomUpdate = Optional[Callable[..., Tuple[np.ndarray, np.ndarray]]]


def leading_left_vector(error: np.ndarray, start: np.ndarray) -> np.ndarray:
    """
    Unit leading left singular vector of `error` by power iteration on
    E E^T, starting from `start`.
    """
    gram = error @ error.T
    u = start / np.linalg.norm(start)
    for iteration in range(POWER_MAX_ITERATIONS):
        w = gram @ u
        norm = np.linalg.norm(w)
        if not norm > 0.0:
            # start is orthogonal to the range of E
            return u
        w /= norm
        if np.linalg.norm(w - u) < POWER_TOLERANCE:
            return w
        u = w

    logger.debug(f"Power iteration stopped after {POWER_MAX_ITERATIONS} iterations")
    return u


def ksvd_update_atom(
    error: ErrorSlice,
    support: AtomSupport,
    old_atom: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Best rank-1 factorization of the error slice: d = u1 and gamma = u1^T E
    (= sigma1 v1^T).

    The iteration starts from E g^T so the new atom keeps the orientation of
    the current coefficients. A zero slice keeps `old_atom` with a zero row.
    """
    if support.is_empty:
        raise KsvdError(f"Atom {support.atom_index} has an empty support")
    if error.columns != support.size:
        raise KsvdError(f"Error slice has {error.columns} columns, support has {support.size}")

    matrix = error.matrix
    if not np.any(matrix):
        if old_atom is None:
            raise ZeroErrorSliceError(f"Atom {support.atom_index}: error slice is zero and no atom to keep")
        return np.array(old_atom, dtype=np.float64), np.zeros(support.size)

    start = matrix @ support.values
    if not np.linalg.norm(start) > 0.0:
        start = matrix[:, int(np.argmax(np.linalg.norm(matrix, axis=0)))]

    atom = leading_left_vector(matrix, start)
    return atom, atom @ matrix


def svd_update_atom(
    error: ErrorSlice,
    support: AtomSupport,
    old_atom: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Same contract as ksvd_update_atom through a full LAPACK SVD. Only used
    as a timing comparator.
    """
    if support.is_empty:
        raise KsvdError(f"Atom {support.atom_index} has an empty support")

    matrix = error.matrix
    if not np.any(matrix):
        if old_atom is None:
            raise ZeroErrorSliceError(f"Atom {support.atom_index}: error slice is zero and no atom to keep")
        return np.array(old_atom, dtype=np.float64), np.zeros(support.size)

    u, sigma, vt = np.linalg.svd(matrix, full_matrices=False)
    atom = u[:, 0]
    if atom @ (matrix @ support.values) < 0.0:
        atom = -atom
    return atom, atom @ matrix


def ksvd_sweep(
    datasets: Sequence[Dataset],
    dictionaries: Sequence[Dictionary],
    code: SparseCode,
    update: AtomUpdate = None,
) -> Tuple[Tuple[Dictionary, ...], SparseCode]:
    """
    K-SVD dictionary-update phase over atoms 0..K-1; stored zeros stay stored.
    `update` defaults to the power-iteration step. Unused atoms are replaced
    the same way as in the fast sweep.
    """
    update = update or ksvd_update_atom
    if len(datasets) != 1 or len(dictionaries) != 1:
        raise KsvdError(f"K-SVD learns a single dictionary, got {len(dictionaries)}")
    data, dictionary = datasets[0], dictionaries[0]
    if data.dim != dictionary.dim or dictionary.natoms != code.natoms or data.count != code.count:
        raise KsvdError(
            f"Shapes disagree: data {data.dim}x{data.count}, dictionary "
            f"{dictionary.dim}x{dictionary.natoms}, code {code.natoms}x{code.count}"
        )

    atoms = dictionary.atoms.copy()
    residual = data.signals - code.reconstruct(dictionary.atoms)
    rows = code.rows.copy()
    replacer = AtomReplacer(code.count)

    for t in range(code.natoms):
        start, stop = rows.indptr[t], rows.indptr[t + 1]
        if start == stop:
            atoms[:, t] = replacer.replace([residual], [atoms], t)[0]
            continue

        support = AtomSupport(t, rows.indices[start:stop], rows.data[start:stop])
        omega = support.indices
        error = ErrorSlice(1, t, residual[:, omega] + np.outer(atoms[:, t], support.values))

        atom, row = update(error, support, old_atom=atoms[:, t])
        atoms[:, t] = atom
        rows.data[start:stop] = row
        residual[:, omega] = error.matrix - np.outer(atom, row)

    return (Dictionary(atoms),), SparseCode(rows.tocsc())


def learn_ksvd(
    data: Dataset,
    config: LearnConfig,
    clock: Clock = time.perf_counter,
    on_cycle: Optional[CycleObserver] = None,
) -> CoupledModel:
    """K-SVD with the same initialization and metrics as the fast learner."""
    schedule = sparsity_schedule(config.cycles, config.max_nonzeros, SCHEDULE_CONSTANT)
    logger.info(
        f"K-SVD: K={config.natoms} T0={config.max_nonzeros} eps={config.error_threshold} "
        f"cycles={config.cycles}"
    )
    return run_cycles([data], config, schedule, ksvd_sweep, clock=clock, on_cycle=on_cycle)


class KsvdError(ValueError):
    """Base exception for the K-SVD baseline."""
    pass


class ZeroErrorSliceError(KsvdError):
    """A zero error slice with no previous atom to keep."""
    pass
