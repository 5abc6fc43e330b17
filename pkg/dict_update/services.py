"""
Fast dictionary update.

Each atom is refreshed with one rank-1 least-squares step on its error
slice (atom direction E g^T, then unit norm), followed by a least-squares
refresh of the code row shared by all feature spaces. Atoms are visited in
index order and later atoms see earlier updates through the code and the
running residual. Atoms whose code row is empty are replaced, with a guard
against replacements that duplicate atoms already in the dictionary.
"""

import logging
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from datapipe.domain import Dataset, Dictionary
from sparse_coding.domain import SparseCode
from .domain import AtomSupport, ErrorSlice

logger = logging.getLogger(__name__)

StepCallback = Callable[[int, float], None]

# A replacement closer than this |cosine| to another atom counts as a duplicate
DUPLICATE_COHERENCE = 0.99

# Residual means below this share of the largest residual column are rounding noise
MEAN_TOLERANCE = 1e-10


def support_of_row(code: SparseCode, t: int) -> AtomSupport:
    """Signals whose code column stores atom t, with the stored coefficients."""
    if not 0 <= t < code.natoms:
        raise DictionaryUpdateError(f"Atom index {t} out of range [0, {code.natoms})")
    rows = code.rows
    start, stop = rows.indptr[t], rows.indptr[t + 1]
    return AtomSupport(t, rows.indices[start:stop].copy(), rows.data[start:stop].copy())


def residual_matrix(data: Dataset, dictionary: Dictionary, code: SparseCode) -> np.ndarray:
    """X - D @ code, dense."""
    _check_shapes(data, dictionary, code)
    return data.signals - code.reconstruct(dictionary.atoms)


def joint_objective(
    datasets: Sequence[Dataset],
    dictionaries: Sequence[Dictionary],
    code: SparseCode,
) -> float:
    """Sum over feature spaces of ||X_i - D_i @ code||_F^2."""
    return float(sum(
        np.sum(residual_matrix(data, dictionary, code) ** 2)
        for data, dictionary in zip(datasets, dictionaries)
    ))


def error_matrix(
    data: Dataset,
    dictionary: Dictionary,
    code: SparseCode,
    support: AtomSupport,
    space: int = 1,
) -> ErrorSlice:
    """
    Columns of X - sum_{s != t} d_s g_s restricted to the support of atom t.
    """
    _check_shapes(data, dictionary, code)
    if support.is_empty:
        raise DictionaryUpdateError(f"Atom {support.atom_index} has an empty support")

    omega = support.indices
    restricted = SparseCode(code.matrix[:, omega])
    residual = data.signals[:, omega] - restricted.reconstruct(dictionary.atoms)
    atom = dictionary.atom(support.atom_index)
    return ErrorSlice(space, support.atom_index, residual + np.outer(atom, support.values))


def update_atom(error: ErrorSlice, support: AtomSupport) -> np.ndarray:
    """
    Unit-norm least-squares atom for the error slice at fixed coefficients:
    normalize(E g^T). The sign already satisfies d^T E g^T >= 0.
    """
    if support.is_empty:
        raise DictionaryUpdateError(f"Atom {support.atom_index} has an empty support")
    if error.columns != support.size:
        raise DictionaryUpdateError(
            f"Error slice has {error.columns} columns, support has {support.size}"
        )

    direction = error.matrix @ support.values
    norm = np.linalg.norm(direction)
    if not norm > 0.0:
        raise DegenerateAtomError(f"Atom {support.atom_index}: E g^T vanishes")
    return direction / norm


def joint_coefficients(atoms: Sequence[np.ndarray], errors: Sequence[ErrorSlice]) -> np.ndarray:
    """
    Least-squares code row shared by all feature spaces for unit-norm
    per-space atoms: (1 / S) * sum_i d_i^T E_i.
    """
    if len(atoms) != len(errors) or not atoms:
        raise DictionaryUpdateError("Need one atom per error slice")
    widths = {e.columns for e in errors}
    if len(widths) != 1:
        raise DictionaryUpdateError(f"Error slices disagree on support size: {sorted(widths)}")

    total = np.zeros(widths.pop())
    for atom, error in zip(atoms, errors):
        total += atom @ error.matrix
    return total / len(atoms)


def update_joint_coeffs(
    atom1: np.ndarray,
    atom2: np.ndarray,
    error1: ErrorSlice,
    error2: ErrorSlice,
) -> np.ndarray:
    """Shared row for a coupled pair: 1/2 * (d1^T E1 + d2^T E2)."""
    return joint_coefficients([atom1, atom2], [error1, error2])


def replacement_atom(residual: np.ndarray, old_atom: np.ndarray) -> np.ndarray:
    """
    Unit-norm column mean of the residual. Falls back to the residual column
    with the largest norm, then to the old atom. A mean below MEAN_TOLERANCE
    times the largest column norm counts as zero.
    """
    norms = np.linalg.norm(residual, axis=0)
    worst = int(np.argmax(norms))
    mean = residual.mean(axis=1)
    norm = np.linalg.norm(mean)
    if norm > MEAN_TOLERANCE * norms[worst]:
        return mean / norm
    if norms[worst] > 0.0:
        return residual[:, worst] / norms[worst]
    return old_atom.copy()


class AtomReplacer:
    """
    Replacements for the unused rows met during one sweep.

    The rule of `replacement_atom` applies first. When its result would
    duplicate another atom (|cosine| above DUPLICATE_COHERENCE in any
    space), the pair is taken from the residual of the worst represented
    signal instead. Each signal serves at most one row per sweep, so
    consecutive unused rows do not collapse onto the same atom.
    """

    def __init__(self, count: int):
        self.consumed = np.zeros(count, dtype=bool)

    def replace(self, residuals: Sequence[np.ndarray], atoms: Sequence[np.ndarray], t: int) -> List[np.ndarray]:
        old = [space_atoms[:, t].copy() for space_atoms in atoms]
        candidates = [replacement_atom(residual, atom) for residual, atom in zip(residuals, old)]
        if not self._duplicates(atoms, t, candidates):
            return candidates

        energy = sum(np.einsum('ij,ij->j', residual, residual) for residual in residuals)
        energy[self.consumed] = -1.0
        for signal in np.argsort(-energy, kind='stable'):
            if not energy[signal] > 0.0:
                break
            self.consumed[signal] = True
            candidates = [
                _unit_or(residual[:, signal], atom) for residual, atom in zip(residuals, old)
            ]
            if not self._duplicates(atoms, t, candidates):
                logger.debug(f"Atom {t}: replaced from signal {signal}")
                return candidates
        return old

    @staticmethod
    def _duplicates(atoms: Sequence[np.ndarray], t: int, candidates: Sequence[np.ndarray]) -> bool:
        return any(
            duplicates_atom(space_atoms, t, candidate)
            for space_atoms, candidate in zip(atoms, candidates)
        )


def _unit_or(vector: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vector)
    return vector / norm if norm > 0.0 else fallback


def duplicates_atom(atoms: np.ndarray, t: int, candidate: np.ndarray) -> bool:
    """Whether `candidate` is nearly parallel to an atom other than t."""
    correlations = np.abs(atoms.T @ candidate)
    correlations[t] = 0.0
    return bool(np.max(correlations) > DUPLICATE_COHERENCE)


def replace_unused_atom(
    data1: Dataset,
    data2: Dataset,
    dict1: Dictionary,
    dict2: Dictionary,
    code: SparseCode,
    t: int,
) -> Tuple[np.ndarray, np.ndarray]:
    """New atoms for a code row that no signal uses; the row stays empty."""
    if not support_of_row(code, t).is_empty:
        raise DictionaryUpdateError(f"Atom {t} is in use and cannot be replaced")

    return (
        replacement_atom(residual_matrix(data1, dict1, code), dict1.atom(t)),
        replacement_atom(residual_matrix(data2, dict2, code), dict2.atom(t)),
    )


def sweep_spaces(
    datasets: Sequence[Dataset],
    dictionaries: Sequence[Dictionary],
    code: SparseCode,
    on_step: Optional[StepCallback] = None,
) -> Tuple[Tuple[Dictionary, ...], SparseCode]:
    """
    One pass over atoms 0..K-1 for any number of feature spaces sharing
    `code`.

    The support pattern is preserved: coefficients refreshed to exactly
    zero stay stored. Empty rows get their atoms from an AtomReplacer.
    `on_step(t, objective)` receives the joint objective after every atom
    step when given.
    """
    if len(datasets) != len(dictionaries) or not datasets:
        raise DictionaryUpdateError("Need one dictionary per dataset")
    for data, dictionary in zip(datasets, dictionaries):
        _check_shapes(data, dictionary, code)

    atoms = [d.atoms.copy() for d in dictionaries]
    residuals = [
        data.signals - code.reconstruct(dictionary.atoms)
        for data, dictionary in zip(datasets, dictionaries)
    ]
    rows = code.rows.copy()
    replacer = AtomReplacer(code.count)

    for t in range(code.natoms):
        start, stop = rows.indptr[t], rows.indptr[t + 1]

        if start == stop:
            for space, atom in enumerate(replacer.replace(residuals, atoms, t)):
                atoms[space][:, t] = atom
        else:
            support = AtomSupport(t, rows.indices[start:stop], rows.data[start:stop])
            omega = support.indices
            errors = [
                ErrorSlice(space + 1, t, residual[:, omega] + np.outer(atoms[space][:, t], support.values))
                for space, residual in enumerate(residuals)
            ]

            refreshed: List[np.ndarray] = []
            for space, error in enumerate(errors):
                try:
                    refreshed.append(update_atom(error, support))
                except DegenerateAtomError as exc:
                    logger.warning(f"{exc}; replacing atom in space {space + 1}")
                    refreshed.append(replacement_atom(residuals[space], atoms[space][:, t]))

            row = joint_coefficients(refreshed, errors)
            rows.data[start:stop] = row
            for space, (atom, error) in enumerate(zip(refreshed, errors)):
                atoms[space][:, t] = atom
                residuals[space][:, omega] = error.matrix - np.outer(atom, row)

        if on_step is not None:
            on_step(t, float(sum(np.sum(r ** 2) for r in residuals)))

    updated = tuple(Dictionary(a) for a in atoms)
    return updated, SparseCode(rows.tocsc())


def sweep(
    data1: Dataset,
    data2: Dataset,
    dict1: Dictionary,
    dict2: Dictionary,
    code: SparseCode,
    on_step: Optional[StepCallback] = None,
) -> Tuple[Dictionary, Dictionary, SparseCode]:
    """Coupled dictionary-update phase over both feature spaces."""
    (new1, new2), new_code = sweep_spaces([data1, data2], [dict1, dict2], code, on_step=on_step)
    return new1, new2, new_code


def _check_shapes(data: Dataset, dictionary: Dictionary, code: SparseCode) -> None:
    if data.dim != dictionary.dim:
        raise DictionaryUpdateError(f"Data dim {data.dim} != dictionary dim {dictionary.dim}")
    if dictionary.natoms != code.natoms:
        raise DictionaryUpdateError(f"Dictionary has {dictionary.natoms} atoms, code has {code.natoms}")
    if data.count != code.count:
        raise DictionaryUpdateError(f"Data has {data.count} signals, code has {code.count}")


class DictionaryUpdateError(ValueError):
    """Base exception for the dictionary-update phase."""
    pass


class DegenerateAtomError(DictionaryUpdateError):
    """The least-squares atom direction is the zero vector."""
    pass
