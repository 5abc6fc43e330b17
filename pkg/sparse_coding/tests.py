import os
from unittest import mock

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
from scipy import sparse
from django.conf import LazySettings
from django.test import SimpleTestCase, override_settings

from datapipe.domain import Dataset, Dictionary
from datapipe.services import random_dictionary
from .domain import SparseCode, CodingLimits, InvalidCodeError
from .services import (
    match_atom, solve_ls_on_support, omp_path, omp_joint, omp_batch, code_dataset, default_workers,
    CODING_BLOCK,
    SignalShapeError, AtomsExhaustedError, DegenerateSupportError,
)


def greedy_oracle(atoms, signal, steps):
    """Re-scan every atom and re-solve least squares from scratch each step."""
    selected = []
    residual = signal.copy()
    coefficients = np.empty(0)
    for _ in range(steps):
        correlations = np.abs(atoms.T @ residual)
        correlations[selected] = -1.0
        selected.append(int(np.argmax(correlations)))
        coefficients = np.linalg.lstsq(atoms[:, selected], signal, rcond=None)[0]
        residual = signal - atoms[:, selected] @ coefficients
    return selected, coefficients


class SparseCodeTests(SimpleTestCase):

    def test_from_columns_keeps_stored_zeros(self):
        code = SparseCode.from_columns(4, [
            (np.array([0, 3]), np.array([1.0, -2.0])),
            (np.array([], dtype=np.int64), np.array([])),
            (np.array([2]), np.array([0.0])),
        ])
        self.assertEqual((code.natoms, code.count), (4, 3))
        self.assertEqual(code.stored, 3)
        self.assertEqual(code.nonzeros, 2)
        assert_array_equal(code.column(0)[0], [0, 3])

    def test_rejects_out_of_range_index(self):
        with self.assertRaises(InvalidCodeError):
            SparseCode.from_columns(3, [(np.array([3]), np.array([1.0]))])

    def test_rejects_non_finite_values(self):
        with self.assertRaises(InvalidCodeError):
            SparseCode(sparse.csc_matrix(np.array([[np.inf]])))

    def test_reconstruct_matches_dense_product(self):
        rng = np.random.default_rng(0)
        dense = sparse.random(12, 30, density=0.2, random_state=1, format='csc')
        atoms = rng.standard_normal((5, 12))
        code = SparseCode(dense)
        assert_allclose(code.reconstruct(atoms), atoms @ dense.toarray(), atol=1e-12)

    def test_rows_view_is_row_compressed(self):
        code = SparseCode.from_columns(3, [
            (np.array([1]), np.array([2.0])),
            (np.array([0, 1]), np.array([3.0, 4.0])),
        ])
        rows = code.rows
        self.assertEqual(rows.format, 'csr')
        assert_array_equal(rows.indices[rows.indptr[1]:rows.indptr[2]], [0, 1])

    def test_limits_validation(self):
        with self.assertRaises(InvalidCodeError):
            CodingLimits(0)
        with self.assertRaises(InvalidCodeError):
            CodingLimits(2, -1.0)


class MatchAtomTests(SimpleTestCase):

    def setUp(self):
        # atoms 0 and 1 are identical
        self.atoms = np.array([
            [1.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ])

    def test_ties_pick_lowest_index(self):
        self.assertEqual(match_atom(self.atoms, np.array([1.0, 0.0])), 0)

    def test_excluded_atoms_are_skipped(self):
        self.assertEqual(match_atom(self.atoms, np.array([1.0, 0.0]), excluded=[0]), 1)

    def test_all_excluded(self):
        with self.assertRaises(AtomsExhaustedError):
            match_atom(self.atoms, np.array([1.0, 0.0]), excluded=[0, 1, 2])

    def test_residual_length_mismatch(self):
        with self.assertRaises(SignalShapeError):
            match_atom(self.atoms, np.ones(3))


class LeastSquaresTests(SimpleTestCase):

    def test_dependent_support_is_rejected(self):
        atoms = np.array([[1.0, 1.0], [0.0, 0.0]])
        with self.assertRaises(DegenerateSupportError):
            solve_ls_on_support(atoms, np.array([1.0, 0.0]), [0, 1])

    def test_joint_coding_equivalence(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            atoms1 = random_dictionary(6, 12, seed=int(rng.integers(1 << 30))).atoms
            atoms2 = random_dictionary(5, 12, seed=int(rng.integers(1 << 30))).atoms
            x1, x2 = rng.standard_normal(6), rng.standard_normal(5)
            support = list(rng.choice(12, size=3, replace=False))

            stacked = solve_ls_on_support(np.vstack([atoms1, atoms2]), np.concatenate([x1, x2]), support)

            # minimizer of ||x1 - D1 c||^2 + ||x2 - D2 c||^2 from the normal equations
            s1, s2 = atoms1[:, support], atoms2[:, support]
            explicit = np.linalg.solve(s1.T @ s1 + s2.T @ s2, s1.T @ x1 + s2.T @ x2)
            assert_allclose(stacked, explicit, atol=1e-9)


class OmpTests(SimpleTestCase):

    def test_matches_greedy_oracle(self):
        rng = np.random.default_rng(2024)
        limits = CodingLimits(3, 0.0)
        for _ in range(200):
            atoms = Dictionary.normalized(rng.standard_normal((8, 16))).atoms
            signal = rng.standard_normal(8)

            result = omp_path(atoms, signal, limits, trace=True)
            expected_selected, expected_coefficients = greedy_oracle(atoms, signal, 3)

            self.assertEqual(result.selected, expected_selected)
            assert_allclose(result.coefficients, expected_coefficients, atol=1e-9)

            for step in result.steps:
                correlations = atoms[:, step.selected].T @ step.residual
                self.assertTrue(np.all(np.abs(correlations) < 1e-8))

    def test_errors_never_increase(self):
        rng = np.random.default_rng(5)
        atoms = Dictionary.normalized(rng.standard_normal((10, 20))).atoms
        result = omp_path(atoms, rng.standard_normal(10), CodingLimits(6, 0.0))
        self.assertTrue(all(b <= a + 1e-12 for a, b in zip(result.errors, result.errors[1:])))
        self.assertEqual(result.stop_reason, 'limit')

    def test_exact_atom_stops_after_one_step(self):
        atoms = random_dictionary(8, 16, seed=3).atoms
        result = omp_path(atoms, 2.5 * atoms[:, 7], CodingLimits(4, 1e-12))
        self.assertEqual(result.selected, [7])
        assert_allclose(result.coefficients, [2.5], atol=1e-12)
        self.assertEqual(result.stop_reason, 'threshold')

    def test_threshold_stops_immediately(self):
        atoms = random_dictionary(4, 8, seed=0).atoms
        indices, values = omp_joint(atoms, np.full(4, 0.1), CodingLimits(3, 1.0))
        self.assertEqual(len(indices), 0)

    def test_zero_signal(self):
        atoms = random_dictionary(4, 8, seed=0).atoms
        result = omp_path(atoms, np.zeros(4), CodingLimits(3, 0.0))
        self.assertEqual(result.selected, [])
        self.assertEqual(result.stop_reason, 'threshold')

    def test_joint_column_is_sorted(self):
        rng = np.random.default_rng(8)
        atoms = Dictionary.normalized(rng.standard_normal((6, 12))).atoms
        indices, values = omp_joint(atoms, rng.standard_normal(6), CodingLimits(4, 0.0))
        assert_array_equal(indices, np.sort(indices))
        self.assertEqual(len(indices), 4)

    def test_signal_length_mismatch(self):
        with self.assertRaises(SignalShapeError):
            omp_path(np.eye(3), np.ones(4), CodingLimits(1))


class CodeDatasetTests(SimpleTestCase):

    def setUp(self):
        rng = np.random.default_rng(17)
        self.atoms = Dictionary.normalized(rng.standard_normal((12, 24))).atoms
        self.data = Dataset(rng.standard_normal((12, 40)))
        self.limits = CodingLimits(5, 0.5)

    def assert_matches_single_signal_coding(self, code, atoms, data, limits):
        self.assertEqual(code.count, data.count)
        for i in range(data.count):
            indices, values = omp_joint(atoms, data.signals[:, i], limits)
            assert_array_equal(code.column(i)[0], indices)
            assert_allclose(code.column(i)[1], values, atol=1e-10)

    def test_columns_match_single_signal_coding(self):
        code = code_dataset(self.atoms, self.data, self.limits, workers=1)
        self.assert_matches_single_signal_coding(code, self.atoms, self.data, self.limits)
        self.assertLessEqual(max(len(ix) for ix in code.column_supports()), 5)

    def test_more_atoms_allowed_than_dimensions(self):
        rng = np.random.default_rng(18)
        atoms = Dictionary.normalized(rng.standard_normal((4, 10))).atoms
        data = Dataset(rng.standard_normal((4, 15)))
        limits = CodingLimits(7, 0.0)
        code = code_dataset(atoms, data, limits, workers=1)
        self.assert_matches_single_signal_coding(code, atoms, data, limits)
        self.assertTrue(all(len(ix) <= 4 for ix in code.column_supports()))

    def test_blocks_and_workers_do_not_change_result(self):
        rng = np.random.default_rng(19)
        data = Dataset(rng.standard_normal((12, CODING_BLOCK + 45)))
        serial = code_dataset(self.atoms, data, self.limits, workers=1)
        threaded = code_dataset(self.atoms, data, self.limits, workers=4)
        self.assertTrue(serial.same_as(threaded))
        self.assert_matches_single_signal_coding(serial, self.atoms, data, self.limits)

    def test_zero_and_exact_signals(self):
        signals = np.zeros((12, 3))
        signals[:, 1] = 2.0 * self.atoms[:, 5]
        columns = omp_batch(self.atoms, signals, CodingLimits(4, 1e-12))
        self.assertEqual(len(columns[0][0]), 0)
        assert_array_equal(columns[1][0], [5])
        assert_allclose(columns[1][1], [2.0], atol=1e-12)
        self.assertEqual(len(columns[2][0]), 0)

    @override_settings(SPARSE_CODING_WORKERS=3)
    def test_default_workers_come_from_settings(self):
        self.assertEqual(default_workers(), 3)
        code = code_dataset(self.atoms, self.data, self.limits)
        self.assertTrue(code.same_as(code_dataset(self.atoms, self.data, self.limits, workers=1)))

    def test_default_workers_without_django_settings(self):
        environment = {k: v for k, v in os.environ.items() if k != 'DJANGO_SETTINGS_MODULE'}
        with mock.patch.dict(os.environ, environment, clear=True), \
                mock.patch('sparse_coding.services.settings', LazySettings()):
            self.assertEqual(default_workers(), 1)

    def test_dimension_mismatch(self):
        with self.assertRaises(SignalShapeError):
            code_dataset(self.atoms, Dataset(np.ones((5, 3))), self.limits)
        with self.assertRaises(SignalShapeError):
            omp_batch(self.atoms, np.ones((5, 3)), self.limits)
