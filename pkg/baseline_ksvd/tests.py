import numpy as np
from numpy.testing import assert_allclose
from django.test import SimpleTestCase

from datapipe.domain import Dataset, Dictionary
from datapipe.services import dct_dictionary
from dict_update.domain import AtomSupport, ErrorSlice
from dict_update.services import update_atom, replacement_atom, residual_matrix
from learner.domain import LearnConfig
from sparse_coding.domain import SparseCode
from .services import (
    leading_left_vector, ksvd_update_atom, svd_update_atom, ksvd_sweep, learn_ksvd,
    KsvdError, ZeroErrorSliceError,
)


def frozen_clock():
    return 0.0


def slice_and_support(matrix, values=None, atom_index=0):
    width = matrix.shape[1]
    if values is None:
        values = np.ones(width)
    return ErrorSlice(1, atom_index, matrix), AtomSupport(atom_index, np.arange(width), values)


def slice_error(error, atom, row):
    return float(np.sum((error.matrix - np.outer(atom, row)) ** 2))


class PowerIterationTests(SimpleTestCase):

    def test_leading_vector_of_diagonal(self):
        matrix = np.diag([3.0, 1.0, 0.5])
        u = leading_left_vector(matrix, np.ones(3))
        assert_allclose(np.abs(u), [1.0, 0.0, 0.0], atol=1e-6)

    def test_start_in_null_space_is_returned(self):
        matrix = np.array([[1.0, 0.0], [0.0, 0.0]])
        u = leading_left_vector(matrix, np.array([0.0, 2.0]))
        assert_allclose(u, [0.0, 1.0])


class KsvdUpdateAtomTests(SimpleTestCase):

    def test_rank_one_slice_is_recovered(self):
        rng = np.random.default_rng(0)
        u = rng.standard_normal(6)
        u /= np.linalg.norm(u)
        w = rng.standard_normal(5)
        error, support = slice_and_support(np.outer(u, w), values=rng.standard_normal(5))

        atom, row = ksvd_update_atom(error, support)

        assert_allclose(np.abs(atom @ u), 1.0, atol=1e-9)
        assert_allclose(np.outer(atom, row), np.outer(u, w), atol=1e-9)

    def test_error_equals_trailing_singular_values(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            matrix = rng.standard_normal((8, 12))
            error, support = slice_and_support(matrix, values=rng.standard_normal(12))
            atom, row = ksvd_update_atom(error, support)

            sigma = np.linalg.svd(matrix, compute_uv=False)
            self.assertAlmostEqual(slice_error(error, atom, row), float(np.sum(sigma[1:] ** 2)), delta=1e-8)
            self.assertAlmostEqual(np.linalg.norm(atom), 1.0, places=12)

    def test_never_worse_than_fast_update(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            matrix = rng.standard_normal((6, 9))
            error, support = slice_and_support(matrix, values=rng.standard_normal(9))

            fast_atom = update_atom(error, support)
            fast_error = slice_error(error, fast_atom, fast_atom @ matrix)
            atom, row = ksvd_update_atom(error, support)
            self.assertLessEqual(slice_error(error, atom, row), fast_error + 1e-9)

    def test_keeps_orientation_of_coefficients(self):
        rng = np.random.default_rng(3)
        matrix = rng.standard_normal((5, 7))
        error, support = slice_and_support(matrix, values=rng.standard_normal(7))
        atom, _ = ksvd_update_atom(error, support)
        self.assertGreaterEqual(atom @ (matrix @ support.values), 0.0)

    def test_zero_slice_keeps_old_atom(self):
        old = np.array([0.6, 0.8])
        error, support = slice_and_support(np.zeros((2, 3)))
        atom, row = ksvd_update_atom(error, support, old_atom=old)
        assert_allclose(atom, old)
        assert_allclose(row, np.zeros(3))

    def test_zero_slice_without_old_atom(self):
        error, support = slice_and_support(np.zeros((2, 3)))
        with self.assertRaises(ZeroErrorSliceError):
            ksvd_update_atom(error, support)

    def test_empty_support(self):
        with self.assertRaises(KsvdError):
            ksvd_update_atom(ErrorSlice(1, 0, np.zeros((2, 0))), AtomSupport(0, np.array([], dtype=np.int64), np.array([])))

    def test_agrees_with_full_svd(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            matrix = rng.standard_normal((6, 10))
            error, support = slice_and_support(matrix, values=rng.standard_normal(10))
            atom, row = ksvd_update_atom(error, support)
            svd_atom, svd_row = svd_update_atom(error, support)
            assert_allclose(np.outer(atom, row), np.outer(svd_atom, svd_row), atol=1e-6)


class KsvdSweepTests(SimpleTestCase):

    def setUp(self):
        rng = np.random.default_rng(5)
        self.data = Dataset(rng.standard_normal((6, 20)))
        self.dictionary = Dictionary.normalized(rng.standard_normal((6, 5)))
        self.code = SparseCode.from_columns(5, [
            (np.sort(rng.choice(4, size=2, replace=False)), rng.standard_normal(2)) for _ in range(20)
        ])

    def test_does_not_increase_error(self):
        before = np.sum(residual_matrix(self.data, self.dictionary, self.code) ** 2)
        (dictionary,), code = ksvd_sweep([self.data], [self.dictionary], self.code)
        after = np.sum(residual_matrix(self.data, dictionary, code) ** 2)
        self.assertLessEqual(after, before + 1e-9)

    def test_preserves_supports(self):
        _, code = ksvd_sweep([self.data], [self.dictionary], self.code)
        for ours, theirs in zip(code.column_supports(), self.code.column_supports()):
            self.assertEqual(list(ours), list(theirs))

    def test_unused_atom_is_replaced(self):
        (dictionary,), _ = ksvd_sweep([self.data], [self.dictionary], self.code)
        # atom 4 never appears in the code
        self.assertFalse(np.allclose(dictionary.atom(4), self.dictionary.atom(4)))
        self.assertAlmostEqual(np.linalg.norm(dictionary.atom(4)), 1.0, places=12)

    def test_unused_atom_sees_residual_after_earlier_updates(self):
        (dictionary,), code = ksvd_sweep([self.data], [self.dictionary], self.code)
        atoms = dictionary.atoms.copy()
        residual = self.data.signals - code.reconstruct(atoms)
        assert_allclose(dictionary.atom(4), replacement_atom(residual, self.dictionary.atom(4)), atol=1e-9)

    def test_svd_comparator_gives_same_sweep(self):
        (power,), power_code = ksvd_sweep([self.data], [self.dictionary], self.code)
        (exact,), exact_code = ksvd_sweep([self.data], [self.dictionary], self.code, update=svd_update_atom)
        assert_allclose(power.atoms, exact.atoms, atol=1e-6)
        assert_allclose(power_code.dense(), exact_code.dense(), atol=1e-6)

    def test_rejects_two_spaces(self):
        with self.assertRaises(KsvdError):
            ksvd_sweep([self.data, self.data], [self.dictionary, self.dictionary], self.code)

    def test_rejects_shape_mismatch(self):
        with self.assertRaises(KsvdError):
            ksvd_sweep([Dataset(np.ones((6, 3)))], [self.dictionary], self.code)


class LearnKsvdTests(SimpleTestCase):

    def test_exact_data_is_reproduced(self):
        rng = np.random.default_rng(6)
        dct = dct_dictionary(16, 16)
        code = SparseCode.from_columns(16, [
            (np.sort(rng.choice(16, size=2, replace=False)), rng.uniform(0.5, 1.5, size=2)) for _ in range(40)
        ])
        data = Dataset(code.reconstruct(dct.atoms))
        config = LearnConfig(cycles=1, max_nonzeros=2, error_threshold=0.0, natoms=16)

        model = learn_ksvd(data, config, clock=frozen_clock)

        self.assertEqual(model.spaces, 1)
        self.assertLess(model.metrics[-1].avg_error, 1e-8)

    def test_constant_limit_and_monotone_cycles(self):
        data = Dataset(np.random.default_rng(7).standard_normal((16, 60)))
        config = LearnConfig(cycles=4, max_nonzeros=3, error_threshold=0.0, natoms=64)
        states = []

        model = learn_ksvd(data, config, on_cycle=states.append)

        self.assertEqual([m.schedule_limit for m in model.metrics], [3, 3, 3, 3])
        for state in states:
            self.assertLessEqual(state.metrics.avg_error, state.coding_error + 1e-9)

    def test_deterministic(self):
        data = Dataset(np.random.default_rng(8).standard_normal((4, 30)))
        config = LearnConfig(cycles=3, max_nonzeros=2, error_threshold=0.0, natoms=16)
        first = learn_ksvd(data, config, clock=frozen_clock)
        self.assertTrue(first.same_as(learn_ksvd(data, config, clock=frozen_clock)))
