import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
from django.test import SimpleTestCase

from datapipe.domain import Dataset, Dictionary, stack_datasets, stack_dictionaries
from datapipe.services import random_dictionary
from sparse_coding.domain import SparseCode, CodingLimits
from sparse_coding.services import code_dataset
from .domain import AtomSupport, ErrorSlice
from .services import (
    support_of_row, joint_objective, error_matrix, update_atom,
    joint_coefficients, update_joint_coeffs, replacement_atom, replace_unused_atom, AtomReplacer,
    sweep_spaces, sweep, DictionaryUpdateError, DegenerateAtomError, DUPLICATE_COHERENCE,
)


def unit(vector):
    return vector / np.linalg.norm(vector)


def coupled_problem(seed, dim=6, natoms=4, count=20, nonzeros=2):
    """Random two-space data, dictionaries and a jointly coded shared code."""
    rng = np.random.default_rng(seed)
    data1 = Dataset(rng.standard_normal((dim, count)))
    data2 = Dataset(rng.standard_normal((dim, count)))
    dict1 = random_dictionary(dim, natoms, seed=seed)
    dict2 = random_dictionary(dim, natoms, seed=seed + 1)
    code = code_dataset(
        stack_dictionaries(dict1, dict2), stack_datasets(data1, data2), CodingLimits(nonzeros, 0.0), workers=1
    )
    return data1, data2, dict1, dict2, code


class SupportTests(SimpleTestCase):

    def setUp(self):
        self.code = SparseCode.from_columns(3, [
            (np.array([0, 2]), np.array([1.0, 2.0])),
            (np.array([2]), np.array([3.0])),
            (np.array([0]), np.array([4.0])),
        ])

    def test_support_of_row(self):
        support = support_of_row(self.code, 2)
        assert_array_equal(support.indices, [0, 1])
        assert_array_equal(support.values, [2.0, 3.0])

    def test_empty_row(self):
        self.assertTrue(support_of_row(self.code, 1).is_empty)

    def test_out_of_range(self):
        with self.assertRaises(DictionaryUpdateError):
            support_of_row(self.code, 3)

    def test_support_indices_must_increase(self):
        with self.assertRaises(ValueError):
            AtomSupport(0, np.array([2, 1]), np.array([1.0, 1.0]))


class ErrorMatrixTests(SimpleTestCase):

    def test_matches_dense_computation(self):
        data1, _, dict1, _, code = coupled_problem(seed=1)
        for t in range(code.natoms):
            support = support_of_row(code, t)
            if support.is_empty:
                continue
            dense = code.dense()
            others = dense.copy()
            others[t, :] = 0.0
            expected = (data1.signals - dict1.atoms @ others)[:, support.indices]
            error = error_matrix(data1, dict1, code, support)
            assert_allclose(error.matrix, expected, atol=1e-12)

    def test_empty_support_is_rejected(self):
        data1, _, dict1, _, code = coupled_problem(seed=1)
        with self.assertRaises(DictionaryUpdateError):
            error_matrix(data1, dict1, code, AtomSupport(0, np.array([], dtype=np.int64), np.array([])))


class UpdateAtomTests(SimpleTestCase):

    def test_direction_and_norm(self):
        rng = np.random.default_rng(4)
        support = AtomSupport(0, np.arange(5), rng.standard_normal(5))
        error = ErrorSlice(1, 0, rng.standard_normal((6, 5)))
        atom = update_atom(error, support)
        self.assertAlmostEqual(np.linalg.norm(atom), 1.0, places=12)
        assert_allclose(atom, unit(error.matrix @ support.values), atol=1e-12)
        self.assertGreaterEqual(atom @ error.matrix @ support.values, 0.0)

    def test_vanishing_direction(self):
        support = AtomSupport(0, np.array([0, 1]), np.array([1.0, 1.0]))
        error = ErrorSlice(1, 0, np.array([[1.0, -1.0], [2.0, -2.0]]))
        with self.assertRaises(DegenerateAtomError):
            update_atom(error, support)

    def test_width_mismatch(self):
        support = AtomSupport(0, np.array([0]), np.array([1.0]))
        with self.assertRaises(DictionaryUpdateError):
            update_atom(ErrorSlice(1, 0, np.ones((3, 2))), support)

    def test_single_space_step_is_optimal_at_fixed_pattern(self):
        rng = np.random.default_rng(2718)
        for _ in range(500):
            dim, width = rng.integers(2, 10), rng.integers(1, 12)
            error = rng.standard_normal((dim, width))
            old_atom = unit(rng.standard_normal(dim))
            support = AtomSupport(0, np.arange(width), rng.standard_normal(width))
            before = np.linalg.norm(error - np.outer(old_atom, support.values))

            atom = update_atom(ErrorSlice(1, 0, error), support)
            row = joint_coefficients([atom], [ErrorSlice(1, 0, error)])
            after = np.linalg.norm(error - np.outer(atom, row))

            singular = np.linalg.svd(error, compute_uv=False)
            optimum = np.sqrt(np.sum(singular[1:] ** 2))

            self.assertLessEqual(after, before + 1e-10)
            self.assertGreaterEqual(after - optimum, -1e-10)

    def test_coupled_step_never_increases_error(self):
        rng = np.random.default_rng(31)
        for _ in range(200):
            width = rng.integers(1, 10)
            e1, e2 = rng.standard_normal((5, width)), rng.standard_normal((7, width))
            d1, d2 = unit(rng.standard_normal(5)), unit(rng.standard_normal(7))
            support = AtomSupport(0, np.arange(width), rng.standard_normal(width))
            before = (
                np.linalg.norm(e1 - np.outer(d1, support.values)) ** 2
                + np.linalg.norm(e2 - np.outer(d2, support.values)) ** 2
            )

            slice1, slice2 = ErrorSlice(1, 0, e1), ErrorSlice(2, 0, e2)
            new1, new2 = update_atom(slice1, support), update_atom(slice2, support)
            row = update_joint_coeffs(new1, new2, slice1, slice2)
            after = np.linalg.norm(e1 - np.outer(new1, row)) ** 2 + np.linalg.norm(e2 - np.outer(new2, row)) ** 2

            self.assertLessEqual(after, before + 1e-10)


class JointCoefficientTests(SimpleTestCase):

    def test_half_factor_reduces_to_single_space(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            atom = unit(rng.standard_normal(6))
            error = ErrorSlice(1, 0, rng.standard_normal((6, 8)))
            coupled = update_joint_coeffs(atom, atom, error, error)
            assert_allclose(coupled, atom @ error.matrix, atol=1e-12)

    def test_is_least_squares_row(self):
        rng = np.random.default_rng(13)
        d1, d2 = unit(rng.standard_normal(4)), unit(rng.standard_normal(3))
        e1, e2 = rng.standard_normal((4, 6)), rng.standard_normal((3, 6))
        row = update_joint_coeffs(d1, d2, ErrorSlice(1, 0, e1), ErrorSlice(2, 0, e2))

        stacked_atom = np.concatenate([d1, d2])
        stacked_error = np.vstack([e1, e2])
        expected = np.linalg.lstsq(stacked_atom[:, np.newaxis], stacked_error, rcond=None)[0][0]
        assert_allclose(row, expected, atol=1e-12)

    def test_width_mismatch(self):
        with self.assertRaises(DictionaryUpdateError):
            joint_coefficients([np.ones(2), np.ones(2)], [ErrorSlice(1, 0, np.ones((2, 3))), ErrorSlice(2, 0, np.ones((2, 4)))])


class ReplacementTests(SimpleTestCase):

    def test_uses_column_mean(self):
        residual = np.array([[1.0, 3.0], [0.0, 0.0]])
        assert_allclose(replacement_atom(residual, np.array([0.0, 1.0])), [1.0, 0.0])

    def test_falls_back_to_largest_column(self):
        cancelling = np.array([[2.0, -2.0], [0.0, 0.0]])
        assert_allclose(replacement_atom(cancelling, np.array([0.0, 1.0])), [1.0, 0.0])

    def test_zero_residual_keeps_old_atom(self):
        old = np.array([0.6, 0.8])
        assert_array_equal(replacement_atom(np.zeros((2, 3)), old), old)

    def test_rounding_level_mean_counts_as_zero(self):
        residual = np.array([[3.0, -3.0 + 1e-15], [0.0, 0.0]])
        assert_allclose(replacement_atom(residual, np.array([0.0, 1.0])), [1.0, 0.0])

    def test_replacer_skips_duplicates_of_the_mean(self):
        residual = np.diag([4.0, 2.0, 1.0])
        atoms = np.column_stack([
            np.eye(3),
            np.ones((3, 1)) / np.sqrt(3.0),
            np.array([[1.0], [-1.0], [0.0]]) / np.sqrt(2.0),
        ])
        old = atoms[:, 4].copy()
        replacer = AtomReplacer(3)

        atoms[:, 3] = replacer.replace([residual], [atoms], 3)[0]
        assert_allclose(atoms[:, 3], np.array([4.0, 2.0, 1.0]) / np.sqrt(21.0))
        self.assertFalse(replacer.consumed.any())

        # every residual column repeats a unit vector already in the dictionary
        atoms[:, 4] = replacer.replace([residual], [atoms], 4)[0]
        assert_array_equal(atoms[:, 4], old)
        self.assertTrue(replacer.consumed.all())

    def test_replacer_takes_same_signal_in_every_space(self):
        residual1 = np.array([[1.0, 1.0], [1.0, -1.0]])
        residual2 = np.array([[3.0, 0.0], [0.0, 1.0]])
        atoms1 = np.array([[1.0, 0.6], [0.0, 0.8]])
        atoms2 = np.array([[0.0, 0.6], [1.0, 0.8]])
        replacer = AtomReplacer(2)

        new1, new2 = replacer.replace([residual1, residual2], [atoms1, atoms2], 1)
        assert_allclose(new1, np.array([1.0, 1.0]) / np.sqrt(2.0))
        assert_allclose(new2, [1.0, 0.0])
        assert_array_equal(replacer.consumed, [True, False])

    def test_replace_unused_atom_requires_empty_row(self):
        data1, data2, dict1, dict2, code = coupled_problem(seed=5)
        used = int(code.column(0)[0][0])
        with self.assertRaises(DictionaryUpdateError):
            replace_unused_atom(data1, data2, dict1, dict2, code, used)

    def test_replace_unused_atom(self):
        rng = np.random.default_rng(6)
        data1 = Dataset(rng.standard_normal((3, 5)) + 1.0)
        data2 = Dataset(rng.standard_normal((4, 5)) - 1.0)
        code = SparseCode.empty(4, 5)
        atom1, atom2 = replace_unused_atom(
            data1, data2, random_dictionary(3, 4, seed=0), random_dictionary(4, 4, seed=1), code, 2
        )
        assert_allclose(atom1, unit(data1.signals.mean(axis=1)), atol=1e-12)
        assert_allclose(atom2, unit(data2.signals.mean(axis=1)), atol=1e-12)


class SweepTests(SimpleTestCase):

    def test_objective_never_increases(self):
        for seed in range(100):
            data1, data2, dict1, dict2, code = coupled_problem(seed=seed)
            objectives = [joint_objective([data1, data2], [dict1, dict2], code)]
            sweep(data1, data2, dict1, dict2, code, on_step=lambda t, value: objectives.append(value))

            self.assertEqual(len(objectives), code.natoms + 1)
            for before, after in zip(objectives, objectives[1:]):
                self.assertLessEqual(after, before + 1e-10 * max(1.0, before))

    def test_running_objective_matches_recomputation(self):
        data1, data2, dict1, dict2, code = coupled_problem(seed=3)
        objectives = []
        new1, new2, new_code = sweep(data1, data2, dict1, dict2, code, on_step=lambda t, v: objectives.append(v))
        self.assertAlmostEqual(
            objectives[-1], joint_objective([data1, data2], [new1, new2], new_code), places=9
        )

    def test_support_pattern_is_preserved(self):
        data1, data2, dict1, dict2, code = coupled_problem(seed=7)
        _, _, new_code = sweep(data1, data2, dict1, dict2, code)
        assert_array_equal(new_code.matrix.indptr, code.matrix.indptr)
        assert_array_equal(new_code.matrix.indices, code.matrix.indices)

    def test_dictionaries_stay_unit_norm(self):
        data1, data2, dict1, dict2, code = coupled_problem(seed=8, dim=8, natoms=12, count=30, nonzeros=3)
        new1, new2, _ = sweep(data1, data2, dict1, dict2, code)
        assert_allclose(np.linalg.norm(new1.atoms, axis=0), 1.0, atol=1e-12)
        assert_allclose(np.linalg.norm(new2.atoms, axis=0), 1.0, atol=1e-12)

    def test_identical_spaces_give_identical_dictionaries(self):
        data1, _, dict1, _, _ = coupled_problem(seed=9)
        code = code_dataset(dict1.atoms, data1, CodingLimits(2, 0.0), workers=1)
        new1, new2, _ = sweep(data1, data1, dict1, dict1, code)
        assert_allclose(new1.atoms, new2.atoms, atol=1e-10)

    def test_single_space_matches_plain_row(self):
        data1, _, dict1, _, _ = coupled_problem(seed=10)
        code = code_dataset(dict1.atoms, data1, CodingLimits(2, 0.0), workers=1)
        (single,), single_code = sweep_spaces([data1], [dict1], code)
        new1, _, coupled_code = sweep(data1, data1, dict1, dict1, code)
        assert_allclose(single.atoms, new1.atoms, atol=1e-10)
        assert_allclose(single_code.dense(), coupled_code.dense(), atol=1e-10)

    def test_single_atom_single_signal_matches_stacked_rank_one_optimum(self):
        rng = np.random.default_rng(15)
        x1, x2 = rng.standard_normal(5), rng.standard_normal(3)
        data1, data2 = Dataset(x1[:, np.newaxis]), Dataset(x2[:, np.newaxis])
        dict1, dict2 = random_dictionary(5, 1, seed=3), random_dictionary(3, 1, seed=4)
        code = SparseCode.from_columns(1, [(np.array([0]), np.array([0.7]))])

        new1, new2, new_code = sweep(data1, data2, dict1, dict2, code)

        assert_allclose(new1.atom(0), unit(x1), atol=1e-12)
        assert_allclose(new2.atom(0), unit(x2), atol=1e-12)
        # least-squares coefficient of the stacked atom, solved directly
        stacked_atom = np.concatenate([new1.atom(0), new2.atom(0)])[:, np.newaxis]
        stacked_signal = np.concatenate([x1, x2])
        optimum = np.linalg.lstsq(stacked_atom, stacked_signal, rcond=None)[0]
        assert_allclose(new_code.dense()[:, 0], optimum, atol=1e-12)

        objective = joint_objective([data1, data2], [new1, new2], new_code)
        expected = 0.5 * (np.linalg.norm(x1) - np.linalg.norm(x2)) ** 2
        self.assertAlmostEqual(objective, expected, places=10)

    def test_optimal_rank_one_instance_is_a_fixed_point(self):
        rng = np.random.default_rng(16)
        d1, d2 = unit(rng.standard_normal(6)), unit(rng.standard_normal(4))
        row = rng.uniform(0.5, 1.5, size=8)
        data1, data2 = Dataset(np.outer(d1, row)), Dataset(np.outer(d2, row))
        code = SparseCode.from_columns(1, [(np.array([0]), np.array([value])) for value in row])

        new1, new2, new_code = sweep(data1, data2, Dictionary(d1[:, np.newaxis]), Dictionary(d2[:, np.newaxis]), code)

        assert_allclose(new1.atom(0), d1, atol=1e-10)
        assert_allclose(new2.atom(0), d2, atol=1e-10)
        assert_allclose(new_code.dense()[0], row, atol=1e-10)

    def test_unused_atoms_are_replaced(self):
        rng = np.random.default_rng(14)
        data = Dataset(rng.standard_normal((4, 10)) + 2.0)
        dictionary = random_dictionary(4, 6, seed=2)
        code = SparseCode.from_columns(6, [(np.array([0]), np.array([1.0]))] * 10)
        (updated,), _ = sweep_spaces([data], [dictionary], code)
        # rows 1 to 5 are empty and must not collapse onto one atom
        self.assertFalse(np.allclose(updated.atom(3), dictionary.atom(3)))
        assert_allclose(np.linalg.norm(updated.atoms, axis=0), 1.0, atol=1e-12)
        coherence = np.abs(updated.atoms.T @ updated.atoms) - np.eye(6)
        self.assertLessEqual(coherence.max(), DUPLICATE_COHERENCE)

    def test_shape_checks(self):
        data1, data2, dict1, dict2, code = coupled_problem(seed=0)
        with self.assertRaises(DictionaryUpdateError):
            sweep(Dataset(np.ones((6, 3))), data2, dict1, dict2, code)
        with self.assertRaises(DictionaryUpdateError):
            sweep_spaces([data1], [dict1, dict2], code)
