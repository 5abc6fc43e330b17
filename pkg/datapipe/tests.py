import tempfile
from pathlib import Path

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
from PIL import Image as PILImage
from django.test import SimpleTestCase

from .domain import (
    Image, Dataset, Dictionary, stack_datasets, stack_dictionaries,
    InvalidImageError, PatchSizeError, DatasetShapeError, DictionaryShapeError,
)
from .services import (
    read_pgm, write_pgm, gaussian_blur, gaussian_kernel, extract_patches, patch_grid,
    assemble_patches, mean_center, blur_pair, subsample_columns, dct_dictionary,
    random_dictionary, initial_dictionary, synth_coupled,
)


class DomainTests(SimpleTestCase):

    def test_image_rejects_out_of_range_samples(self):
        with self.assertRaises(InvalidImageError):
            Image(np.array([[0.0, 1.5]]))

    def test_dataset_rejects_wrong_means_length(self):
        with self.assertRaises(DatasetShapeError):
            Dataset(np.ones((2, 3)), means=np.zeros(2))

    def test_dictionary_requires_unit_norm_atoms(self):
        with self.assertRaises(DictionaryShapeError):
            Dictionary(np.array([[1.0, 2.0], [0.0, 0.0]]))

    def test_stacking_checks_counts(self):
        with self.assertRaises(DatasetShapeError):
            stack_datasets(Dataset(np.ones((2, 3))), Dataset(np.ones((2, 4))))
        with self.assertRaises(DictionaryShapeError):
            stack_dictionaries(dct_dictionary(4, 4), dct_dictionary(4, 16))

    def test_stacked_dictionary_shape(self):
        joint = stack_dictionaries(dct_dictionary(4, 16), dct_dictionary(16, 16))
        self.assertEqual(joint.shape, (20, 16))


class PatchTests(SimpleTestCase):

    def setUp(self):
        rng = np.random.default_rng(3)
        self.image = Image(rng.uniform(size=(16, 16)))

    def test_single_patch(self):
        data = extract_patches(Image(np.full((8, 8), 0.25)), 8, 8)
        self.assertEqual(data.count, 1)
        self.assertEqual(data.dim, 64)

    def test_overlapping_patch_count(self):
        data = extract_patches(self.image, 8, 4)
        self.assertEqual(data.count, 9)
        self.assertEqual(patch_grid(16, 16, 8, 4), (3, 3))

    def test_patch_order_is_row_major(self):
        data = extract_patches(self.image, 8, 4)
        assert_array_equal(data.signals[:, 0], self.image.samples[0:8, 0:8].reshape(-1))
        # second patch moves right, fourth moves down
        assert_array_equal(data.signals[:, 1], self.image.samples[0:8, 4:12].reshape(-1))
        assert_array_equal(data.signals[:, 3], self.image.samples[4:12, 0:8].reshape(-1))

    def test_constant_image_gives_identical_columns(self):
        data = extract_patches(Image(np.full((12, 12), 0.5)), 4, 2)
        assert_array_equal(data.signals, np.full_like(data.signals, 0.5))

    def test_patch_larger_than_image(self):
        with self.assertRaises(PatchSizeError):
            extract_patches(Image(np.zeros((4, 6))), 5, 1)

    def test_assemble_inverts_extraction(self):
        data = extract_patches(self.image, 8, 4)
        assert_allclose(assemble_patches(data, 16, 16, 8, 4), self.image.samples, atol=1e-15)

    def test_assemble_marks_uncovered_pixels(self):
        image = Image(np.full((10, 10), 0.5))
        canvas = assemble_patches(extract_patches(image, 8, 4), 10, 10, 8, 4)
        self.assertTrue(np.isnan(canvas[9, 9]))
        self.assertEqual(canvas[0, 0], 0.5)


class MeanCenterTests(SimpleTestCase):

    def test_constant_column(self):
        centered = mean_center(Dataset(np.ones((4, 1))))
        assert_array_equal(centered.signals[:, 0], np.zeros(4))
        assert_array_equal(centered.means, [1.0])

    def test_two_entries(self):
        centered = mean_center(Dataset(np.array([[0.0], [2.0]])))
        assert_array_equal(centered.signals[:, 0], [-1.0, 1.0])
        assert_array_equal(centered.means, [1.0])

    def test_round_trip(self):
        signals = np.random.default_rng(0).standard_normal((64, 100))
        centered = mean_center(Dataset(signals))
        assert_allclose(centered.signals.sum(axis=0), 0.0, atol=1e-9)
        self.assertLess(np.max(np.abs(centered.restored() - signals)), 1e-12)

    def test_centering_twice_keeps_round_trip(self):
        signals = np.random.default_rng(1).uniform(size=(9, 20))
        twice = mean_center(mean_center(Dataset(signals)))
        self.assertLess(np.max(np.abs(twice.restored() - signals)), 1e-12)

    def test_centering_is_idempotent_on_signals(self):
        signals = np.random.default_rng(3).standard_normal((16, 30)) + 5.0
        once = mean_center(Dataset(signals))
        twice = mean_center(once)
        assert_allclose(twice.signals, once.signals, atol=1e-12)
        assert_allclose(twice.means, once.means, atol=1e-12)


class BlurTests(SimpleTestCase):

    def test_kernel_is_normalized(self):
        kernel = gaussian_kernel(1.5)
        self.assertEqual(kernel.shape, (2 * 5 + 1,))
        self.assertAlmostEqual(kernel.sum(), 1.0, places=15)

    def test_constant_image_is_unchanged(self):
        image = Image(np.full((10, 12), 0.3))
        assert_allclose(gaussian_blur(image, 2.0).samples, image.samples, atol=1e-12)

    def test_impulse_response_center(self):
        samples = np.zeros((15, 15))
        samples[7, 7] = 1.0
        blurred = gaussian_blur(Image(samples), 1.0)
        kernel = gaussian_kernel(1.0)
        center = kernel[len(kernel) // 2]
        self.assertAlmostEqual(blurred.samples[7, 7], center * center, places=12)

    def test_commutes_with_constant_offset(self):
        samples = np.random.default_rng(5).uniform(0.0, 0.5, size=(20, 24))
        shifted = gaussian_blur(Image(samples + 0.3), 2.0).samples
        assert_allclose(shifted, gaussian_blur(Image(samples), 2.0).samples + 0.3, atol=1e-12)

    def test_preserves_total_intensity_away_from_borders(self):
        samples = np.zeros((40, 40))
        samples[15:25, 15:25] = np.random.default_rng(6).uniform(size=(10, 10))
        blurred = gaussian_blur(Image(samples), 1.5).samples
        self.assertAlmostEqual(blurred.sum(), samples.sum(), places=10)

    def test_rejects_non_positive_sigma(self):
        with self.assertRaises(InvalidImageError):
            gaussian_blur(Image(np.zeros((4, 4))), 0.0)

    def test_blur_pair_is_aligned(self):
        image = Image(np.random.default_rng(2).uniform(size=(64, 64)))
        focused, blurred = blur_pair(image, 8, 4, sigma=2.0)
        self.assertEqual(focused.count, 225)
        self.assertEqual(blurred.count, 225)
        assert_array_equal(focused.signals, extract_patches(image, 8, 4).signals)


class PgmTests(SimpleTestCase):

    def test_round_trip(self):
        levels = np.random.default_rng(4).integers(0, 256, size=(7, 9))
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'image.pgm'
            write_pgm(path, levels / 255.0)
            image = read_pgm(path)
        self.assertEqual((image.height, image.width), (7, 9))
        assert_allclose(image.samples, levels / 255.0, atol=1e-12)

    def test_rejects_other_formats(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'image.png'
            PILImage.fromarray(np.zeros((4, 4), dtype=np.uint8)).save(path, format='PNG')
            with self.assertRaises(InvalidImageError):
                read_pgm(path)

    def test_rejects_garbage(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'image.pgm'
            path.write_bytes(b'not an image')
            with self.assertRaises(InvalidImageError):
                read_pgm(path)

    def assert_rejected(self, payload):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'image.pgm'
            path.write_bytes(payload)
            with self.assertRaises(InvalidImageError):
                read_pgm(path)

    def test_rejects_ascii_pgm(self):
        self.assert_rejected(b'P2\n2 2\n255\n0 64\n128 255\n')

    def test_rejects_sixteen_bit_pgm(self):
        self.assert_rejected(b'P5\n2 2\n65535\n' + bytes(8))

    def test_rejects_other_maxval(self):
        self.assert_rejected(b'P5\n2 2\n100\n' + bytes([0, 25, 50, 100]))

    def test_header_comments_are_allowed(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'image.pgm'
            path.write_bytes(b'P5\n# scanned\n2 1\n255\n' + bytes([0, 255]))
            image = read_pgm(path)
        assert_allclose(image.samples, [[0.0, 1.0]])


class DictionaryTests(SimpleTestCase):

    def test_overcomplete_dct(self):
        dictionary = dct_dictionary(64, 256)
        self.assertEqual(dictionary.atoms.shape, (64, 256))
        assert_allclose(np.linalg.norm(dictionary.atoms, axis=0), 1.0, atol=1e-12)

    def test_first_atom_is_constant(self):
        atom = dct_dictionary(64, 256).atom(0)
        assert_allclose(atom, np.full(64, 1.0 / 8.0), atol=1e-12)

    def test_complete_dct_is_orthonormal(self):
        atoms = dct_dictionary(4, 4).atoms
        assert_allclose(atoms.T @ atoms, np.eye(4), atol=1e-9)

    def test_non_square_sizes_are_rejected(self):
        with self.assertRaises(DictionaryShapeError):
            dct_dictionary(6, 36)
        with self.assertRaises(DictionaryShapeError):
            dct_dictionary(16, 32)

    def test_initial_dictionary_falls_back_to_random(self):
        with self.assertLogs('datapipe.services', level='WARNING'):
            dictionary = initial_dictionary(16, 32, seed=5)
        assert_array_equal(dictionary.atoms, random_dictionary(16, 32, seed=5).atoms)

    def test_initial_dictionary_prefers_dct(self):
        assert_array_equal(initial_dictionary(16, 64, seed=0).atoms, dct_dictionary(16, 64).atoms)


class SynthTests(SimpleTestCase):

    def test_shapes_and_sparsity(self):
        data1, data2, dict1, dict2, code = synth_coupled(16, 32, 50, 3, seed=1)
        self.assertEqual((data1.dim, data1.count), (16, 50))
        self.assertEqual((data2.dim, data2.count), (16, 50))
        self.assertEqual(code.natoms, 32)
        for indices, values in code.columns():
            self.assertEqual(len(indices), 3)
            self.assertTrue(np.all(np.abs(values) >= 0.5))
            self.assertTrue(np.all(np.abs(values) <= 1.5))
        assert_allclose(data1.signals, dict1.atoms @ code.dense(), atol=1e-12)
        assert_allclose(data2.signals, dict2.atoms @ code.dense(), atol=1e-12)

    def test_one_atom_per_signal(self):
        data1, _, dict1, _, code = synth_coupled(8, 8, 8, 1, seed=2)
        for i, (indices, values) in enumerate(code.columns()):
            assert_allclose(data1.signals[:, i], values[0] * dict1.atom(indices[0]), atol=1e-12)

    def test_deterministic(self):
        first = synth_coupled(8, 16, 20, 2, seed=9)
        second = synth_coupled(8, 16, 20, 2, seed=9)
        assert_array_equal(first[0].signals, second[0].signals)
        assert_array_equal(first[3].atoms, second[3].atoms)
        self.assertTrue(first[4].same_as(second[4]))

    def test_rejects_excess_sparsity(self):
        with self.assertRaises(DictionaryShapeError):
            synth_coupled(4, 8, 10, 5, seed=0)


class SubsampleTests(SimpleTestCase):

    def test_sorted_unique_and_seeded(self):
        keep = subsample_columns(100, 10, seed=3)
        self.assertEqual(len(np.unique(keep)), 10)
        assert_array_equal(keep, np.sort(keep))
        assert_array_equal(keep, subsample_columns(100, 10, seed=3))

    def test_keep_all(self):
        assert_array_equal(subsample_columns(5, 10, seed=0), np.arange(5))
