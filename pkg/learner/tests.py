import importlib
import os
import struct
import tempfile
from pathlib import Path
from unittest import mock

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
from django.test import SimpleTestCase, TestCase
from django.urls import reverse

from datapipe.domain import Dataset, Dictionary, stack_dictionaries
from datapipe.services import dct_dictionary, synth_coupled
from sparse_coding.domain import SparseCode
from .domain import (
    LearnConfig, CycleMetrics, CoupledModel, ConfigurationError, ShapeMismatchError,
)
from .models import TrainingRun, CycleRecord
from .persistence import (
    encode_model, decode_model, encode_dataset, decode_dataset, save_model, load_model,
    save_dataset, load_dataset, MalformedHeaderError, DimensionOverflowError,
    TruncatedPayloadError, ModelFormatError,
)
from .registry import RunRegistry
from .services import (
    sparsity_schedule, avg_learning_error, learn_coupled, learn_single, learn_joint,
)


def frozen_clock():
    return 0.0


def joint_atoms(dict1, dict2):
    stacked = stack_dictionaries(dict1, dict2)
    return stacked / np.linalg.norm(stacked, axis=0)


def recovered_fraction(learned, truth, threshold=0.95):
    """Greedy one-to-one matching of atoms by |cosine|."""
    cosines = np.abs(learned.T @ truth)
    matched = 0
    for _ in range(truth.shape[1]):
        row, col = np.unravel_index(np.argmax(cosines), cosines.shape)
        if cosines[row, col] > threshold:
            matched += 1
        cosines[row, :] = -1.0
        cosines[:, col] = -1.0
    return matched / truth.shape[1]


def random_model(rng, spaces=2):
    natoms = int(rng.integers(1, 9))
    count = int(rng.integers(0, 12))
    dictionaries = tuple(
        Dictionary.normalized(rng.standard_normal((int(rng.integers(1, 7)), natoms)))
        for _ in range(spaces)
    )
    columns = []
    for _ in range(count):
        nnz = int(rng.integers(0, natoms + 1))
        indices = np.sort(rng.choice(natoms, size=nnz, replace=False))
        values = rng.standard_normal(nnz)
        if nnz and rng.uniform() < 0.3:
            values[0] = 0.0
        columns.append((indices, values))
    metrics = tuple(
        CycleMetrics(
            cycle=c + 1,
            wall_time=float(rng.uniform()),
            avg_nonzeros=float(rng.uniform(0, 4)),
            avg_error=float(rng.uniform()),
            schedule_limit=int(rng.integers(1, 5)),
        )
        for c in range(int(rng.integers(0, 5)))
    )
    return CoupledModel(dictionaries, SparseCode.from_columns(natoms, columns), metrics)


class ScheduleTests(SimpleTestCase):

    def test_identity_schedule(self):
        self.assertEqual(sparsity_schedule(32, 32), list(range(1, 33)))

    def test_single_cycle_uses_final_limit(self):
        self.assertEqual(sparsity_schedule(1, 7), [7])

    def test_rounds_half_up(self):
        self.assertEqual(sparsity_schedule(4, 32), [1, 11, 22, 32])

    def test_nondecreasing_from_one_to_limit(self):
        schedule = sparsity_schedule(10, 6)
        self.assertEqual(schedule[0], 1)
        self.assertEqual(schedule[-1], 6)
        self.assertTrue(all(b >= a for a, b in zip(schedule, schedule[1:])))

    def test_constant_mode(self):
        self.assertEqual(sparsity_schedule(3, 5, mode='constant'), [5, 5, 5])

    def test_invalid_arguments(self):
        with self.assertRaises(ConfigurationError):
            sparsity_schedule(0, 3)
        with self.assertRaises(ConfigurationError):
            sparsity_schedule(3, 0)


class ConfigTests(SimpleTestCase):

    def test_defaults(self):
        config = LearnConfig()
        self.assertEqual((config.cycles, config.max_nonzeros, config.error_threshold, config.natoms), (32, 32, 4.0, 256))

    def test_invariants(self):
        for kwargs in ({'cycles': 0}, {'max_nonzeros': 0}, {'error_threshold': -1.0}, {'schedule_mode': 'fast'}, {'natoms': 0}):
            with self.assertRaises(ConfigurationError):
                LearnConfig(**kwargs)

    def test_model_requires_matching_atom_counts(self):
        with self.assertRaises(ConfigurationError):
            CoupledModel((dct_dictionary(4, 4), dct_dictionary(4, 16)), SparseCode.empty(4, 1))

    def test_single_model_has_no_second_dictionary(self):
        model = CoupledModel((dct_dictionary(4, 4),), SparseCode.empty(4, 1))
        with self.assertRaises(ConfigurationError):
            model.dict2
        with self.assertRaises(ConfigurationError):
            model.dictionary(2)


class AvgLearningErrorTests(SimpleTestCase):

    def test_perfect_code(self):
        data1, _, dict1, _, code = synth_coupled(8, 16, 20, 2, seed=0)
        self.assertAlmostEqual(avg_learning_error(data1, dict1, code), 0.0, places=12)

    def test_single_signal(self):
        data = Dataset(np.array([[2.0], [0.0]]))
        self.assertEqual(avg_learning_error(data, Dictionary(np.eye(2)), SparseCode.empty(2, 1)), 2.0)

    def test_matches_dense_formula(self):
        rng = np.random.default_rng(1)
        data = Dataset(rng.standard_normal((6, 15)))
        dictionary = Dictionary.normalized(rng.standard_normal((6, 9)))
        code = SparseCode.from_columns(9, [
            (np.sort(rng.choice(9, size=2, replace=False)), rng.standard_normal(2)) for _ in range(15)
        ])
        residual = data.signals - dictionary.atoms @ code.dense()
        expected = np.sqrt(np.sum(residual ** 2)) / 15
        self.assertAlmostEqual(avg_learning_error(data, dictionary, code), expected, places=12)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeMismatchError):
            avg_learning_error(Dataset(np.ones((3, 2))), Dictionary(np.eye(2)), SparseCode.empty(2, 2))


class LearnCoupledTests(SimpleTestCase):

    def setUp(self):
        rng = np.random.default_rng(21)
        self.data1 = Dataset(rng.standard_normal((16, 60)))
        self.data2 = Dataset(rng.standard_normal((9, 60)))
        self.config = LearnConfig(cycles=4, max_nonzeros=3, error_threshold=0.0, natoms=64, seed=2)

    def test_signal_counts_must_agree(self):
        with self.assertRaises(ShapeMismatchError):
            learn_coupled(self.data1, Dataset(np.ones((9, 59))), self.config)

    def test_natoms_must_cover_dim(self):
        with self.assertRaises(ShapeMismatchError):
            learn_coupled(self.data1, self.data2, LearnConfig(cycles=1, max_nonzeros=1, natoms=8))

    def test_metrics_per_cycle(self):
        model = learn_coupled(self.data1, self.data2, self.config, clock=frozen_clock)
        self.assertEqual(model.spaces, 2)
        self.assertEqual([m.cycle for m in model.metrics], [1, 2, 3, 4])
        self.assertEqual([m.schedule_limit for m in model.metrics], sparsity_schedule(4, 3))
        for m in model.metrics:
            self.assertLessEqual(m.avg_nonzeros, m.schedule_limit)
            self.assertGreaterEqual(m.avg_error, 0.0)
            self.assertEqual(m.wall_time, 0.0)

    def test_update_phase_never_increases_error(self):
        states = []
        learn_coupled(self.data1, self.data2, self.config, on_cycle=states.append)
        self.assertEqual(len(states), 4)
        for state in states:
            self.assertLessEqual(state.metrics.avg_error, state.coding_error + 1e-9)

    def test_spaces_share_one_code(self):
        states = []
        model = learn_coupled(self.data1, self.data2, self.config, on_cycle=states.append)
        for state in states:
            supports = state.code.column_supports()
            coding_supports = state.coding_code.column_supports()
            for ours, theirs in zip(supports, coding_supports):
                assert_array_equal(ours, theirs)
        self.assertIs(model.code, states[-1].code)

    def test_deterministic(self):
        first = learn_coupled(self.data1, self.data2, self.config, clock=frozen_clock)
        second = learn_coupled(self.data1, self.data2, self.config, clock=frozen_clock)
        self.assertTrue(first.same_as(second))

    def test_worker_count_does_not_change_model(self):
        threaded = LearnConfig(cycles=2, max_nonzeros=3, error_threshold=0.0, natoms=64, workers=3)
        serial = LearnConfig(cycles=2, max_nonzeros=3, error_threshold=0.0, natoms=64, workers=1)
        self.assertTrue(
            learn_coupled(self.data1, self.data2, threaded, clock=frozen_clock).same_as(
                learn_coupled(self.data1, self.data2, serial, clock=frozen_clock)
            )
        )

    def test_identical_spaces_give_identical_dictionaries(self):
        states = []
        learn_coupled(self.data1, self.data1, self.config, on_cycle=states.append)
        for state in states:
            assert_allclose(state.dictionaries[0].atoms, state.dictionaries[1].atoms, atol=1e-10)

    def test_first_atom_is_best_dct_match(self):
        rng = np.random.default_rng(5)
        x1, x2 = rng.standard_normal((4, 1)), rng.standard_normal((4, 1))
        config = LearnConfig(cycles=1, max_nonzeros=1, error_threshold=0.0, natoms=4)
        states = []
        learn_coupled(Dataset(x1), Dataset(x2), config, on_cycle=states.append)

        dct = dct_dictionary(4, 4).atoms
        expected = int(np.argmax(np.abs(np.vstack([dct, dct]).T @ np.vstack([x1, x2]))))
        assert_array_equal(states[0].coding_code.column(0)[0], [expected])

    def test_recovers_generating_atoms(self):
        rates = []
        for seed in (1, 2, 3):
            data1, data2, dict1, dict2, _ = synth_coupled(16, 32, 500, 3, seed=seed)
            config = LearnConfig(cycles=30, max_nonzeros=3, error_threshold=0.0, natoms=32, seed=seed)
            model = learn_coupled(data1, data2, config, clock=frozen_clock)
            rates.append(recovered_fraction(
                joint_atoms(model.dict1, model.dict2), joint_atoms(dict1, dict2)
            ))
        self.assertGreaterEqual(np.mean(rates), 0.8)


class LearnSingleTests(SimpleTestCase):

    def setUp(self):
        self.data = Dataset(np.random.default_rng(8).standard_normal((16, 80)))
        self.config = LearnConfig(cycles=5, max_nonzeros=3, error_threshold=0.0, natoms=64)

    def test_matches_duplicated_coupled_learning(self):
        single = learn_single(self.data, self.config, clock=frozen_clock)
        coupled = learn_coupled(self.data, self.data, self.config, clock=frozen_clock)
        self.assertEqual(single.spaces, 1)
        assert_allclose(single.dict1.atoms, coupled.dict1.atoms, atol=1e-10)

    def test_improves_on_dct_initialization(self):
        states = []
        model = learn_single(self.data, self.config, on_cycle=states.append)
        self.assertLess(model.metrics[-1].avg_error, states[0].coding_error)

    def test_update_phase_never_increases_error(self):
        states = []
        learn_single(self.data, LearnConfig(cycles=3, max_nonzeros=2, error_threshold=0.0, natoms=64, schedule_mode='constant'), on_cycle=states.append)
        for state in states:
            self.assertLessEqual(state.metrics.avg_error, state.coding_error + 1e-9)

    def test_three_spaces(self):
        rng = np.random.default_rng(9)
        datasets = [Dataset(rng.standard_normal((dim, 30))) for dim in (4, 9, 16)]
        model = learn_joint(datasets, LearnConfig(cycles=2, max_nonzeros=2, error_threshold=0.0, natoms=16))
        self.assertEqual(model.spaces, 3)
        self.assertEqual([d.dim for d in model.dictionaries], [4, 9, 16])

    def test_metrics_can_be_skipped(self):
        config = LearnConfig(cycles=2, max_nonzeros=2, natoms=64, record_metrics=False)
        self.assertEqual(learn_single(self.data, config).metrics, ())


class PersistenceTests(SimpleTestCase):

    def test_fresh_model_round_trip(self):
        dct = dct_dictionary(64, 256)
        model = CoupledModel((dct, dct), SparseCode.empty(256, 3))
        self.assertTrue(decode_model(encode_model(model)).same_as(model))

    def test_randomized_round_trips(self):
        rng = np.random.default_rng(77)
        for i in range(50):
            model = random_model(rng, spaces=(1, 2, 3)[i % 3])
            restored = decode_model(encode_model(model))
            self.assertTrue(restored.same_as(model))
            self.assertEqual(restored.code.stored, model.code.stored)

    def test_empty_rows_survive(self):
        code = SparseCode.from_columns(4, [(np.array([1]), np.array([0.5])), (np.array([], dtype=np.int64), np.array([]))])
        dct = dct_dictionary(4, 4)
        restored = decode_model(encode_model(CoupledModel((dct, dct), code)))
        assert_array_equal(restored.code.dense(), code.dense())

    def test_version_one_layout(self):
        dct = dct_dictionary(4, 4)
        metrics = (CycleMetrics(1, 0.5, 1.0, 0.25, 1),)
        code = SparseCode.from_columns(4, [(np.array([2]), np.array([1.5]))])
        payload = encode_model(CoupledModel((dct, dct), code, metrics))

        self.assertEqual(payload[:4], b'CDLM')
        self.assertEqual(struct.unpack('<I', payload[4:8])[0], 1)
        self.assertEqual(struct.unpack('<II', payload[8:16]), (4, 4))
        assert_array_equal(np.frombuffer(payload[16:16 + 128], dtype='<f8'), dct.atoms.reshape(-1, order='F'))
        code_start = 8 + 2 * (8 + 128)
        self.assertEqual(struct.unpack('<III', payload[code_start:code_start + 12]), (1, 1, 2))
        self.assertEqual(struct.unpack('<d', payload[code_start + 12:code_start + 20])[0], 1.5)
        self.assertEqual(struct.unpack('<I', payload[code_start + 20:code_start + 24])[0], 1)
        self.assertEqual(struct.unpack('<IdddI', payload[code_start + 24:]), (1, 0.5, 1.0, 0.25, 1))

    def test_single_space_uses_counted_version(self):
        payload = encode_model(CoupledModel((dct_dictionary(4, 4),), SparseCode.empty(4, 1)))
        self.assertEqual(struct.unpack('<II', payload[4:12]), (2, 1))

    def test_truncation(self):
        rng = np.random.default_rng(3)
        payload = encode_model(random_model(rng))
        for cut in range(len(payload)):
            with self.assertRaises(TruncatedPayloadError):
                decode_model(payload[:cut])

    def test_bad_magic_and_version(self):
        payload = encode_model(CoupledModel((dct_dictionary(4, 4),) * 2, SparseCode.empty(4, 1)))
        with self.assertRaises(MalformedHeaderError):
            decode_model(b'XDLM' + payload[4:])
        with self.assertRaises(MalformedHeaderError):
            decode_model(payload[:4] + struct.pack('<I', 9) + payload[8:])
        with self.assertRaises(MalformedHeaderError):
            decode_model(payload + b'\x00')

    def test_dimension_overflow(self):
        header = b'CDLM' + struct.pack('<I', 1) + struct.pack('<II', 2 ** 20, 2 ** 20)
        with self.assertRaises(DimensionOverflowError):
            decode_model(header)

    def test_column_nnz_overflow(self):
        dct = dct_dictionary(4, 4)
        payload = encode_model(CoupledModel((dct, dct), SparseCode.empty(4, 1)))
        code_start = 8 + 2 * (8 + 128)
        tampered = payload[:code_start + 4] + struct.pack('<I', 5) + payload[code_start + 8:]
        with self.assertRaises(DimensionOverflowError):
            decode_model(tampered)

    def test_errors_are_distinct(self):
        kinds = {MalformedHeaderError, DimensionOverflowError, TruncatedPayloadError}
        self.assertEqual(len(kinds), 3)
        for kind in kinds:
            self.assertTrue(issubclass(kind, ModelFormatError))

    def test_files(self):
        rng = np.random.default_rng(4)
        model = random_model(rng)
        signals = rng.standard_normal((5, 7))
        with tempfile.TemporaryDirectory() as tmp:
            save_model(model, Path(tmp) / 'model.cdlm')
            save_dataset(Dataset(signals, means=np.arange(7.0)), Path(tmp) / 'data.cdld')
            self.assertTrue(load_model(Path(tmp) / 'model.cdlm').same_as(model))
            data = load_dataset(Path(tmp) / 'data.cdld')
        assert_array_equal(data.signals, signals)
        assert_array_equal(data.means, np.arange(7.0))

    def test_dataset_without_means(self):
        signals = np.random.default_rng(5).standard_normal((3, 4))
        data = decode_dataset(encode_dataset(Dataset(signals)))
        self.assertIsNone(data.means)
        assert_array_equal(data.signals, signals)

    def test_dataset_truncation(self):
        payload = encode_dataset(Dataset(np.ones((2, 2))))
        with self.assertRaises(TruncatedPayloadError):
            decode_dataset(payload[:-1])


class RunRegistryTests(TestCase):

    def setUp(self):
        data = Dataset(np.random.default_rng(6).standard_normal((4, 20)))
        self.config = LearnConfig(cycles=3, max_nonzeros=2, error_threshold=0.0, natoms=16)
        self.model = learn_coupled(data, data, self.config)

    def test_record_writes_run_and_cycles(self):
        run = RunRegistry().record(self.model, self.config, space_dims=[4, 4], model_path='pair.cdlm')
        self.assertEqual(run.mode, 'coupled')
        self.assertEqual(run.method, 'proposed')
        self.assertEqual(run.space_dims, [4, 4])
        self.assertEqual(run.cycle_records.count(), 3)
        self.assertEqual(run.final_avg_error, self.model.metrics[-1].avg_error)
        self.assertEqual(
            list(run.cycle_records.values_list('schedule_limit', flat=True)),
            [m.schedule_limit for m in self.model.metrics],
        )
        self.assertAlmostEqual(run.total_wall_time, sum(m.wall_time for m in self.model.metrics))

    def test_mode_follows_space_count(self):
        self.assertEqual(RunRegistry.mode_for(1), 'single')
        self.assertEqual(RunRegistry.mode_for(3), 'joint')


class LocalSettingsTests(SimpleTestCase):

    def reload_local(self):
        import config.settings.local
        return importlib.reload(config.settings.local)

    def test_database_url_selects_registry_database(self):
        self.addCleanup(self.reload_local)
        with mock.patch.dict(os.environ, {'DATABASE_URL': 'sqlite:////tmp/runs.sqlite3'}):
            local = self.reload_local()
        self.assertEqual(local.DATABASES['default']['ENGINE'], 'django.db.backends.sqlite3')
        self.assertEqual(local.DATABASES['default']['NAME'], '/tmp/runs.sqlite3')

    def test_sqlite_file_without_database_url(self):
        self.addCleanup(self.reload_local)
        environ = {key: value for key, value in os.environ.items() if key != 'DATABASE_URL'}
        with mock.patch.dict(os.environ, environ, clear=True):
            local = self.reload_local()
        self.assertTrue(str(local.DATABASES['default']['NAME']).endswith('db.sqlite3'))


class RunApiTests(TestCase):

    def setUp(self):
        data = Dataset(np.random.default_rng(7).standard_normal((4, 10)))
        config = LearnConfig(cycles=2, max_nonzeros=1, error_threshold=0.0, natoms=16)
        self.run = RunRegistry().record(learn_single(data, config), config, space_dims=[4])
        ksvd_config = LearnConfig(cycles=1, max_nonzeros=1, natoms=16, schedule_mode='constant')
        RunRegistry().record(learn_single(data, ksvd_config), ksvd_config, space_dims=[4], method='ksvd')

    def test_health(self):
        response = self.client.get('/health/')
        self.assertEqual(response.status_code, 200)
        self.assertEqual(response.json()['status'], 'ok')

    def test_api_root_lists_runs(self):
        response = self.client.get('/api/')
        self.assertEqual(response.json()['endpoints']['runs'], '/api/runs/')

    def test_list(self):
        response = self.client.get(reverse('learner:run-list'))
        self.assertEqual(response.status_code, 200)
        self.assertEqual(len(response.json()), 2)

    def test_list_filtered_by_method(self):
        response = self.client.get(reverse('learner:run-list'), {'method': 'ksvd'})
        self.assertEqual([r['method'] for r in response.json()], ['ksvd'])

    def test_detail_includes_cycles(self):
        response = self.client.get(reverse('learner:run-detail', args=[self.run.id]))
        self.assertEqual(response.status_code, 200)
        body = response.json()
        self.assertEqual([c['cycle'] for c in body['cycle_records']], [1, 2])
        self.assertEqual(body['mode'], 'single')

    def test_unknown_run(self):
        response = self.client.get(reverse('learner:run-detail', args=['not-a-uuid']))
        self.assertEqual(response.status_code, 404)

    def test_read_only(self):
        response = self.client.post(reverse('learner:run-list'), {})
        self.assertEqual(response.status_code, 405)
        self.assertEqual(TrainingRun.objects.count(), 2)
        self.assertEqual(CycleRecord.objects.count(), 3)
