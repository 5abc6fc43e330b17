import shutil
import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
from numpy.testing import assert_allclose
from PIL import Image as PILImage
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase

from datapipe.domain import Dictionary
from datapipe.services import dct_dictionary, write_pgm
from learner.domain import CoupledModel, CycleMetrics
from learner.models import TrainingRun
from learner.persistence import load_dataset, load_model, save_model
from sparse_coding.domain import SparseCode
from .management.commands.learn_coupled import Command as LearnCoupledCommand
from .services import (
    RunSpec, RunSpecError, MosaicShapeError, CONSTANT_ATOM_LEVEL, METRICS_COLUMNS,
    COMPARISON_COLUMNS, SCALING_COLUMNS, read_metrics_csv, render_mosaic, normalize_atom, compare_runs,
)


def run(command, *args):
    out = StringIO()
    call_command(command, *[str(a) for a in args], stdout=out)
    return out.getvalue()


class CommandTestCase(TestCase):

    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())
        self.addCleanup(shutil.rmtree, self.tmp, ignore_errors=True)

    def write_image(self, name='photo.pgm', size=64, seed=0):
        rng = np.random.default_rng(seed)
        # smooth enough that blurred and focused patches differ but stay correlated
        samples = np.clip(
            0.5 + 0.2 * np.sin(np.arange(size) / 3.0)[:, np.newaxis] + 0.1 * rng.uniform(size=(size, size)),
            0.0, 1.0,
        )
        path = self.tmp / name
        write_pgm(path, samples)
        return path

    def synth(self, directory='data', *extra):
        output = self.tmp / directory
        run('synth', '--output', output, '--m', 4, '--k', 16, '--n', 40, '--sparsity', 2, '--seed', 1, *extra)
        return output


class SynthCommandTests(CommandTestCase):

    def test_synthetic_mode_writes_pair_and_truth(self):
        output = self.synth()
        data1 = load_dataset(output / 'x1.cdld')
        data2 = load_dataset(output / 'x2.cdld')
        truth = load_model(output / 'truth.cdlm')

        self.assertEqual((data1.dim, data1.count), (4, 40))
        self.assertEqual((data2.dim, data2.count), (4, 40))
        self.assertIsNone(data1.means)
        self.assertEqual(truth.natoms, 16)
        assert_allclose(data1.signals, truth.code.reconstruct(truth.dict1.atoms), atol=1e-12)

    def test_same_seed_same_files(self):
        first, second = self.synth('a'), self.synth('b')
        for name in ('x1.cdld', 'x2.cdld', 'truth.cdlm'):
            self.assertEqual((first / name).read_bytes(), (second / name).read_bytes())

    def test_blur_pair(self):
        image = self.write_image()
        output = self.tmp / 'pair'
        run('synth', '--mode', 'blurpair', '--input', image, '--output', output, '--sigma', 2)

        data1 = load_dataset(output / 'x1.cdld')
        data2 = load_dataset(output / 'x2.cdld')
        self.assertEqual((data1.dim, data1.count), (64, 225))
        self.assertEqual(data2.count, 225)
        assert_allclose(data1.signals.sum(axis=0), 0.0, atol=1e-8)
        self.assertFalse((output / 'truth.cdlm').exists())

    def test_blur_pair_subsample(self):
        image = self.write_image()
        output = self.tmp / 'pair'
        run('synth', '--mode', 'blurpair', '--input', image, '--output', output, '--count', 100)
        self.assertEqual(load_dataset(output / 'x1.cdld').count, 100)
        self.assertEqual(load_dataset(output / 'x2.cdld').count, 100)

    def test_blur_pair_needs_input(self):
        with self.assertRaises(CommandError):
            run('synth', '--mode', 'blurpair', '--output', self.tmp / 'pair')


class LearnCoupledCommandTests(CommandTestCase):

    def learn(self, data, name, *extra):
        model, metrics = self.tmp / f"{name}.cdlm", self.tmp / f"{name}.csv"
        run(
            'learn_coupled',
            '--input', data / 'x1.cdld', '--input2', data / 'x2.cdld',
            '--output', model, '--metrics', metrics,
            '--cycles', 4, '--max-nnz', 3, '--eps', 0, '--natoms', 16,
            *extra,
        )
        return model, metrics

    def test_metrics_csv(self):
        _, metrics = self.learn(self.synth(), 'pair')
        rows = read_metrics_csv(metrics)
        self.assertEqual(list(rows[0].keys()), METRICS_COLUMNS)
        self.assertEqual([r['cycle'] for r in rows], ['1', '2', '3', '4'])
        self.assertEqual([r['limit'] for r in rows], ['1', '2', '2', '3'])
        for r in rows:
            self.assertLessEqual(float(r['avg_nnz']), int(r['limit']))

    def test_model_has_two_dictionaries(self):
        model, _ = self.learn(self.synth(), 'pair')
        loaded = load_model(model)
        self.assertEqual(loaded.spaces, 2)
        self.assertEqual(loaded.code.count, 40)
        self.assertEqual(len(loaded.metrics), 4)

    def test_frozen_clock_runs_are_identical(self):
        data = self.synth()
        first = self.learn(data, 'first', '--no-wall-time')
        second = self.learn(data, 'second', '--no-wall-time')
        for a, b in zip(first, second):
            self.assertEqual(a.read_bytes(), b.read_bytes())
        self.assertEqual({r['wall_time_s'] for r in read_metrics_csv(first[1])}, {'0.0'})

    def test_record(self):
        self.learn(self.synth(), 'pair', '--record')
        run_ = TrainingRun.objects.get()
        self.assertEqual(run_.mode, 'coupled')
        self.assertEqual(run_.space_dims, [4, 4])
        self.assertEqual(run_.cycle_records.count(), 4)
        self.assertTrue(run_.model_path.endswith('pair.cdlm'))

    def test_single_image_learns_blur_pair(self):
        image = self.write_image(size=16)
        model = self.tmp / 'image.cdlm'
        run(
            'learn_coupled', '--input', image, '--output', model,
            '--patch-size', 4, '--stride', 2, '--cycles', 2, '--max-nnz', 2, '--natoms', 16,
        )
        self.assertEqual(load_model(model).code.count, 49)

    def test_mismatched_signal_counts(self):
        first = self.synth('a')
        run('synth', '--output', self.tmp / 'b', '--m', 4, '--k', 16, '--n', 30, '--sparsity', 2)
        with self.assertRaises(CommandError):
            run(
                'learn_coupled', '--input', first / 'x1.cdld', '--input2', self.tmp / 'b' / 'x2.cdld',
                '--output', self.tmp / 'bad.cdlm', '--natoms', 16,
            )

    def test_dataset_without_second_space(self):
        data = self.synth()
        with self.assertRaises(CommandError):
            run('learn_coupled', '--input', data / 'x1.cdld', '--output', self.tmp / 'bad.cdlm')

    def test_missing_input(self):
        with self.assertRaises(CommandError):
            run('learn_coupled', '--input', self.tmp / 'nope.pgm', '--output', self.tmp / 'bad.cdlm')


class LearnCommandTests(CommandTestCase):

    def test_proposed(self):
        data = self.synth()
        model = self.tmp / 'single.cdlm'
        output = run(
            'learn', '--input', data / 'x1.cdld', '--output', model,
            '--cycles', 3, '--max-nnz', 2, '--eps', 0, '--natoms', 16,
        )
        self.assertIn('Model written to', output)
        self.assertEqual(load_model(model).spaces, 1)

    def test_ksvd(self):
        data = self.synth()
        model, metrics = self.tmp / 'ksvd.cdlm', self.tmp / 'ksvd.csv'
        run(
            'learn', '--input', data / 'x1.cdld', '--output', model, '--metrics', metrics,
            '--method', 'ksvd', '--cycles', 2, '--max-nnz', 3, '--eps', 0, '--natoms', 16, '--record',
        )
        self.assertEqual([r['limit'] for r in read_metrics_csv(metrics)], ['3', '3'])
        recorded = TrainingRun.objects.get()
        self.assertEqual((recorded.method, recorded.schedule_mode, recorded.mode), ('ksvd', 'constant', 'single'))

    def test_bad_configuration(self):
        data = self.synth()
        with self.assertRaises(CommandError):
            run('learn', '--input', data / 'x1.cdld', '--output', self.tmp / 'x.cdlm', '--cycles', 0)

    def test_natoms_below_dim(self):
        data = self.synth()
        with self.assertRaises(CommandError):
            run('learn', '--input', data / 'x1.cdld', '--output', self.tmp / 'x.cdlm', '--natoms', 2)


class BenchmarkCommandTests(CommandTestCase):

    def test_comparison(self):
        image = self.write_image(size=16)
        output = self.tmp / 'compare.csv'
        run(
            'benchmark', '--input', image, '--output', output,
            '--patch-size', 4, '--stride', 2, '--natoms', 16, '--max-nnz', 2, '--eps', 0,
            '--cycles', 3, '--ksvd-cycles', 2, '--record',
        )
        rows = read_metrics_csv(output)
        self.assertEqual(list(rows[0].keys()), COMPARISON_COLUMNS)
        self.assertEqual([r['method'] for r in rows], ['proposed', 'ksvd', 'proposed', 'ksvd', 'proposed'])
        for method in ('proposed', 'ksvd'):
            times = [float(r['wall_time_s']) for r in rows if r['method'] == method]
            self.assertEqual(times, sorted(times))
        self.assertEqual(
            sorted(TrainingRun.objects.values_list('method', 'cycles')),
            [('ksvd', 2), ('proposed', 3)],
        )

    def test_comparison_reports_verdict(self):
        image = self.write_image(size=16)
        output = run(
            'benchmark', '--input', image, '--output', self.tmp / 'compare.csv',
            '--patch-size', 4, '--stride', 2, '--natoms', 16, '--max-nnz', 2, '--eps', 0,
            '--cycles', 3, '--ksvd-cycles', 2, '--attempts', 2,
        )
        self.assertRegex(output, r'proposed (reached|never reached) avg_error')

    def test_check_passes_when_both_codes_stay_empty(self):
        # a threshold above every patch energy leaves both codes empty and the errors equal
        image = self.write_image(size=16)
        output = run(
            'benchmark', '--input', image, '--output', self.tmp / 'compare.csv',
            '--patch-size', 4, '--stride', 2, '--natoms', 16, '--max-nnz', 2, '--eps', 1e12,
            '--cycles', 3, '--ksvd-cycles', 2, '--no-wall-time', '--check',
        )
        self.assertIn('at cycle 1', output)
        self.assertIn('PASS', output)

    def test_attempts_must_be_positive(self):
        image = self.write_image(size=16)
        with self.assertRaises(CommandError):
            run(
                'benchmark', '--input', image, '--output', self.tmp / 'compare.csv',
                '--patch-size', 4, '--stride', 2, '--natoms', 16, '--attempts', 0,
            )

    def test_comparison_needs_input(self):
        with self.assertRaises(CommandError):
            run('benchmark', '--output', self.tmp / 'compare.csv')

    def test_scaling(self):
        output = self.tmp / 'scaling.csv'
        run(
            'benchmark', '--suite', 'scaling', '--output', output,
            '--patch-size', 4, '--natoms', 16, '--count', 20, '--max-nnz', 2, '--repeats', 1,
        )
        rows = read_metrics_csv(output)
        self.assertEqual(list(rows[0].keys()), SCALING_COLUMNS)
        self.assertEqual([(r['method'], r['n']) for r in rows], [
            ('proposed', '20'), ('proposed', '40'), ('svd', '20'), ('svd', '40'),
        ])
        self.assertEqual(float(rows[0]['scale']), 1.0)

    def test_scaling_power_comparator(self):
        output = self.tmp / 'scaling.csv'
        run(
            'benchmark', '--suite', 'scaling', '--output', output, '--comparator', 'power',
            '--patch-size', 4, '--natoms', 16, '--count', 10, '--max-nnz', 2, '--repeats', 1,
        )
        self.assertEqual({r['method'] for r in read_metrics_csv(output)}, {'proposed', 'power'})


class RenderAtomsCommandTests(CommandTestCase):

    def test_mosaic_size(self):
        dct = dct_dictionary(64, 256)
        model = self.tmp / 'dct.cdlm'
        save_model(CoupledModel((dct, dct), SparseCode.empty(256, 1)), model)
        output = self.tmp / 'atoms.pgm'

        run('render_atoms', '--input', model, '--space', 2, '--output', output)

        with PILImage.open(output) as image:
            self.assertEqual(image.size, (143, 143))

    def test_non_square_dictionary(self):
        rng = np.random.default_rng(0)
        dictionary = Dictionary.normalized(rng.standard_normal((6, 8)))
        model = self.tmp / 'odd.cdlm'
        save_model(CoupledModel((dictionary, dictionary), SparseCode.empty(8, 1)), model)
        with self.assertRaises(CommandError):
            run('render_atoms', '--input', model, '--output', self.tmp / 'odd.pgm')

    def test_space_out_of_range(self):
        dct = dct_dictionary(4, 4)
        model = self.tmp / 'single.cdlm'
        save_model(CoupledModel((dct,), SparseCode.empty(4, 1)), model)
        with self.assertRaises(CommandError):
            run('render_atoms', '--input', model, '--space', 2, '--output', self.tmp / 'x.pgm')


class MosaicTests(SimpleTestCase):

    def test_constant_atom_is_mid_gray(self):
        mosaic = render_mosaic(dct_dictionary(64, 256))
        assert_allclose(mosaic[0:8, 0:8], CONSTANT_ATOM_LEVEL)

    def test_separator_lines_are_black(self):
        mosaic = render_mosaic(dct_dictionary(4, 4))
        self.assertEqual(mosaic.shape, (5, 5))
        assert_allclose(mosaic[2, :], 0.0)
        assert_allclose(mosaic[:, 2], 0.0)

    def test_tiles_span_full_range(self):
        tile = normalize_atom(dct_dictionary(16, 16).atom(5))
        self.assertEqual((tile.min(), tile.max()), (0.0, 1.0))

    def test_non_square(self):
        with self.assertRaises(MosaicShapeError):
            render_mosaic(Dictionary.normalized(np.ones((3, 4))))


class RunSpecTests(SimpleTestCase):

    def test_missing_input(self):
        with self.assertRaises(RunSpecError):
            RunSpec('learn', inputs=['/nonexistent/input.pgm'])

    def test_invalid_patch_parameters(self):
        for kwargs in ({'patch_size': 0}, {'stride': 0}, {'sigma': 0.0}, {'scale': -1.0}, {'count': 0}):
            with self.assertRaises(RunSpecError):
                RunSpec('learn', **kwargs)

    def test_missing_optional_paths_are_dropped(self):
        spec = RunSpec('learn_coupled', outputs=['model.cdlm', None])
        self.assertEqual(spec.outputs, (Path('model.cdlm'),))


class LearnDefaultsTests(SimpleTestCase):

    def test_defaults_match_patch_experiments(self):
        parser = LearnCoupledCommand().create_parser('manage.py', 'learn_coupled')
        options = vars(parser.parse_args(['--input', 'a.pgm', '--output', 'b.cdlm']))
        self.assertEqual(
            (options['patch_size'], options['max_nnz'], options['eps'], options['natoms'], options['cycles']),
            (8, 32, 4.0, 256, 32),
        )
        self.assertEqual(options['schedule'], 'graduated')


def cycles(*rows):
    return [CycleMetrics(i, time, nnz, error, 1) for i, (time, nnz, error) in enumerate(rows, start=1)]


class ComparisonVerdictTests(SimpleTestCase):

    def setUp(self):
        self.ksvd = cycles((4.0, 8.0, 0.2), (4.0, 7.0, 0.1))

    def test_first_cycle_within_margin(self):
        verdict = compare_runs(cycles((1.0, 3.0, 0.5), (1.0, 5.0, 0.104), (1.0, 6.0, 0.09)), self.ksvd)
        self.assertEqual(verdict.cycle, 2)
        self.assertEqual(verdict.time, 2.0)
        self.assertEqual(verdict.time_ratio, 0.25)
        self.assertAlmostEqual(verdict.target_error, 0.105)
        self.assertTrue(verdict.passed)
        self.assertIn('PASS', verdict.summary())

    def test_too_slow(self):
        verdict = compare_runs(cycles((3.0, 3.0, 0.5), (3.0, 5.0, 0.1)), self.ksvd)
        self.assertEqual(verdict.time_ratio, 0.75)
        self.assertFalse(verdict.passed)

    def test_too_many_nonzeros(self):
        verdict = compare_runs(cycles((1.0, 9.0, 0.1)), self.ksvd)
        self.assertTrue(verdict.reached)
        self.assertFalse(verdict.passed)

    def test_never_reached(self):
        verdict = compare_runs(cycles((1.0, 3.0, 0.5), (1.0, 4.0, 0.2)), self.ksvd)
        self.assertIsNone(verdict.cycle)
        self.assertFalse(verdict.passed)
        self.assertIn('never reached', verdict.summary())

    def test_frozen_clock_skips_time_budget(self):
        verdict = compare_runs(cycles((0.0, 5.0, 0.1)), cycles((0.0, 7.0, 0.1)))
        self.assertIsNone(verdict.time_ratio)
        self.assertTrue(verdict.passed)

    def test_passing_attempt_ranks_first(self):
        slow = compare_runs(cycles((3.0, 3.0, 0.5), (3.0, 5.0, 0.1)), self.ksvd)
        fast = compare_runs(cycles((1.0, 5.0, 0.1)), self.ksvd)
        self.assertIs(min([slow, fast], key=lambda v: v.rank()), fast)

    def test_needs_metrics(self):
        with self.assertRaises(RunSpecError):
            compare_runs([], self.ksvd)
