"""
Management command to compare the fast learner with the K-SVD baseline.

The comparison suite learns both on the same data and seed and writes their
per-cycle metrics interleaved and tagged by method. The scaling suite times
one dictionary-update phase at n and 2n signals for the fast rule and an
SVD-based comparator.

The comparison ends with a verdict on the first fast-learner cycle that
comes within 5% of K-SVD's final error. --check turns a failing verdict
into an error.

Usage:
    python manage.py benchmark --input photo.pgm --count 2000 --output compare.csv
    python manage.py benchmark --input photo.pgm --count 2000 --attempts 2 --check --output compare.csv
    python manage.py benchmark --suite scaling --count 1000 --repeats 5 --output scaling.csv
"""

from django.core.management.base import BaseCommand, CommandError

from cli.services import (
    RunSpec, RunSpecError, METHOD_PROPOSED, METHOD_KSVD, COMPARATORS, COMPARATOR_SVD, DEFAULT_KSVD_CYCLES,
    add_learning_arguments, add_patch_arguments, clock_for, learn_config_from, load_single,
    run_comparison, compare_runs, write_comparison_csv, run_scaling, write_scaling_csv, export_run,
    LIBRARY_ERRORS,
)


class Command(BaseCommand):
    help = 'Benchmark the fast coupled update against K-SVD'

    def add_arguments(self, parser):
        parser.add_argument('--suite', choices=['comparison', 'scaling'], default='comparison')
        parser.add_argument('--input', help='PGM image or .cdld dataset (comparison suite)')
        parser.add_argument('--output', required=True, help='CSV to write')
        parser.add_argument('--ksvd-cycles', type=int, default=DEFAULT_KSVD_CYCLES)
        parser.add_argument('--repeats', type=int, default=5, help='Timing repetitions (scaling suite)')
        parser.add_argument('--comparator', choices=COMPARATORS, default=COMPARATOR_SVD)
        parser.add_argument('--attempts', type=int, default=1, help='Comparison runs; the best one is kept')
        parser.add_argument(
            '--check', action='store_true',
            help='Exit with an error unless the fast learner matches K-SVD in less time and no more nonzeros',
        )
        add_learning_arguments(parser)
        add_patch_arguments(parser)

    def handle(self, *args, **options):
        try:
            if options['suite'] == 'scaling':
                self.scaling(options)
            else:
                self.comparison(options)
        except LIBRARY_ERRORS as exc:
            raise CommandError(str(exc)) from exc

        self.stdout.write(self.style.SUCCESS(f"Benchmark written to {options['output']}"))

    def comparison(self, options):
        if not options['input']:
            raise RunSpecError('--input is required for the comparison suite')
        config = learn_config_from(options)
        spec = RunSpec.from_options('benchmark', options, inputs=[options['input']], config=config)
        data = load_single(spec.inputs[0], spec)
        self.stdout.write(f"Comparing on {data.count} signals of dim {data.dim}...")

        if options['attempts'] < 1:
            raise RunSpecError(f"--attempts must be >= 1, got {options['attempts']}")
        attempts = []
        for _ in range(options['attempts']):
            models = run_comparison(data, config, ksvd_cycles=options['ksvd_cycles'], clock=clock_for(options))
            verdict = compare_runs(models[METHOD_PROPOSED].metrics, models[METHOD_KSVD].metrics)
            attempts.append((verdict, models))
        verdict, models = min(attempts, key=lambda attempt: attempt[0].rank())

        write_comparison_csv(options['output'], {m: model.metrics for m, model in models.items()})

        for method, model in models.items():
            final = model.metrics[-1]
            self.stdout.write(
                f"{method}: cycles={len(model.metrics)} avg_nnz={final.avg_nonzeros:.3f} "
                f"avg_error={final.avg_error:.6f} time={sum(m.wall_time for m in model.metrics):.3f}s"
            )
            if options['record']:
                method_config = config if method != METHOD_KSVD else learn_config_from(
                    options, cycles=options['ksvd_cycles']
                )
                export_run(
                    model, method_config,
                    method=method,
                    record=True,
                    schedule_mode='constant' if method == METHOD_KSVD else config.schedule_mode,
                )

        self.stdout.write(verdict.summary())
        if options['check'] and not verdict.passed:
            raise CommandError(verdict.summary())

    def scaling(self, options):
        patch = options['patch_size']
        count = options['count'] or 1000
        sparsity = min(options['max_nnz'], patch * patch)
        results = run_scaling(
            dim=patch * patch,
            natoms=options['natoms'],
            count=count,
            sparsity=sparsity,
            seed=options['seed'],
            repeats=options['repeats'],
            comparator=options['comparator'],
        )
        write_scaling_csv(options['output'], results)
        for r in results:
            self.stdout.write(f"{r['method']}: n={r['n']} median={r['median_s']:.4f}s scale={r['scale']:.3f}")
