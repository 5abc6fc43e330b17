"""
Management command to learn a single dictionary.

Usage:
    python manage.py learn --input photo.pgm --output photo.cdlm --metrics photo.csv
    python manage.py learn --input x1.cdld --output k.cdlm --method ksvd --cycles 16
"""

from django.core.management.base import BaseCommand, CommandError

from baseline_ksvd.services import learn_ksvd
from cli.services import (
    RunSpec, METHODS, METHOD_KSVD, add_learning_arguments, add_patch_arguments,
    clock_for, learn_config_from, load_single, export_run, LIBRARY_ERRORS,
)
from learner.services import learn_single


class Command(BaseCommand):
    help = 'Learn one dictionary from a PGM image or a dataset file'

    def add_arguments(self, parser):
        parser.add_argument('--input', required=True, help='PGM image or .cdld dataset')
        parser.add_argument('--output', required=True, help='Model file to write')
        parser.add_argument('--metrics', help='Per-cycle metrics CSV')
        parser.add_argument('--method', choices=METHODS, default='proposed')
        add_learning_arguments(parser)
        add_patch_arguments(parser)

    def handle(self, *args, **options):
        try:
            config = learn_config_from(options)
            spec = RunSpec.from_options(
                'learn', options,
                inputs=[options['input']],
                outputs=[options['output'], options['metrics']],
                config=config,
            )
            data = load_single(spec.inputs[0], spec)
            self.stdout.write(f"Learning from {data.count} signals of dim {data.dim} ({options['method']})...")

            clock = clock_for(options)
            if options['method'] == METHOD_KSVD:
                model = learn_ksvd(data, config, clock=clock)
                schedule_mode = 'constant'
            else:
                model = learn_single(data, config, clock=clock)
                schedule_mode = config.schedule_mode

            run = export_run(
                model, config,
                method=options['method'],
                model_path=options['output'],
                metrics_path=options['metrics'],
                record=options['record'],
                schedule_mode=schedule_mode,
            )
        except LIBRARY_ERRORS as exc:
            raise CommandError(str(exc)) from exc

        final = model.metrics[-1]
        self.stdout.write(f"Final avg_nnz={final.avg_nonzeros:.3f} avg_error={final.avg_error:.6f}")
        if run is not None:
            self.stdout.write(f"Recorded run {run.id}")
        self.stdout.write(self.style.SUCCESS(f"Model written to {options['output']}"))
