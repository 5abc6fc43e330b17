"""
Management command to learn a coupled pair of dictionaries with one
shared sparse code.

--input alone must be a PGM image: the second feature space is its
Gaussian-blurred copy. With --input2 both files are used as given.

Usage:
    python manage.py learn_coupled --input photo.pgm --sigma 2 --output pair.cdlm --metrics pair.csv
    python manage.py learn_coupled --input x1.cdld --input2 x2.cdld --output pair.cdlm --eps 0
"""

from django.core.management.base import BaseCommand, CommandError

from cli.services import (
    RunSpec, METHOD_PROPOSED, add_learning_arguments, add_patch_arguments,
    clock_for, learn_config_from, load_pair, export_run, LIBRARY_ERRORS,
)
from learner.services import learn_coupled


class Command(BaseCommand):
    help = 'Learn coupled dictionaries for two feature spaces of the same signals'

    def add_arguments(self, parser):
        parser.add_argument('--input', required=True, help='PGM image or .cdld dataset (space 1)')
        parser.add_argument('--input2', help='PGM image or .cdld dataset (space 2)')
        parser.add_argument('--output', required=True, help='Model file to write')
        parser.add_argument('--metrics', help='Per-cycle metrics CSV')
        parser.add_argument(
            '--method',
            choices=[METHOD_PROPOSED],
            default=METHOD_PROPOSED,
            help='Coupled learning only supports the fast update',
        )
        add_learning_arguments(parser)
        add_patch_arguments(parser)

    def handle(self, *args, **options):
        try:
            config = learn_config_from(options)
            spec = RunSpec.from_options(
                'learn_coupled', options,
                inputs=[options['input'], options['input2']],
                outputs=[options['output'], options['metrics']],
                config=config,
            )
            second = spec.inputs[1] if len(spec.inputs) > 1 else None
            data1, data2 = load_pair(spec.inputs[0], second, spec)
            self.stdout.write(
                f"Learning coupled dictionaries from {data1.count} signals "
                f"(dims {data1.dim}/{data2.dim})..."
            )

            model = learn_coupled(data1, data2, config, clock=clock_for(options))
            run = export_run(
                model, config,
                method=METHOD_PROPOSED,
                model_path=options['output'],
                metrics_path=options['metrics'],
                record=options['record'],
            )
        except LIBRARY_ERRORS as exc:
            raise CommandError(str(exc)) from exc

        final = model.metrics[-1]
        self.stdout.write(f"Final avg_nnz={final.avg_nonzeros:.3f} avg_error={final.avg_error:.6f}")
        if run is not None:
            self.stdout.write(f"Recorded run {run.id}")
        self.stdout.write(self.style.SUCCESS(f"Model written to {options['output']}"))
