"""
Management command to render a dictionary as an atom mosaic.

Tile (i, j) holds atom i * sqrt(K) + j in every space, so the mosaics of a
coupled model line up atom by atom.

Usage:
    python manage.py render_atoms --input pair.cdlm --space 2 --output atoms2.pgm
"""

from django.core.management.base import BaseCommand, CommandError

from cli.services import RunSpec, render_mosaic, LIBRARY_ERRORS
from datapipe.services import write_pgm
from learner.persistence import load_model


class Command(BaseCommand):
    help = 'Render the atoms of one feature space as a PGM mosaic'

    def add_arguments(self, parser):
        parser.add_argument('--input', required=True, help='Model file')
        parser.add_argument('--space', type=int, default=1, help='Feature space, 1-based')
        parser.add_argument('--output', required=True, help='PGM file to write')

    def handle(self, *args, **options):
        try:
            spec = RunSpec.from_options('render_atoms', options, inputs=[options['input']])
            model = load_model(spec.inputs[0])
            mosaic = render_mosaic(model.dictionary(options['space']))
            write_pgm(options['output'], mosaic)
        except LIBRARY_ERRORS as exc:
            raise CommandError(str(exc)) from exc

        self.stdout.write(self.style.SUCCESS(
            f"{mosaic.shape[1]}x{mosaic.shape[0]} mosaic of space {options['space']} written to {options['output']}"
        ))
