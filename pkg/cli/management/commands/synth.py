"""
Management command to write coupled training datasets.

Synthetic mode draws two random dictionaries and one shared sparse code and
also writes the generating model. Blur-pair mode extracts aligned patches
from a PGM image and from its Gaussian-blurred copy.

Usage:
    python manage.py synth --mode synthetic --m 16 --k 32 --n 500 --sparsity 3 --seed 1 --output data/
    python manage.py synth --mode blurpair --input photo.pgm --sigma 2 --patch-size 8 --stride 4 --output data/
"""

from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from cli.services import (
    RunSpec, RunSpecError, add_patch_arguments, load_pair, synthetic_pair, LIBRARY_ERRORS,
)
from learner.persistence import save_dataset, save_model

DATASET1_NAME = 'x1.cdld'
DATASET2_NAME = 'x2.cdld'
TRUTH_NAME = 'truth.cdlm'


class Command(BaseCommand):
    help = 'Write a pair of coupled datasets (synthetic or focused/blurred patches)'

    def add_arguments(self, parser):
        parser.add_argument('--mode', choices=['synthetic', 'blurpair'], default='synthetic')
        parser.add_argument('--input', help='PGM image (blurpair mode)')
        parser.add_argument('--output', required=True, help='Output directory')
        parser.add_argument('--m', type=int, default=16, help='Signal dimension (synthetic mode)')
        parser.add_argument('--k', type=int, default=32, help='Atoms per dictionary (synthetic mode)')
        parser.add_argument('--n', type=int, default=500, help='Signal count (synthetic mode)')
        parser.add_argument('--sparsity', type=int, default=3, help='Nonzeros per signal (synthetic mode)')
        parser.add_argument('--seed', type=int, default=0)
        add_patch_arguments(parser)

    def handle(self, *args, **options):
        output = Path(options['output'])
        try:
            output.mkdir(parents=True, exist_ok=True)
            if options['mode'] == 'synthetic':
                self.write_synthetic(output, options)
            else:
                self.write_blur_pair(output, options)
        except LIBRARY_ERRORS as exc:
            raise CommandError(str(exc)) from exc

        self.stdout.write(self.style.SUCCESS(f"Datasets written to {output}"))

    def write_synthetic(self, output: Path, options):
        data1, data2, truth = synthetic_pair(options)
        save_dataset(data1, output / DATASET1_NAME)
        save_dataset(data2, output / DATASET2_NAME)
        save_model(truth, output / TRUTH_NAME)
        self.stdout.write(
            f"Synthetic pair: dims {data1.dim}/{data2.dim}, {data1.count} signals, "
            f"{truth.natoms} atoms, sparsity {options['sparsity']}"
        )

    def write_blur_pair(self, output: Path, options):
        if not options['input']:
            raise RunSpecError('--input is required in blurpair mode')
        spec = RunSpec.from_options('synth', options, inputs=[options['input']])
        data1, data2 = load_pair(spec.inputs[0], None, spec)

        save_dataset(data1, output / DATASET1_NAME)
        save_dataset(data2, output / DATASET2_NAME)
        self.stdout.write(f"Blur pair: {data1.count} aligned patch pairs of dim {data1.dim}")
