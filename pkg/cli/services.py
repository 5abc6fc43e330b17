"""
Helpers shared by the management commands: flag parsing into a RunSpec,
loading training data, metrics CSV export, the benchmark suites and atom
mosaics.
"""

import csv
import logging
import time
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from baseline_ksvd.services import (
    learn_ksvd, ksvd_sweep, ksvd_update_atom, svd_update_atom, KsvdError,
)
from datapipe.domain import Dataset, Dictionary, DataPipeError
from datapipe.services import (
    read_pgm, extract_patches, mean_center, blur_pair, subsample_columns,
    synth_coupled, is_square, DEFAULT_BLUR_SIGMA,
)
from dict_update.services import sweep_spaces, DictionaryUpdateError
from learner.domain import (
    LearnConfig, CycleMetrics, CoupledModel, LearningError, SCHEDULE_MODES,
)
from learner.persistence import load_dataset, save_model, ModelFormatError
from learner.registry import RunRegistry
from learner.services import learn_joint, Clock
from sparse_coding.domain import InvalidCodeError
from sparse_coding.services import SparseCodingError

logger = logging.getLogger(__name__)

METHOD_PROPOSED = 'proposed'
METHOD_KSVD = 'ksvd'
METHODS = (METHOD_PROPOSED, METHOD_KSVD)

COMPARATOR_SVD = 'svd'
COMPARATOR_POWER = 'power'
COMPARATORS = (COMPARATOR_SVD, COMPARATOR_POWER)

DEFAULT_PATCH_SIZE = 8
DEFAULT_STRIDE = 4
DEFAULT_KSVD_CYCLES = 16

# Patches from images are expressed in 8-bit intensity units so that
# error thresholds match the usual 0..255 setting
DEFAULT_INTENSITY_SCALE = 255.0

METRICS_COLUMNS = ['cycle', 'wall_time_s', 'avg_nnz', 'avg_error', 'limit']
COMPARISON_COLUMNS = ['method'] + METRICS_COLUMNS
SCALING_COLUMNS = ['method', 'n', 'median_s', 'scale']

# The fast learner should come within ERROR_MARGIN of K-SVD's final error
# in at most TIME_BUDGET of K-SVD's total time
ERROR_MARGIN = 0.05
TIME_BUDGET = 0.7

MOSAIC_BACKGROUND = 0.0
CONSTANT_ATOM_LEVEL = 0.5

IMAGE_SUFFIXES = ('.pgm',)


def frozen_clock() -> float:
    return 0.0


def clock_for(options: Dict) -> Clock:
    """Wall-clock timer, or a frozen one under --no-wall-time."""
    return frozen_clock if options.get('no_wall_time') else time.perf_counter


# ---------------------------------------------------------------------------
# Flags
# ---------------------------------------------------------------------------

def add_learning_arguments(parser, cycles: int = 32) -> None:
    """Flags shared by learn, learn_coupled and benchmark."""
    parser.add_argument('--cycles', type=int, default=cycles, help='Learning cycles N')
    parser.add_argument('--max-nnz', type=int, default=32, help='Maximum nonzeros per signal T0')
    parser.add_argument('--eps', type=float, default=4.0, help='Residual-norm stop threshold')
    parser.add_argument('--natoms', type=int, default=256, help='Atoms per dictionary K')
    parser.add_argument('--schedule', choices=SCHEDULE_MODES, default='graduated')
    parser.add_argument('--seed', type=int, default=0)
    parser.add_argument('--workers', type=int, default=None, help='Coding threads (default: settings)')
    parser.add_argument('--no-wall-time', action='store_true', help='Record wall times as 0.0')
    parser.add_argument('--record', action='store_true', help='Store the run in the run registry')


def add_patch_arguments(parser) -> None:
    """Flags controlling how PGM inputs become patch datasets."""
    parser.add_argument('--patch-size', type=int, default=DEFAULT_PATCH_SIZE)
    parser.add_argument('--stride', type=int, default=DEFAULT_STRIDE)
    parser.add_argument('--sigma', type=float, default=DEFAULT_BLUR_SIGMA, help='Gaussian blur sigma')
    parser.add_argument('--count', type=int, default=None, help='Keep a seeded subsample of N patches')
    parser.add_argument('--no-center', action='store_true', help='Skip mean-centering of patches')
    parser.add_argument(
        '--intensity-scale', type=float, default=DEFAULT_INTENSITY_SCALE,
        help='Multiply [0, 1] image patches by this factor',
    )


def learn_config_from(options: Dict, cycles: Optional[int] = None) -> LearnConfig:
    return LearnConfig(
        cycles=options['cycles'] if cycles is None else cycles,
        max_nonzeros=options['max_nnz'],
        error_threshold=options['eps'],
        schedule_mode=options['schedule'],
        natoms=options['natoms'],
        seed=options['seed'],
        workers=options.get('workers'),
    )


@dataclass(frozen=True)
class RunSpec:
    """
    One command invocation: its files, learning configuration and patch
    extraction parameters. Input paths must exist.
    """
    subcommand: str
    inputs: Tuple[Path, ...] = ()
    outputs: Tuple[Path, ...] = ()
    config: Optional[LearnConfig] = None
    sigma: float = DEFAULT_BLUR_SIGMA
    patch_size: int = DEFAULT_PATCH_SIZE
    stride: int = DEFAULT_STRIDE
    count: Optional[int] = None
    center: bool = True
    scale: float = DEFAULT_INTENSITY_SCALE
    seed: int = 0

    def __post_init__(self):
        inputs = tuple(Path(p) for p in self.inputs if p is not None)
        outputs = tuple(Path(p) for p in self.outputs if p is not None)
        for path in inputs:
            if not path.exists():
                raise RunSpecError(f"Input {path} does not exist")
        if self.patch_size < 1 or self.stride < 1:
            raise RunSpecError(f"--patch-size and --stride must be >= 1 (got {self.patch_size}, {self.stride})")
        if not self.sigma > 0:
            raise RunSpecError(f"--sigma must be > 0, got {self.sigma}")
        if not self.scale > 0:
            raise RunSpecError(f"--intensity-scale must be > 0, got {self.scale}")
        if self.count is not None and self.count < 1:
            raise RunSpecError(f"--count must be >= 1, got {self.count}")
        object.__setattr__(self, 'inputs', inputs)
        object.__setattr__(self, 'outputs', outputs)

    @classmethod
    def from_options(cls, subcommand: str, options: Dict, inputs=(), outputs=(), config=None) -> 'RunSpec':
        return cls(
            subcommand=subcommand,
            inputs=tuple(inputs),
            outputs=tuple(outputs),
            config=config,
            sigma=options.get('sigma', DEFAULT_BLUR_SIGMA),
            patch_size=options.get('patch_size', DEFAULT_PATCH_SIZE),
            stride=options.get('stride', DEFAULT_STRIDE),
            count=options.get('count'),
            center=not options.get('no_center', False),
            scale=options.get('intensity_scale', DEFAULT_INTENSITY_SCALE),
            seed=options.get('seed', 0),
        )


# ---------------------------------------------------------------------------
# Training data
# ---------------------------------------------------------------------------

def is_image_path(path: Path) -> bool:
    return Path(path).suffix.lower() in IMAGE_SUFFIXES


def _prepare(datasets: Sequence[Dataset], spec: RunSpec) -> List[Dataset]:
    """Aligned subsample, intensity scaling, then per-space centering."""
    count = datasets[0].count
    keep = np.arange(count)
    if spec.count is not None and spec.count < count:
        keep = subsample_columns(count, spec.count, spec.seed)
    datasets = [Dataset(d.signals[:, keep] * spec.scale) for d in datasets]
    if spec.center:
        datasets = [mean_center(d) for d in datasets]
    return list(datasets)


def load_single(path: Path, spec: RunSpec) -> Dataset:
    """A PGM becomes its (centered) patches; anything else is read as a dataset file."""
    if is_image_path(path):
        image = read_pgm(path)
        return _prepare([extract_patches(image, spec.patch_size, spec.stride)], spec)[0]
    return load_dataset(path)


def load_pair(path1: Path, path2: Optional[Path], spec: RunSpec) -> Tuple[Dataset, Dataset]:
    """
    Two aligned feature spaces. A single PGM yields its (focused, blurred)
    pair; two PGMs are patched on the same grid; dataset files are read as is.
    """
    if path2 is None:
        if not is_image_path(path1):
            raise RunSpecError("--input2 is required unless --input is a PGM image")
        focused, blurred = blur_pair(read_pgm(path1), spec.patch_size, spec.stride, spec.sigma)
        data1, data2 = _prepare([focused, blurred], spec)
        return data1, data2

    if is_image_path(path1) and is_image_path(path2):
        patches = [
            extract_patches(read_pgm(p), spec.patch_size, spec.stride) for p in (path1, path2)
        ]
        if patches[0].count != patches[1].count:
            raise RunSpecError(
                f"Images give {patches[0].count} and {patches[1].count} patches; they must be the same size"
            )
        data1, data2 = _prepare(patches, spec)
        return data1, data2

    return load_single(path1, spec), load_single(path2, spec)


def synthetic_pair(options: Dict) -> Tuple[Dataset, Dataset, CoupledModel]:
    """Coupled synthetic datasets and their generating model."""
    data1, data2, dict1, dict2, code = synth_coupled(
        options['m'], options['k'], options['n'], options['sparsity'], options['seed']
    )
    return data1, data2, CoupledModel((dict1, dict2), code)


# ---------------------------------------------------------------------------
# Metrics CSV
# ---------------------------------------------------------------------------

def _number(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def metrics_rows(metrics: Sequence[CycleMetrics]) -> List[List[str]]:
    """One row per cycle with cumulative wall time."""
    rows = []
    elapsed = 0.0
    for m in metrics:
        elapsed += m.wall_time
        rows.append([
            _number(m.cycle),
            _number(elapsed),
            _number(m.avg_nonzeros),
            _number(m.avg_error),
            _number(m.schedule_limit),
        ])
    return rows


def write_metrics_csv(path: Path, metrics: Sequence[CycleMetrics]) -> None:
    with open(path, 'w', newline='') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(METRICS_COLUMNS)
        writer.writerows(metrics_rows(metrics))


def write_comparison_csv(path: Path, runs: Dict[str, Sequence[CycleMetrics]]) -> None:
    """Rows of every method interleaved by cycle, tagged with the method."""
    tagged = {method: metrics_rows(metrics) for method, metrics in runs.items()}
    longest = max((len(rows) for rows in tagged.values()), default=0)
    with open(path, 'w', newline='') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(COMPARISON_COLUMNS)
        for index in range(longest):
            for method, rows in tagged.items():
                if index < len(rows):
                    writer.writerow([method] + rows[index])


def read_metrics_csv(path: Path) -> List[Dict[str, str]]:
    with open(path, newline='') as handle:
        return list(csv.DictReader(handle))


# ---------------------------------------------------------------------------
# Run outputs
# ---------------------------------------------------------------------------

def export_run(
    model: CoupledModel,
    config: LearnConfig,
    method: str = METHOD_PROPOSED,
    model_path: Optional[Path] = None,
    metrics_path: Optional[Path] = None,
    record: bool = False,
    schedule_mode: Optional[str] = None,
):
    """
    Write the model file and metrics CSV that were asked for, and store the
    run in the registry under --record. Returns the TrainingRun or None.
    """
    if model_path is not None:
        save_model(model, model_path)
    if metrics_path is not None:
        write_metrics_csv(metrics_path, model.metrics)
    if not record:
        return None
    return RunRegistry().record(
        model,
        config,
        space_dims=[d.dim for d in model.dictionaries],
        method=method,
        schedule_mode=schedule_mode,
        model_path=model_path or '',
        metrics_path=metrics_path or '',
    )


# ---------------------------------------------------------------------------
# Benchmarks
# ---------------------------------------------------------------------------

def run_comparison(
    data: Dataset,
    config: LearnConfig,
    ksvd_cycles: int = DEFAULT_KSVD_CYCLES,
    clock: Clock = time.perf_counter,
) -> Dict[str, CoupledModel]:
    """
    Fast learner (configured schedule) against K-SVD (constant T0) on the
    same data and seed.
    """
    ksvd_config = LearnConfig(
        cycles=ksvd_cycles,
        max_nonzeros=config.max_nonzeros,
        error_threshold=config.error_threshold,
        schedule_mode='constant',
        natoms=config.natoms,
        seed=config.seed,
        workers=config.workers,
    )
    proposed = learn_joint([data], config, clock=clock)
    ksvd = learn_ksvd(data, ksvd_config, clock=clock)

    final_p, final_k = proposed.metrics[-1], ksvd.metrics[-1]
    logger.info(
        f"Comparison: proposed avg_nnz={final_p.avg_nonzeros:.3f} avg_error={final_p.avg_error:.6f}; "
        f"ksvd avg_nnz={final_k.avg_nonzeros:.3f} avg_error={final_k.avg_error:.6f}"
    )
    return {METHOD_PROPOSED: proposed, METHOD_KSVD: ksvd}


@dataclass(frozen=True)
class ComparisonVerdict:
    """
    Where the fast learner first comes within ERROR_MARGIN of K-SVD's final
    avg_error, with its cumulative time and avg_nnz at that cycle.

    `cycle` is None when it never gets there. A K-SVD total time of zero
    (frozen clock) leaves the time budget unchecked.
    """
    target_error: float
    ksvd_time: float
    ksvd_nonzeros: float
    cycle: Optional[int] = None
    time: Optional[float] = None
    nonzeros: Optional[float] = None

    @property
    def reached(self) -> bool:
        return self.cycle is not None

    @property
    def time_ratio(self) -> Optional[float]:
        if not self.reached or not self.ksvd_time > 0.0:
            return None
        return self.time / self.ksvd_time

    @property
    def passed(self) -> bool:
        if not self.reached:
            return False
        ratio = self.time_ratio
        return (ratio is None or ratio <= TIME_BUDGET) and self.nonzeros <= self.ksvd_nonzeros

    def rank(self) -> Tuple[bool, bool, float]:
        """Sort key, best verdict first."""
        ratio = self.time_ratio
        return not self.passed, not self.reached, ratio if ratio is not None else 0.0

    def summary(self) -> str:
        outcome = 'PASS' if self.passed else 'FAIL'
        if not self.reached:
            return f"proposed never reached avg_error {self.target_error:.6f}: {outcome}"
        ratio = self.time_ratio
        share = f"{ratio:.2f}x" if ratio is not None else 'untimed'
        return (
            f"proposed reached avg_error {self.target_error:.6f} at cycle {self.cycle}: "
            f"time {self.time:.3f}s ({share} of ksvd {self.ksvd_time:.3f}s), "
            f"avg_nnz {self.nonzeros:.3f} vs {self.ksvd_nonzeros:.3f}: {outcome}"
        )


def compare_runs(proposed: Sequence[CycleMetrics], ksvd: Sequence[CycleMetrics]) -> ComparisonVerdict:
    """
    Find the first fast-learner cycle with avg_error <= (1 + ERROR_MARGIN)
    times K-SVD's final avg_error. It passes when its cumulative time is at
    most TIME_BUDGET of K-SVD's total and its avg_nnz at most K-SVD's final.
    """
    if not proposed or not ksvd:
        raise RunSpecError('Both runs need recorded cycle metrics to be compared')

    final = ksvd[-1]
    reference = {
        'target_error': final.avg_error * (1.0 + ERROR_MARGIN),
        'ksvd_time': sum(m.wall_time for m in ksvd),
        'ksvd_nonzeros': final.avg_nonzeros,
    }
    elapsed = 0.0
    for m in proposed:
        elapsed += m.wall_time
        if m.avg_error <= reference['target_error']:
            return ComparisonVerdict(**reference, cycle=m.cycle, time=elapsed, nonzeros=m.avg_nonzeros)
    return ComparisonVerdict(**reference)


def _update_phases(comparator: str) -> Dict[str, Callable]:
    if comparator not in COMPARATORS:
        raise RunSpecError(f"Comparator must be one of {COMPARATORS}, got {comparator!r}")
    update = svd_update_atom if comparator == COMPARATOR_SVD else ksvd_update_atom
    return {
        METHOD_PROPOSED: sweep_spaces,
        comparator: partial(ksvd_sweep, update=update),
    }


def time_update_phase(phase: Callable, data: Dataset, dictionary: Dictionary, code, repeats: int) -> float:
    """Median seconds of one dictionary-update phase."""
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        phase([data], [dictionary], code)
        times.append(time.perf_counter() - start)
    return float(np.median(times))


def run_scaling(
    dim: int,
    natoms: int,
    count: int,
    sparsity: int,
    seed: int = 0,
    repeats: int = 5,
    comparator: str = COMPARATOR_SVD,
) -> List[Dict]:
    """
    Update-phase time at n and 2n signals for the fast rule and the SVD
    comparator, on synthetic data of the given sparsity.
    """
    if repeats < 1:
        raise RunSpecError(f"--repeats must be >= 1, got {repeats}")
    phases = _update_phases(comparator)

    problems = {}
    for n in (count, 2 * count):
        data, _, dictionary, _, code = synth_coupled(dim, natoms, n, sparsity, seed)
        problems[n] = (data, dictionary, code)

    results = []
    for method, phase in phases.items():
        base = None
        for n, (data, dictionary, code) in problems.items():
            median = time_update_phase(phase, data, dictionary, code, repeats)
            base = median if base is None else base
            scale = median / base if base > 0 else float('nan')
            results.append({'method': method, 'n': n, 'median_s': median, 'scale': scale})
            logger.info(f"Scaling {method}: n={n} median={median:.4f}s scale={scale:.3f}")
    return results


def write_scaling_csv(path: Path, results: Sequence[Dict]) -> None:
    with open(path, 'w', newline='') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(SCALING_COLUMNS)
        for r in results:
            writer.writerow([r['method'], _number(r['n']), _number(r['median_s']), _number(r['scale'])])


# ---------------------------------------------------------------------------
# Atom mosaics
# ---------------------------------------------------------------------------

def normalize_atom(atom: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; a constant atom is mid-gray."""
    low, high = float(atom.min()), float(atom.max())
    if not high > low:
        return np.full_like(atom, CONSTANT_ATOM_LEVEL)
    return (atom - low) / (high - low)


def render_mosaic(dictionary: Dictionary) -> np.ndarray:
    """
    Atoms as sqrt(dim) x sqrt(dim) tiles in a sqrt(K) x sqrt(K) grid, in
    column order, separated by 1-pixel black lines.
    """
    if not is_square(dictionary.dim) or not is_square(dictionary.natoms):
        raise MosaicShapeError(
            f"Cannot tile {dictionary.natoms} atoms of dim {dictionary.dim}: both must be perfect squares"
        )
    patch = int(np.sqrt(dictionary.dim) + 0.5)
    grid = int(np.sqrt(dictionary.natoms) + 0.5)
    side = grid * patch + (grid - 1)

    mosaic = np.full((side, side), MOSAIC_BACKGROUND)
    for t in range(dictionary.natoms):
        row, col = divmod(t, grid)
        top, left = row * (patch + 1), col * (patch + 1)
        mosaic[top:top + patch, left:left + patch] = normalize_atom(dictionary.atom(t)).reshape(patch, patch)
    return mosaic


class CliError(ValueError):
    """Base exception for command-line helpers."""
    pass


class RunSpecError(CliError):
    """Flags or input paths are invalid."""
    pass


class MosaicShapeError(CliError):
    """Atom dimension or count is not a perfect square."""
    pass


LIBRARY_ERRORS = (
    CliError,
    DataPipeError,
    SparseCodingError,
    InvalidCodeError,
    DictionaryUpdateError,
    LearningError,
    KsvdError,
    ModelFormatError,
    OSError,
)
