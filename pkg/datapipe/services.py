"""
Signal ingestion and synthesis services.

This module turns grayscale images into patch datasets, builds blurred
counterparts for coupled training, constructs the overcomplete DCT
dictionary used for initialization, and generates noiseless coupled data
with a known ground truth.
"""

import logging
import math
import re
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image as PILImage, UnidentifiedImageError
from scipy import ndimage
from scipy import sparse

from sparse_coding.domain import SparseCode
from .domain import (
    Image, Dataset, Dictionary,
    InvalidImageError, PatchSizeError, DictionaryShapeError,
)

logger = logging.getLogger(__name__)

PGM_MAXVAL = 255

# Magic, width, height and maxval; comments may sit between the fields
PGM_HEADER = re.compile(rb'(P\d)(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)\s')
PGM_HEADER_BYTES = 4096

# Overcompleteness used when the caller does not choose K
DEFAULT_OVERCOMPLETENESS = 4

DEFAULT_BLUR_SIGMA = 2.0


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

def read_pgm(path: Union[str, Path]) -> Image:
    """
    Read an 8-bit binary PGM (P5, maxval 255) and rescale it to [0, 1].
    """
    with open(path, 'rb') as handle:
        header = PGM_HEADER.match(handle.read(PGM_HEADER_BYTES))
    if header is None:
        raise InvalidImageError(f"{path}: not a PGM file")
    magic, maxval = header.group(1), int(header.group(4))
    if magic != b'P5' or maxval != PGM_MAXVAL:
        raise InvalidImageError(
            f"{path}: expected binary PGM with maxval {PGM_MAXVAL}, got {magic.decode()} with maxval {maxval}"
        )

    try:
        with PILImage.open(path) as handle:
            if handle.format != 'PPM' or handle.mode != 'L':
                raise InvalidImageError(
                    f"{path}: expected an 8-bit grayscale PGM, got {handle.format}/{handle.mode}"
                )
            pixels = np.asarray(handle, dtype=np.float64)
    except UnidentifiedImageError as exc:
        raise InvalidImageError(f"{path}: not a readable image") from exc

    logger.debug(f"Read {pixels.shape[1]}x{pixels.shape[0]} image from {path}")
    return Image(pixels / PGM_MAXVAL)


def write_pgm(path: Union[str, Path], samples: np.ndarray) -> None:
    """Write intensities in [0, 1] as an 8-bit binary PGM."""
    levels = np.rint(np.clip(samples, 0.0, 1.0) * PGM_MAXVAL).astype(np.uint8)
    PILImage.fromarray(levels).save(path, format='PPM')


def gaussian_blur(image: Image, sigma: float = DEFAULT_BLUR_SIGMA) -> Image:
    """
    Separable Gaussian blur with edge replication.

    The kernel spans ceil(3 * sigma) pixels on each side and sums to one.
    """
    if sigma <= 0:
        raise InvalidImageError(f"Blur sigma must be positive, got {sigma}")

    kernel = gaussian_kernel(sigma)
    blurred = ndimage.correlate1d(image.samples, kernel, axis=0, mode='nearest')
    blurred = ndimage.correlate1d(blurred, kernel, axis=1, mode='nearest')
    return Image(np.clip(blurred, 0.0, 1.0))


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-offsets ** 2 / (2.0 * sigma ** 2))
    return kernel / kernel.sum()


# ---------------------------------------------------------------------------
# Patches
# ---------------------------------------------------------------------------

def extract_patches(image: Image, size: int, stride: int) -> Dataset:
    """
    Vectorize every size x size patch at the given stride.

    Patches are enumerated left-to-right, top-to-bottom; each column holds
    one patch in row-major order, so dim == size ** 2.
    """
    if size < 1 or stride < 1:
        raise PatchSizeError(f"Patch size and stride must be >= 1 (size={size}, stride={stride})")
    if size > min(image.width, image.height):
        raise PatchSizeError(
            f"Patch size {size} exceeds image {image.width}x{image.height}"
        )

    windows = sliding_window_view(image.samples, (size, size))[::stride, ::stride]
    columns = windows.reshape(-1, size * size).T
    return Dataset(np.ascontiguousarray(columns))


def patch_grid(height: int, width: int, size: int, stride: int) -> Tuple[int, int]:
    """Number of patch rows and columns produced by `extract_patches`."""
    return (height - size) // stride + 1, (width - size) // stride + 1


def assemble_patches(data: Dataset, height: int, width: int, size: int, stride: int) -> np.ndarray:
    """
    Place patches back on a height x width canvas, averaging overlaps.

    Pixels that no patch covers are NaN.
    """
    rows, cols = patch_grid(height, width, size, stride)
    if data.dim != size * size or data.count != rows * cols:
        raise PatchSizeError(
            f"Dataset {data.dim}x{data.count} does not match a {rows}x{cols} grid of {size}x{size} patches"
        )

    total = np.zeros((height, width))
    hits = np.zeros((height, width))
    patches = data.signals.T.reshape(rows, cols, size, size)
    for r in range(rows):
        for c in range(cols):
            top, left = r * stride, c * stride
            total[top:top + size, left:left + size] += patches[r, c]
            hits[top:top + size, left:left + size] += 1

    with np.errstate(invalid='ignore', divide='ignore'):
        return np.where(hits > 0, total / hits, np.nan)


def mean_center(data: Dataset) -> Dataset:
    """
    Subtract each signal's mean. Removed means accumulate in `means`, so
    centering an already centered dataset keeps the round trip exact.
    """
    means = data.signals.mean(axis=0)
    centered = data.signals - means[np.newaxis, :]
    if data.means is not None:
        means = data.means + means
    return Dataset(centered, means=means)


def blur_pair(image: Image, size: int, stride: int, sigma: float = DEFAULT_BLUR_SIGMA) -> Tuple[Dataset, Dataset]:
    """
    Spatially aligned (focused, blurred) patch datasets from one image.
    The blur is applied to the whole image before extraction.
    """
    focused = extract_patches(image, size, stride)
    blurred = extract_patches(gaussian_blur(image, sigma), size, stride)
    return focused, blurred


def subsample_columns(count: int, keep: int, seed: int) -> np.ndarray:
    """Sorted, seeded choice of `keep` column indices out of `count`."""
    if keep >= count:
        return np.arange(count)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(count, size=keep, replace=False))


# ---------------------------------------------------------------------------
# Dictionaries
# ---------------------------------------------------------------------------

def is_square(value: int) -> bool:
    return value >= 1 and math.isqrt(value) ** 2 == value


def dct_dictionary(dim: int, natoms: int) -> Dictionary:
    """
    Overcomplete separable 2-D DCT dictionary.

    Atoms are outer products of sqrt(natoms) 1-D DCT-II vectors of length
    sqrt(dim); every 1-D vector except the DC one is mean-removed before
    normalization. When natoms == dim the result is the orthonormal 2-D DCT.
    """
    if natoms < dim:
        raise DictionaryShapeError(f"DCT dictionary needs natoms >= dim (got {natoms} < {dim})")
    if not (is_square(dim) and is_square(natoms)):
        raise DictionaryShapeError(f"2-D DCT needs square dim and natoms, got {dim} and {natoms}")

    length, count = math.isqrt(dim), math.isqrt(natoms)
    samples = np.arange(length, dtype=np.float64)[:, np.newaxis]
    freqs = np.arange(count, dtype=np.float64)[np.newaxis, :]
    basis = np.cos(np.pi * freqs * (2 * samples + 1) / (2 * count))
    basis[:, 1:] -= basis[:, 1:].mean(axis=0)

    norms = np.linalg.norm(basis, axis=0)
    if np.any(norms == 0.0):
        raise DictionaryShapeError(f"Degenerate DCT basis for dim={dim}, natoms={natoms}")
    basis /= norms

    return Dictionary.normalized(np.kron(basis, basis))


def random_dictionary(dim: int, natoms: int, seed: int) -> Dictionary:
    """I.i.d. standard normal columns scaled to unit norm."""
    rng = np.random.default_rng(seed)
    return Dictionary.normalized(rng.standard_normal((dim, natoms)))


def initial_dictionary(dim: int, natoms: int, seed: int) -> Dictionary:
    """
    DCT dictionary when the sizes allow it, otherwise seeded random atoms.
    """
    try:
        return dct_dictionary(dim, natoms)
    except DictionaryShapeError as exc:
        logger.warning(f"DCT initialization unavailable ({exc}); using random atoms (seed={seed})")
        return random_dictionary(dim, natoms, seed)


# ---------------------------------------------------------------------------
# Ground-truth synthesis
# ---------------------------------------------------------------------------

def synth_coupled(
    dim: int,
    natoms: int,
    nsignals: int,
    sparsity: int,
    seed: int,
) -> Tuple[Dataset, Dataset, Dictionary, Dictionary, SparseCode]:
    """
    Noiseless coupled data X1 = D1 G, X2 = D2 G with a shared code G.

    Both dictionaries have normalized i.i.d. Gaussian columns. Each code
    column has `sparsity` nonzeros on a random support, magnitudes uniform
    on [0.5, 1.5] with random signs.
    """
    if sparsity > dim or sparsity > natoms or sparsity < 1:
        raise DictionaryShapeError(f"Sparsity {sparsity} must lie in [1, min(dim, natoms)]")
    if natoms < dim:
        raise DictionaryShapeError(f"Need natoms >= dim (got {natoms} < {dim})")

    rng = np.random.default_rng(seed)
    dict1 = Dictionary.normalized(rng.standard_normal((dim, natoms)))
    dict2 = Dictionary.normalized(rng.standard_normal((dim, natoms)))

    indices = np.empty((nsignals, sparsity), dtype=np.int64)
    for i in range(nsignals):
        indices[i] = np.sort(rng.choice(natoms, size=sparsity, replace=False))
    magnitudes = rng.uniform(0.5, 1.5, size=(nsignals, sparsity))
    signs = rng.choice(np.array([-1.0, 1.0]), size=(nsignals, sparsity))

    matrix = sparse.csc_matrix(
        ((magnitudes * signs).reshape(-1), indices.reshape(-1), np.arange(nsignals + 1) * sparsity),
        shape=(natoms, nsignals),
    )
    code = SparseCode(matrix)

    data1 = Dataset(code.reconstruct(dict1.atoms))
    data2 = Dataset(code.reconstruct(dict2.atoms))
    return data1, data2, dict1, dict2, code
