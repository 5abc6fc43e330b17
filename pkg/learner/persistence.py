"""
Binary model and dataset files.

All integers are u32 and all reals IEEE-754 f64, little-endian.

Model ("CDLM"):
    magic, version
    [version 2 only] dictionary count
    per dictionary: m, K, m*K entries column-major
    code: n, then per column nnz followed by nnz (index u32, value f64) pairs
    metrics: count, then (cycle u32, wall_time f64, avg_nnz f64, avg_err f64, limit u32)

Version 1 always holds exactly two dictionaries; version 2 is written for
any other dictionary count.

Dataset ("CDLD"):
    magic, version, m, n, m*n entries column-major, means flag, [n means]
"""

import struct
from pathlib import Path
from typing import List, Union

import numpy as np
from scipy import sparse

from datapipe.domain import Dataset, Dictionary
from sparse_coding.domain import SparseCode
from .domain import CoupledModel, CycleMetrics

MODEL_MAGIC = b'CDLM'
DATASET_MAGIC = b'CDLD'

MODEL_VERSION_PAIR = 1
MODEL_VERSION_COUNTED = 2
DATASET_VERSION = 1

U32_MAX = 2 ** 32 - 1

# Largest matrix a file may declare
MAX_MATRIX_ENTRIES = 2 ** 31 - 1

PAIR_DTYPE = np.dtype([('index', '<u4'), ('value', '<f8')])
METRIC_DTYPE = np.dtype([
    ('cycle', '<u4'),
    ('wall_time', '<f8'),
    ('avg_nonzeros', '<f8'),
    ('avg_error', '<f8'),
    ('schedule_limit', '<u4'),
])

PathLike = Union[str, Path]


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

def _u32(value: int, what: str) -> bytes:
    if not 0 <= value <= U32_MAX:
        raise DimensionOverflowError(f"{what}={value} does not fit in u32")
    return struct.pack('<I', value)


def _matrix_block(matrix: np.ndarray, what: str) -> bytes:
    rows, cols = matrix.shape
    return (
        _u32(rows, f"{what} rows")
        + _u32(cols, f"{what} columns")
        + np.asarray(matrix, dtype='<f8').tobytes(order='F')
    )


def _code_block(code: SparseCode) -> bytes:
    chunks = [_u32(code.count, 'signal count')]
    for i in range(code.count):
        indices, values = code.column(i)
        pairs = np.empty(indices.shape[0], dtype=PAIR_DTYPE)
        pairs['index'] = indices
        pairs['value'] = values
        chunks.append(_u32(indices.shape[0], 'column nnz'))
        chunks.append(pairs.tobytes())
    return b''.join(chunks)


def _metrics_block(metrics) -> bytes:
    records = np.empty(len(metrics), dtype=METRIC_DTYPE)
    for row, m in enumerate(metrics):
        records[row] = (m.cycle, m.wall_time, m.avg_nonzeros, m.avg_error, m.schedule_limit)
    return _u32(len(metrics), 'metric count') + records.tobytes()


def encode_model(model: CoupledModel) -> bytes:
    if model.spaces == 2:
        header = MODEL_MAGIC + _u32(MODEL_VERSION_PAIR, 'version')
    else:
        header = MODEL_MAGIC + _u32(MODEL_VERSION_COUNTED, 'version') + _u32(model.spaces, 'dictionary count')

    body = b''.join(_matrix_block(d.atoms, 'dictionary') for d in model.dictionaries)
    return header + body + _code_block(model.code) + _metrics_block(model.metrics)


def encode_dataset(data: Dataset) -> bytes:
    parts = [DATASET_MAGIC, _u32(DATASET_VERSION, 'version'), _matrix_block(data.signals, 'dataset')]
    if data.means is None:
        parts.append(_u32(0, 'means flag'))
    else:
        parts.append(_u32(1, 'means flag'))
        parts.append(np.asarray(data.means, dtype='<f8').tobytes())
    return b''.join(parts)


def save_model(model: CoupledModel, path: PathLike) -> None:
    Path(path).write_bytes(encode_model(model))


def save_dataset(data: Dataset, path: PathLike) -> None:
    Path(path).write_bytes(encode_dataset(data))


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

class _Reader:
    """Cursor over a byte payload; running short raises TruncatedPayloadError."""

    def __init__(self, payload: bytes):
        self.payload = memoryview(payload)
        self.offset = 0

    def take(self, nbytes: int, what: str) -> memoryview:
        end = self.offset + nbytes
        if end > len(self.payload):
            raise TruncatedPayloadError(
                f"Payload ends while reading {what} ({len(self.payload) - self.offset} of {nbytes} bytes left)"
            )
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack('<I', self.take(4, what))[0]

    def array(self, dtype: np.dtype, count: int, what: str) -> np.ndarray:
        dtype = np.dtype(dtype)
        return np.frombuffer(self.take(dtype.itemsize * count, what), dtype=dtype).copy()

    def finish(self) -> None:
        if self.offset != len(self.payload):
            raise MalformedHeaderError(f"{len(self.payload) - self.offset} trailing bytes after payload")


def _read_header(reader: _Reader, magic: bytes) -> int:
    found = bytes(reader.take(len(magic), 'magic'))
    if found != magic:
        raise MalformedHeaderError(f"Bad magic {found!r}, expected {magic!r}")
    return reader.u32('version')


def _read_matrix(reader: _Reader, what: str) -> np.ndarray:
    rows = reader.u32(f"{what} rows")
    cols = reader.u32(f"{what} columns")
    if rows == 0 or cols == 0:
        raise MalformedHeaderError(f"{what} declares an empty {rows}x{cols} matrix")
    if rows * cols > MAX_MATRIX_ENTRIES:
        raise DimensionOverflowError(f"{what} declares {rows}x{cols} entries")
    entries = reader.array('<f8', rows * cols, f"{what} entries")
    return entries.astype(np.float64).reshape((rows, cols), order='F')


def _read_code(reader: _Reader, natoms: int) -> SparseCode:
    count = reader.u32('signal count')
    if count > MAX_MATRIX_ENTRIES:
        raise DimensionOverflowError(f"Code declares {count} signals")

    lengths = np.zeros(count, dtype=np.int64)
    index_chunks: List[np.ndarray] = []
    value_chunks: List[np.ndarray] = []
    for i in range(count):
        nnz = reader.u32(f"column {i} nnz")
        if nnz > natoms:
            raise DimensionOverflowError(f"Column {i} declares {nnz} entries for {natoms} atoms")
        pairs = reader.array(PAIR_DTYPE, nnz, f"column {i} pairs")
        indices = pairs['index'].astype(np.int64)
        if indices.size and (indices.max() >= natoms or np.any(np.diff(indices) <= 0)):
            raise MalformedHeaderError(f"Column {i} has out-of-range or unsorted atom indices")
        lengths[i] = nnz
        index_chunks.append(indices)
        value_chunks.append(pairs['value'].astype(np.float64))

    indptr = np.concatenate(([0], np.cumsum(lengths)))
    indices = np.concatenate(index_chunks) if index_chunks else np.empty(0, dtype=np.int64)
    values = np.concatenate(value_chunks) if value_chunks else np.empty(0)
    return SparseCode(sparse.csc_matrix((values, indices, indptr), shape=(natoms, count)))


def _read_metrics(reader: _Reader) -> List[CycleMetrics]:
    count = reader.u32('metric count')
    records = reader.array(METRIC_DTYPE, count, 'metrics')
    return [
        CycleMetrics(
            cycle=int(r['cycle']),
            wall_time=float(r['wall_time']),
            avg_nonzeros=float(r['avg_nonzeros']),
            avg_error=float(r['avg_error']),
            schedule_limit=int(r['schedule_limit']),
        )
        for r in records
    ]


def decode_model(payload: bytes) -> CoupledModel:
    reader = _Reader(payload)
    version = _read_header(reader, MODEL_MAGIC)
    if version == MODEL_VERSION_PAIR:
        spaces = 2
    elif version == MODEL_VERSION_COUNTED:
        spaces = reader.u32('dictionary count')
        if spaces == 0:
            raise MalformedHeaderError("Model declares no dictionaries")
    else:
        raise MalformedHeaderError(f"Unsupported model version {version}")

    matrices = [_read_matrix(reader, f"dictionary {s + 1}") for s in range(spaces)]
    natoms = {m.shape[1] for m in matrices}
    if len(natoms) != 1:
        raise MalformedHeaderError(f"Dictionaries disagree on the atom count: {sorted(natoms)}")

    code = _read_code(reader, natoms.pop())
    metrics = _read_metrics(reader)
    reader.finish()

    return CoupledModel(tuple(Dictionary(m) for m in matrices), code, tuple(metrics))


def decode_dataset(payload: bytes) -> Dataset:
    reader = _Reader(payload)
    version = _read_header(reader, DATASET_MAGIC)
    if version != DATASET_VERSION:
        raise MalformedHeaderError(f"Unsupported dataset version {version}")

    signals = _read_matrix(reader, 'dataset')
    flag = reader.u32('means flag')
    if flag not in (0, 1):
        raise MalformedHeaderError(f"Bad means flag {flag}")
    means = reader.array('<f8', signals.shape[1], 'means').astype(np.float64) if flag else None
    reader.finish()
    return Dataset(signals, means=means)


def load_model(path: PathLike) -> CoupledModel:
    return decode_model(Path(path).read_bytes())


def load_dataset(path: PathLike) -> Dataset:
    return decode_dataset(Path(path).read_bytes())


class ModelFormatError(ValueError):
    """Base exception for unreadable model and dataset files."""
    pass


class MalformedHeaderError(ModelFormatError):
    """Magic, version or structural fields are invalid."""
    pass


class DimensionOverflowError(ModelFormatError):
    """Declared dimensions exceed what the format allows."""
    pass


class TruncatedPayloadError(ModelFormatError):
    """The file ends before the declared payload."""
    pass
