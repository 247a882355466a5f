# QuanTA - QTF Module
# Little-endian binary container for gate plans, dense matrices and LoRA adapters

import logging
import struct
from dataclasses import dataclass

import numpy as np

from quanta.circuit import GateSpec, QuantaPlan
from quanta.constants import (
    KIND_LORA, KIND_MATRIX, KIND_PLAN, QTF_MAGIC, QTF_NO_SEED, QTF_VERSION, QTF_WIDTH_CODES
)
from quanta.errors import QtfFormatError, QuantaError
from quanta.lora import LoraAdapter
from quanta.tensor_core import AxisShape

logger = logging.getLogger(__name__)

_HEADER = struct.Struct("<4sHBI")
_WIDTH_BY_DTYPE = {np.dtype(code): width for width, code in QTF_WIDTH_CODES.items()}


@dataclass(frozen=True, eq=False)
class QtfRecord:
    """
    One stored object with the seed that produced it

    Args:
        value (QuantaPlan | np.ndarray | LoraAdapter): Stored object
        seed (int | None): Seed recorded alongside, None if unknown
    """

    value: object
    seed: int = None

    @property
    def kind(self):
        if isinstance(self.value, QuantaPlan):
            return KIND_PLAN
        if isinstance(self.value, LoraAdapter):
            return KIND_LORA
        return KIND_MATRIX


def _u32s(values):
    values = [int(v) for v in values]
    return struct.pack(f"<I{len(values)}I", len(values), *values)


def _encode(record, dtype):
    """Bytes of one record: kind, dims, gates, payload lengths, payloads, then seed and meta"""
    value = record.value
    gates, meta = [], []
    if record.kind == KIND_PLAN:
        dims = value.in_shape.dims
        gates = value.pairs
        meta = [value.in_features, value.out_features, int(value.frozen)]
        for index, gate in enumerate(value.gates):
            shape = value.gate_input_shape(index)
            meta += list(gate.out_dims or (shape[gate.axes[0]], shape[gate.axes[1]]))
        payloads = value.tensors
    elif record.kind == KIND_LORA:
        dims = (value.out_dim, value.in_dim)
        meta = [value.rank]
        payloads = [value.A, value.B, np.array([value.alpha])]
    else:
        matrix = np.asarray(value)
        if matrix.ndim != 2:
            raise QtfFormatError(f"only 2-axis matrices can be stored, got shape {matrix.shape}")
        dims = matrix.shape
        payloads = [matrix]

    if any(np.iscomplexobj(p) for p in payloads):
        raise QtfFormatError("complex-valued records cannot be stored")

    if record.seed is not None and not 0 <= int(record.seed) < QTF_NO_SEED:
        raise QtfFormatError(f"seed {record.seed} does not fit the format")
    seed = QTF_NO_SEED if record.seed is None else int(record.seed)

    parts = [struct.pack("<B", record.kind), _u32s(dims)]
    parts.append(struct.pack("<I", len(gates)))
    parts += [struct.pack("<II", m, n) for m, n in gates]
    parts.append(struct.pack(f"<I{len(payloads)}Q", len(payloads), *(np.size(p) for p in payloads)))
    parts += [np.ascontiguousarray(p, dtype=dtype).tobytes() for p in payloads]
    # Trailer after the payloads
    parts += [struct.pack("<Q", seed), _u32s(meta)]
    return b"".join(parts)


def dumps(records, width=None):
    """
    Serialize records to bytes

    Args:
        records (list[QtfRecord | QuantaPlan | np.ndarray | LoraAdapter]): Objects to store
        width (str | None): "<f8" or "<f4"; by default "<f4" only when every payload is 32-bit

    Returns:
        bytes: The file contents
    """
    records = [r if isinstance(r, QtfRecord) else QtfRecord(r) for r in records]
    if width is None:
        width = "<f4" if records and all(_payload_dtype(r) == np.float32 for r in records) else "<f8"
    dtype = np.dtype(width)
    if dtype not in _WIDTH_BY_DTYPE:
        raise QtfFormatError(f"unsupported scalar width {width!r}")

    body = [_HEADER.pack(QTF_MAGIC, QTF_VERSION, _WIDTH_BY_DTYPE[dtype], len(records))]
    body += [_encode(r, dtype) for r in records]
    return b"".join(body)


def _payload_dtype(record):
    value = record.value
    if isinstance(value, QuantaPlan):
        return value.dtype
    if isinstance(value, LoraAdapter):
        return np.result_type(value.A, value.B)
    return np.asarray(value).dtype


class _Reader:
    """Cursor over a byte buffer that reports truncation as a format error"""

    def __init__(self, data):
        self.view = memoryview(data)
        self.pos = 0

    def take(self, size):
        if self.pos + size > len(self.view):
            raise QtfFormatError(f"file ends at byte {len(self.view)}, needed {self.pos + size}")
        chunk = self.view[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def u32s(self):
        (count,) = self.unpack("<I")
        return self.unpack(f"<{count}I")

    def array(self, count, dtype):
        return np.frombuffer(self.take(count * dtype.itemsize), dtype=dtype).copy()


def _decode(reader, dtype):
    (kind,) = reader.unpack("<B")
    if kind not in (KIND_PLAN, KIND_MATRIX, KIND_LORA):
        raise QtfFormatError(f"unknown record kind {kind}")
    dims = reader.u32s()
    (gate_count,) = reader.unpack("<I")
    gates = [reader.unpack("<II") for _ in range(gate_count)]
    (payload_count,) = reader.unpack("<I")
    lengths = reader.unpack(f"<{payload_count}Q")
    payloads = [reader.array(n, dtype) for n in lengths]
    (seed,) = reader.unpack("<Q")
    meta = reader.u32s()
    seed = None if seed == QTF_NO_SEED else seed

    if kind == KIND_PLAN:
        if len(meta) != 3 + 2 * gate_count or payload_count != gate_count:
            raise QtfFormatError(f"plan record declares {gate_count} gates but carries "
                                 f"{len(meta)} meta values and {payload_count} payloads")
        shape, specs = AxisShape(dims), []
        for index, ((m, n), payload) in enumerate(zip(gates, payloads)):
            if not (m < shape.n_axes and n < shape.n_axes):
                raise QtfFormatError(f"gate {index} axes {(m, n)} out of range for {shape}")
            out_dims = tuple(meta[3 + 2 * index:5 + 2 * index])
            rows, cols = out_dims[0] * out_dims[1], shape[m] * shape[n]
            if payload.size != rows * cols:
                raise QtfFormatError(f"gate {index} payload has {payload.size} entries, expected {rows * cols}")
            square = out_dims == (shape[m], shape[n])
            specs.append(GateSpec((m, n), payload.reshape(rows, cols), index, None if square else out_dims))
            shape = shape.replace(m, out_dims[0]).replace(n, out_dims[1])
        value = QuantaPlan(AxisShape(dims), specs, None, meta[0], meta[1], bool(meta[2]))
    elif kind == KIND_MATRIX:
        if len(dims) != 2 or payload_count != 1 or lengths[0] != dims[0] * dims[1]:
            raise QtfFormatError(f"matrix record of dims {dims} has payload lengths {lengths}")
        value = payloads[0].reshape(dims)
    else:
        if len(dims) != 2 or len(meta) != 1 or payload_count != 3:
            raise QtfFormatError("LoRA record needs two dims, a rank and three payloads")
        (out_dim, in_dim), (rank,) = dims, meta
        if lengths != (rank * in_dim, out_dim * rank, 1):
            raise QtfFormatError(f"LoRA payload lengths {lengths} do not match rank {rank}, dims {dims}")
        value = LoraAdapter(payloads[0].reshape(rank, in_dim), payloads[1].reshape(out_dim, rank),
                            float(payloads[2][0]))
    return QtfRecord(value, seed)


def loads(data):
    """
    Parse QTF bytes

    Returns:
        list[QtfRecord]: Stored records in file order
    """
    reader = _Reader(data)
    magic, version, width, count = reader.unpack(_HEADER.format)
    if magic != QTF_MAGIC:
        raise QtfFormatError(f"bad magic {bytes(magic)!r}")
    if version != QTF_VERSION:
        raise QtfFormatError(f"unsupported version {version}")
    if width not in QTF_WIDTH_CODES:
        raise QtfFormatError(f"unknown scalar width code {width}")

    dtype = np.dtype(QTF_WIDTH_CODES[width])
    try:
        records = [_decode(reader, dtype) for _ in range(count)]
    except QtfFormatError:
        raise
    except QuantaError as e:
        raise QtfFormatError(f"record does not describe a valid object: {e}") from e

    if reader.pos != len(reader.view):
        raise QtfFormatError(f"{len(reader.view) - reader.pos} trailing bytes after {count} records")
    return records


def write_qtf(path, records, width=None):
    """Write records to a QTF file"""
    data = dumps(records, width)
    with open(path, "wb") as file:
        file.write(data)
    logger.info("wrote %d record(s) to %s", len(records), path)


def read_qtf(path):
    """Read all records from a QTF file"""
    with open(path, "rb") as file:
        return loads(file.read())
