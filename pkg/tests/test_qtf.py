import struct

import numpy as np
import pytest

from quanta.circuit import QuantaPlan, build_plan, build_rect_plan, init_zero_delta
from quanta.constants import KIND_LORA, KIND_MATRIX, KIND_PLAN, QTF_MAGIC
from quanta.errors import QtfFormatError
from quanta.lora import LoraAdapter, init_lora
from quanta.qtf import QtfRecord, dumps, loads, read_qtf, write_qtf
from quanta.tensor_core import AxisShape


def random_shape(rng):
    while True:
        dims = tuple(int(d) for d in rng.integers(2, 5, size=int(rng.integers(2, 5))))
        if np.prod(dims) <= 64:
            return AxisShape(dims)


def random_record(rng, dtype):
    seed = None if rng.random() < 0.3 else int(rng.integers(0, 2 ** 63))
    kind = int(rng.integers(0, 5))
    if kind == 0:
        plan = build_plan(random_shape(rng), seed=int(rng.integers(1000)), rounds=int(rng.integers(1, 3)),
                          dtype=dtype)
        value = plan if rng.random() < 0.5 else init_zero_delta(plan)[1]
    elif kind == 1 and dtype == np.float64:
        in_shape = random_shape(rng)
        out_dims = list(in_shape.dims)
        out_dims[0] = int(rng.integers(2, 5))
        value = build_rect_plan(in_shape, AxisShape(tuple(out_dims)), seed=int(rng.integers(1000)),
                                in_features=in_shape.total - 1)
    elif kind == 2 and dtype == np.float64:
        value = QuantaPlan(random_shape(rng))
    elif kind == 3:
        value = rng.standard_normal(tuple(int(d) for d in rng.integers(1, 9, size=2))).astype(dtype)
    else:
        adapter = init_lora(int(rng.integers(1, 9)), int(rng.integers(1, 9)), int(rng.integers(1, 4)),
                            alpha=8.0, dtype=dtype)
        value = adapter.with_factors(adapter.A, rng.standard_normal(adapter.B.shape).astype(dtype))
    return QtfRecord(value, seed)


def assert_same_record(got, want):
    assert got.kind == want.kind
    assert got.seed == want.seed
    a, b = got.value, want.value
    if want.kind == KIND_PLAN:
        assert (a.in_shape, a.out_shape) == (b.in_shape, b.out_shape)
        assert (a.in_features, a.out_features, a.frozen) == (b.in_features, b.out_features, b.frozen)
        assert a.pairs == b.pairs
        for ta, tb in zip(a.tensors, b.tensors):
            assert ta.dtype == tb.dtype
            np.testing.assert_array_equal(ta, tb)
    elif want.kind == KIND_LORA:
        np.testing.assert_array_equal(a.A, b.A)
        np.testing.assert_array_equal(a.B, b.B)
        assert a.alpha == b.alpha
    else:
        assert a.dtype == b.dtype
        np.testing.assert_array_equal(a, b)


def test_randomized_files_are_stable(rng):
    for trial in range(500):
        dtype = np.float32 if trial % 4 == 3 else np.float64
        records = [random_record(rng, dtype) for _ in range(int(rng.integers(1, 4)))]
        data = dumps(records)
        decoded = loads(data)
        assert len(decoded) == len(records)
        for got, want in zip(decoded, records):
            assert_same_record(got, want)
        assert dumps(decoded) == data, trial


def test_header_layout():
    data = dumps([QtfRecord(np.eye(2), 7)])
    magic, version, width, count = struct.unpack("<4sHBI", data[:11])
    assert (magic, version, width, count) == (QTF_MAGIC, 1, 0, 1)
    assert data[11] == KIND_MATRIX
    assert struct.unpack("<III", data[12:24]) == (2, 2, 2)
    assert struct.unpack("<IIQ", data[24:40]) == (0, 1, 4)
    assert data[40:72] == np.eye(2).astype("<f8").tobytes()
    assert struct.unpack("<QI", data[72:]) == (7, 0)

    narrow = dumps([np.eye(2, dtype=np.float32)])
    assert narrow[6] == 1
    assert len(data) - len(narrow) == 16


def test_plan_record_field_order():
    plan = build_plan("2-2", seed=1)
    data = dumps([QtfRecord(plan, 5)])
    assert data[11] == KIND_PLAN
    assert struct.unpack("<III", data[12:24]) == (2, 2, 2)
    assert struct.unpack("<IIIIQ", data[24:48]) == (1, 0, 1, 1, 16)
    assert data[48:176] == plan.tensors[0].astype("<f8").tobytes()
    assert struct.unpack("<Q6I", data[176:]) == (5, 5, 4, 4, 0, 2, 2)


def test_unseeded_records():
    records = loads(dumps([QtfRecord(np.eye(2), None), build_plan("2-2")]))
    assert [r.seed for r in records] == [None, None]
    assert dumps(records) == dumps([np.eye(2), build_plan("2-2")])
    assert loads(dumps([QtfRecord(np.eye(2), 0)]))[0].seed == 0


def test_explicit_width_narrows_payloads():
    plan = build_plan("2-2-2", seed=1)
    (record,) = loads(dumps([plan], width="<f4"))
    assert record.value.dtype == np.float32
    np.testing.assert_allclose(record.value.tensors[0], plan.tensors[0], rtol=1e-6)
    with pytest.raises(QtfFormatError):
        dumps([plan], width="<f2")


def test_bare_values_become_records():
    records = loads(dumps([build_plan("2-2"), np.ones((1, 3)), LoraAdapter(np.ones((1, 2)), np.ones((2, 1)))]))
    assert [r.kind for r in records] == [KIND_PLAN, KIND_MATRIX, KIND_LORA]
    assert all(r.seed is None for r in records)


def test_empty_file():
    assert loads(dumps([])) == []


def test_trailing_bytes_rejected():
    data = dumps([np.eye(3)])
    with pytest.raises(QtfFormatError):
        loads(data + b"\x00")


def test_bad_magic_and_version():
    data = bytearray(dumps([np.eye(3)]))
    with pytest.raises(QtfFormatError):
        loads(b"QNTB" + bytes(data[4:]))
    data[4] = 9
    with pytest.raises(QtfFormatError):
        loads(bytes(data))


def test_unknown_width_and_kind():
    data = bytearray(dumps([np.eye(2)]))
    data[6] = 7
    with pytest.raises(QtfFormatError):
        loads(bytes(data))
    data = bytearray(dumps([np.eye(2)]))
    data[11] = 9
    with pytest.raises(QtfFormatError):
        loads(bytes(data))


def test_every_truncation_is_rejected():
    data = dumps([QtfRecord(build_plan("2-3-2", seed=2), 5), QtfRecord(np.eye(2), None)])
    for cut in range(len(data)):
        with pytest.raises(QtfFormatError):
            loads(data[:cut])


def test_inconsistent_gate_payload_rejected():
    data = bytearray(dumps([build_plan("2-2")]))
    # Grow the declared output extents of the only gate, stored in the trailing meta block
    data[-8:-4] = struct.pack("<I", 3)
    with pytest.raises(QtfFormatError):
        loads(bytes(data))


def test_unstorable_values():
    with pytest.raises(QtfFormatError):
        dumps([np.ones(4)])
    with pytest.raises(QtfFormatError):
        dumps([QtfRecord(np.eye(2), seed=-1)])
    with pytest.raises(QtfFormatError):
        dumps([1j * np.eye(2)])
    with pytest.raises(QtfFormatError):
        dumps([build_plan("2-2").with_tensors([1j * np.eye(4)])])


def test_file_helpers(tmp_path):
    path = tmp_path / "adapter.qtf"
    plan = build_plan("4-4", seed=3)
    write_qtf(path, [QtfRecord(plan, 3)])
    (record,) = read_qtf(path)
    assert record.seed == 3
    np.testing.assert_array_equal(record.value.tensors[0], plan.tensors[0])
