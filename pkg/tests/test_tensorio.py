import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays, array_shapes

from fvattn.errors import (
    BadMagic,
    CorruptHeader,
    DuplicateId,
    LabelOutOfRange,
    MissingPath,
    NonFiniteValue,
    TruncatedPayload,
    UnsupportedFormat,
)
from fvattn.tensorio import (
    encode_tensor,
    load_image,
    load_manifest,
    read_bundle,
    read_pgm,
    read_tensor,
    write_bundle,
    write_manifest,
    write_pgm,
    write_tensor,
)


def test_round_trip_ones(tmp_path):
    p = tmp_path / "t.fvt"
    write_tensor(p, np.ones((2, 3)))
    t = read_tensor(p)
    assert t.shape == (2, 3)
    assert np.array_equal(t, np.ones((2, 3)))


def test_header_layout_is_exact():
    buf = encode_tensor(np.arange(6.0).reshape(2, 3))
    assert buf[:4] == b"FVT1"
    assert buf[4] == 1 and buf[5] == 2 and buf[6:8] == b"\x00\x00"
    assert struct.unpack("<2Q", buf[8:24]) == (2, 3)
    assert np.array_equal(np.frombuffer(buf[24:], "<f8"), np.arange(6.0))
    assert len(encode_tensor(np.zeros(4), dtype="float32")) == 8 + 8 + 16


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, array_shapes(min_dims=1, max_dims=4, max_side=5),
              elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_round_trip_bit_exact(tmp_path_factory, a):
    p = tmp_path_factory.mktemp("rt") / "a.fvt"
    write_tensor(p, a)
    b = read_tensor(p)
    assert b.shape == a.shape
    assert b.tobytes() == a.tobytes()
    # and file -> tensor -> file
    write_tensor(p.with_suffix(".2"), b)
    assert p.read_bytes() == p.with_suffix(".2").read_bytes()


def test_float32_storage_widens(tmp_path):
    p = tmp_path / "f.fvt"
    write_tensor(p, [0.5, 1.25, -3.0], dtype="float32")
    t = read_tensor(p)
    assert t.dtype == np.float64
    assert list(t) == [0.5, 1.25, -3.0]


def test_bad_magic(tmp_path):
    p = tmp_path / "x.fvt"
    p.write_bytes(b"XXXX" + encode_tensor(np.ones(2))[4:])
    with pytest.raises(BadMagic) as e:
        read_tensor(p)
    assert e.value.offset == 0


def test_truncated_payload(tmp_path):
    p = tmp_path / "x.fvt"
    full = encode_tensor(np.ones(4))
    p.write_bytes(full[:-8])
    with pytest.raises(TruncatedPayload) as e:
        read_tensor(p)
    assert e.value.offset == 16


def test_non_finite_reports_offset(tmp_path):
    buf = bytearray(encode_tensor(np.ones(3)))
    buf[16 + 8:16 + 16] = struct.pack("<d", float("nan"))
    p = tmp_path / "x.fvt"
    p.write_bytes(bytes(buf))
    with pytest.raises(NonFiniteValue) as e:
        read_tensor(p)
    assert e.value.offset == 24


def test_bundle_round_trip(tmp_path):
    p = tmp_path / "b.bin"
    tensors = {"a": np.arange(3.0), "b": np.eye(2)}
    write_bundle(p, tensors, {"K": 2, "trace": [1.0, 2.0]})
    got, meta = read_bundle(p)
    assert list(got) == ["a", "b"]
    assert np.array_equal(got["b"], np.eye(2))
    assert meta == {"K": 2, "trace": [1.0, 2.0]}


def _pgm(w, h, maxval, payload, magic=b"P5"):
    return magic + f"\n{w} {h}\n{maxval}\n".encode() + payload


def test_pgm_scaling(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_bytes(_pgm(2, 2, 255, bytes([0, 255, 255, 0])))
    img = read_pgm(p)
    assert img.pixels.tolist() == [[0.0, 1.0], [1.0, 0.0]]


def test_pgm_16bit_and_comments(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_bytes(b"P5 # comment\n2 1\n# another\n1000\n" + struct.pack(">2H", 0, 500))
    assert read_pgm(p).pixels.tolist() == [[0.0, 0.5]]


def test_pgm_ascii_unsupported(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_bytes(b"P2\n2 2\n255\n0 1 2 3\n")
    with pytest.raises(UnsupportedFormat):
        read_pgm(p)


def test_pgm_corrupt_header(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_bytes(_pgm(2, 2, 70000, b"\x00" * 8))
    with pytest.raises(CorruptHeader):
        read_pgm(p)
    p.write_bytes(_pgm(4, 4, 255, b"\x00" * 5))
    with pytest.raises(CorruptHeader):
        read_pgm(p)


def test_pgm_zero_image(tmp_path):
    p = tmp_path / "z.pgm"
    write_pgm(p, np.zeros((28, 28)))
    img = read_pgm(p)
    assert img.pixels.size == 784 and not img.pixels.any()
    assert (img.width, img.height, img.depth) == (28, 28, None)


def test_volume_from_tensor(tmp_path):
    p = tmp_path / "v.fvt"
    write_tensor(p, np.zeros((4, 6, 8)))
    img = load_image(p)
    assert (img.depth, img.height, img.width) == (4, 6, 8)


def _write(tmp_path, doc):
    p = tmp_path / "m.json"
    p.write_text(json.dumps(doc))
    return p


def test_manifest_binary(tmp_path):
    p = _write(tmp_path, {"task": "binary", "samples": [
        {"id": "a", "labels": 0}, {"id": "b", "labels": 1}, {"id": "c", "labels": 0}]})
    m = load_manifest(p)
    assert m.num_labels == 1 and len(m) == 3
    assert m.ids == ["a", "b", "c"]
    assert m.label_array().tolist() == [0, 1, 0]


def test_manifest_label_out_of_range(tmp_path):
    p = _write(tmp_path, {"task": "multiclass", "num_labels": 3,
                          "samples": [{"id": "a", "labels": 3}]})
    with pytest.raises(LabelOutOfRange):
        load_manifest(p)


def test_manifest_duplicate_id(tmp_path):
    p = _write(tmp_path, {"task": "binary", "samples": [{"id": "a", "labels": 0}, {"id": "a", "labels": 1}]})
    with pytest.raises(DuplicateId):
        load_manifest(p)


def test_manifest_missing_path(tmp_path):
    p = _write(tmp_path, {"task": "binary", "samples": [{"id": "a", "labels": 0, "image_path": "nope.pgm"}]})
    with pytest.raises(MissingPath):
        load_manifest(p)


def test_manifest_multilabel_and_order(tmp_path):
    ids = [f"s{i}" for i in (5, 1, 9, 0)]
    p = _write(tmp_path, {"task": "multilabel", "num_labels": 2,
                          "samples": [{"id": i, "labels": [1, 0]} for i in ids]})
    m = load_manifest(p)
    assert m.ids == ids
    assert m.label_array().shape == (4, 2)
    with pytest.raises(LabelOutOfRange):
        load_manifest(_write(tmp_path, {"task": "multilabel", "num_labels": 2,
                                        "samples": [{"id": "x", "labels": [1]}]}))


def test_manifest_write_relocates_paths(tmp_path):
    write_pgm(tmp_path / "img.pgm", np.zeros((2, 2)))
    p = _write(tmp_path, {"task": "binary", "samples": [{"id": "a", "labels": 1, "image_path": "img.pgm"}]})
    m = load_manifest(p)
    (tmp_path / "sub").mkdir()
    write_manifest(m, tmp_path / "sub" / "m.json")
    m2 = load_manifest(tmp_path / "sub" / "m.json")
    assert m2.samples[0].image_path.resolve() == (tmp_path / "img.pgm").resolve()
