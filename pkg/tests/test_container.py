import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from megre import container


def _shapes():
    return hnp.array_shapes(min_dims=0, max_dims=3, min_side=0, max_side=5)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, _shapes()), hnp.arrays(np.complex64, _shapes()), hnp.arrays(np.uint8, _shapes()))
def test_round_trip_is_bit_exact(f, c, u):
    blob = container.pack_container({"f": f, "c": c, "u": u}, {"note": "x"})
    arrays, meta = container.unpack_container(blob)
    assert meta == {"note": "x"}
    for name, arr in (("f", f), ("c", c), ("u", u)):
        assert arrays[name].dtype == arr.dtype and arrays[name].shape == arr.shape
        assert arrays[name].tobytes() == arr.tobytes()


def test_layout_on_disk(tmp_path):
    path = tmp_path / "a.met"
    container.write_container(path, {"x": np.array([1.0, 2.0], np.float32)}, {"k": 1}, {"x": ["x"]})
    blob = path.read_bytes()
    assert blob[:4] == b"MET1"
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8:8 + hlen])
    assert header["arrays"] == [{"name": "x", "dtype": "f32", "shape": [2], "axes": ["x"]}]
    assert blob[8 + hlen:] == np.array([1.0, 2.0], "<f4").tobytes()


def test_complex_stored_as_interleaved_pairs():
    blob = container.pack_container({"z": np.array([1 + 2j, 3 - 4j], np.complex64)})
    (hlen,) = struct.unpack("<I", blob[4:8])
    np.testing.assert_array_equal(np.frombuffer(blob[8 + hlen:], "<f4"), [1, 2, 3, -4])


def test_empty_container(tmp_path):
    path = tmp_path / "e.met"
    container.write_container(path, {})
    arrays, meta = container.read_container(path)
    assert arrays == {} and meta == {}


def test_truncated_payload_names_array():
    blob = container.pack_container({"a": np.zeros(4, np.float32), "b": np.zeros(8, np.float32)})
    with pytest.raises(container.TruncatedError) as info:
        container.unpack_container(blob[:-5])
    assert info.value.array_name == "b"


def test_bad_magic_and_unknown_dtype():
    blob = container.pack_container({"a": np.zeros(2, np.float32)})
    with pytest.raises(container.BadMagicError):
        container.unpack_container(b"XXXX" + blob[4:])
    header = json.dumps({"arrays": [{"name": "a", "dtype": "f64", "shape": [1], "axes": []}], "meta": {}}).encode()
    with pytest.raises(container.UnknownDtypeError):
        container.unpack_container(b"MET1" + struct.pack("<I", len(header)) + header + bytes(8))


def test_header_errors():
    with pytest.raises(container.HeaderError):
        container.unpack_container(b"MET1" + struct.pack("<I", 100) + b"{}")
    bad = b"not json"
    with pytest.raises(container.HeaderError):
        container.unpack_container(b"MET1" + struct.pack("<I", len(bad)) + bad)
    blob = container.pack_container({"a": np.zeros(1, np.float32)})
    with pytest.raises(container.HeaderError):
        container.unpack_container(blob + b"\x00")


def test_axis_labels_validated():
    with pytest.raises(ValueError):
        container.pack_container({"a": np.zeros((2, 2))}, axes={"a": ["row", "col"]})
    with pytest.raises(ValueError):
        container.pack_container({"a": np.zeros((2, 2))}, axes={"a": ["y"]})


def test_atomic_write_leaves_no_temp_files(tmp_path):
    path = tmp_path / "sub" / "a.met"
    container.write_container(path, {"a": np.ones(3, np.float32)})
    container.write_container(path, {"a": np.zeros(3, np.float32)})
    assert sorted(p.name for p in path.parent.iterdir()) == ["a.met"]
    np.testing.assert_array_equal(container.read_container(path)[0]["a"], 0)


def test_pgm_round_trip(tmp_path):
    img = np.linspace(0, 1, 12).reshape(3, 4)
    path = tmp_path / "p.pgm"
    container.write_pgm(path, img)
    assert path.read_bytes().startswith(b"P5\n4 3\n255\n")
    np.testing.assert_array_equal(container.read_pgm(path), np.round(img * 255).astype(np.uint8))
    with pytest.raises(ValueError):
        container.write_pgm(path, np.zeros((2, 2, 2)))
