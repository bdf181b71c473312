import numpy as np
import pytest
from numpy.testing import assert_array_equal

from errors import FormatError, MalformedFileError, RankError, ValidationError, VersionMismatchError
from tensor_io import (decode_tensor, encode_tensor, read_pgm, read_tensor, write_display_pgm, write_pgm,
                       write_tensor)


def test_float_layout_is_little_endian_row_major():
    blob = encode_tensor(np.array([[1.0, 2.0, 3.0]]))
    assert blob[:4] == b"BTSR"
    assert blob[4:6] == b"\x01\x00"
    assert blob[6:8] == b"\x01\x02"
    assert blob[8:24] == (1).to_bytes(8, "little") + (3).to_bytes(8, "little")
    assert len(blob) == 24 + 3 * 8
    assert_array_equal(decode_tensor(blob), [[1.0, 2.0, 3.0]])


def test_bits_are_packed_per_row():
    bits = np.array([[1, 0, 0, 0, 0, 0, 0, 0, 1, 1], [0] * 10])
    blob = encode_tensor(bits, "bits")
    assert len(blob) == 8 + 16 + 4
    assert blob[24:26] == b"\x01\x03"
    decoded = decode_tensor(blob)
    assert decoded.dtype == np.uint8
    assert_array_equal(decoded, bits)


def test_bits_reject_other_values():
    with pytest.raises(ValidationError):
        encode_tensor(np.array([0, 2]), "bits")
    with pytest.raises(RankError):
        encode_tensor(np.array(1), "bits")
    with pytest.raises(ValidationError):
        encode_tensor(np.ones(2), "complex")


def test_corrupt_headers():
    blob = encode_tensor(np.ones((2, 2)))
    with pytest.raises(MalformedFileError):
        decode_tensor(b"XXXX" + blob[4:])
    with pytest.raises(VersionMismatchError):
        decode_tensor(blob[:4] + b"\x02\x00" + blob[6:])
    with pytest.raises(MalformedFileError):
        decode_tensor(blob[:6] + b"\x09" + blob[7:])
    with pytest.raises(MalformedFileError):
        decode_tensor(blob[:5])
    with pytest.raises(MalformedFileError):
        decode_tensor(blob[:-1])
    with pytest.raises(MalformedFileError):
        decode_tensor(blob[:12])


def test_tensor_files(tmp_path):
    path = write_tensor(str(tmp_path / "x.btsr"), np.eye(3))
    assert_array_equal(read_tensor(path), np.eye(3))
    with pytest.raises(FormatError):
        read_tensor(str(tmp_path / "missing.btsr"))


def test_pgm_depths(tmp_path):
    image = np.array([[0, 7, 255], [1, 2, 3]])
    path = write_pgm(str(tmp_path / "a.pgm"), image, 255)
    assert (tmp_path / "a.pgm").stat().st_size == len(b"P5\n3 2\n255\n") + 6
    loaded, maxval = read_pgm(path)
    assert maxval == 255
    assert_array_equal(loaded, image)

    deep = np.array([[0, 65535], [300, 40000]])
    loaded, maxval = read_pgm(write_pgm(str(tmp_path / "b.pgm"), deep))
    assert maxval == 65535
    assert_array_equal(loaded, deep)


def test_pgm_header_comments(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 1\n# depth\n255\n" + bytes([9, 200]))
    image, _ = read_pgm(str(path))
    assert_array_equal(image, [[9, 200]])


def test_pgm_errors(tmp_path):
    ascii_pgm = tmp_path / "ascii.pgm"
    ascii_pgm.write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(MalformedFileError):
        read_pgm(str(ascii_pgm))
    short = tmp_path / "short.pgm"
    short.write_bytes(b"P5\n4 4\n255\n" + bytes(3))
    with pytest.raises(MalformedFileError):
        read_pgm(str(short))
    with pytest.raises(ValidationError):
        write_pgm(str(tmp_path / "bad.pgm"), np.array([[256]]), 255)
    with pytest.raises(RankError):
        write_pgm(str(tmp_path / "bad.pgm"), np.zeros(3))


def test_display_pgm_scales_to_full_range(tmp_path):
    path = write_display_pgm(str(tmp_path / "d.pgm"), np.array([[0.0, 5.0, 20.0]]), 10.0)
    image, maxval = read_pgm(path)
    assert maxval == 65535
    assert_array_equal(image, [[0, 32768, 65535]])
