"""Matrix container and CSV import round-trips plus malformed-file handling."""

import struct

import numpy as np
import numpy.testing as npt
import pytest

from qradapt.matio import (
    MAGIC,
    MatrixFormatError,
    load_matrix,
    load_matrix_any,
    load_matrix_csv,
    save_matrix,
)


def test_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    for shape in [(1, 1), (3, 5), (17, 2)]:
        w = rng.normal(size=shape)
        p = tmp_path / "m.qrla"
        save_matrix(p, w)
        back = load_matrix(p)
        assert back.shape == w.shape
        npt.assert_array_equal(back, w)


def test_header_bytes(tmp_path):
    p = tmp_path / "m.qrla"
    save_matrix(p, np.ones((2, 3)))
    raw = p.read_bytes()
    assert raw[:4] == MAGIC
    version, rows, cols = struct.unpack_from("<IQQ", raw, 4)
    assert (version, rows, cols) == (1, 2, 3)
    assert len(raw) == 24 + 8 * 6


def test_rejects_bad_magic(tmp_path):
    p = tmp_path / "m.qrla"
    save_matrix(p, np.ones((2, 2)))
    raw = bytearray(p.read_bytes())
    raw[:4] = b"NOPE"
    p.write_bytes(bytes(raw))
    with pytest.raises(MatrixFormatError, match="magic"):
        load_matrix(p)


def test_rejects_bad_version(tmp_path):
    p = tmp_path / "m.qrla"
    save_matrix(p, np.ones((2, 2)))
    raw = bytearray(p.read_bytes())
    struct.pack_into("<I", raw, 4, 9)
    p.write_bytes(bytes(raw))
    with pytest.raises(MatrixFormatError, match="version"):
        load_matrix(p)


def test_rejects_truncation_and_trailing(tmp_path):
    p = tmp_path / "m.qrla"
    save_matrix(p, np.ones((2, 2)))
    raw = p.read_bytes()
    p.write_bytes(raw[:-8])
    with pytest.raises(MatrixFormatError):
        load_matrix(p)
    p.write_bytes(raw + b"\x00" * 8)
    with pytest.raises(MatrixFormatError, match="size mismatch"):
        load_matrix(p)


def test_rejects_nonfinite_payload(tmp_path):
    p = tmp_path / "m.qrla"
    w = np.ones((2, 2))
    w[1, 1] = np.nan
    with pytest.raises(ValueError):
        save_matrix(p, w)


def test_csv_import(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("1,2.5,3\n4,5,6\n")
    w = load_matrix_csv(p)
    npt.assert_array_equal(w, [[1, 2.5, 3], [4, 5, 6]])
    # single row still comes back 2-D
    p.write_text("7,8\n")
    assert load_matrix_csv(p).shape == (1, 2)


def test_csv_rejects_garbage(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("1,two,3\n")
    with pytest.raises(MatrixFormatError):
        load_matrix_csv(p)


def test_sniffing_loader(tmp_path):
    w = np.arange(6.0).reshape(2, 3) + 1
    b = tmp_path / "m.qrla"
    c = tmp_path / "m.csv"
    save_matrix(b, w)
    c.write_text("1,2,3\n4,5,6\n")
    npt.assert_array_equal(load_matrix_any(b), w)
    npt.assert_array_equal(load_matrix_any(c), w)
