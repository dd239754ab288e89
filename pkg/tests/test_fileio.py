"""PFM / PNG / TSR1 round trips and validation failure modes."""

import numpy as np
import pytest

from texsr.errors import ParameterError, ParseError
from texsr.fileio import (
    flow_to_raster,
    raster_to_flow,
    read_keyvalue,
    read_pfm,
    read_png,
    read_sparse_map,
    write_keyvalue,
    write_pfm,
    write_png,
    write_sparse_map,
)
from texsr.operators import SparseLinearMap


def f32(x):
    return x.astype(np.float32).astype(np.float64)


class TestPfm:
    def test_grayscale_roundtrip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        x = f32(rng.random((13, 9)))  # f32-representable: the format is lossless
        p = tmp_path / "x.pfm"
        write_pfm(p, x)
        np.testing.assert_array_equal(read_pfm(p), x)

    def test_three_channel_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        x = f32(rng.standard_normal((7, 5, 3)))
        p = tmp_path / "c.pfm"
        write_pfm(p, x)
        np.testing.assert_array_equal(read_pfm(p), x)

    def test_flow_channels(self, tmp_path):
        rng = np.random.default_rng(2)
        flow = f32(rng.standard_normal((6, 8, 2)))
        p = tmp_path / "f.pfm"
        write_pfm(p, flow_to_raster(flow))
        back = raster_to_flow(read_pfm(p))
        np.testing.assert_array_equal(back, flow)

    def test_truncated_file_rejected(self, tmp_path):
        p = tmp_path / "t.pfm"
        write_pfm(p, np.zeros((8, 8)))
        data = p.read_bytes()
        p.write_bytes(data[: len(data) - 10])
        with pytest.raises(ParseError, match="truncated"):
            read_pfm(p)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "b.pfm"
        p.write_bytes(b"P5\n3 3\n255\n" + b"\0" * 9)
        with pytest.raises(ParseError, match="magic"):
            read_pfm(p)

    def test_bad_dims_rejected(self, tmp_path):
        p = tmp_path / "d.pfm"
        p.write_bytes(b"Pf\nxx 3\n-1.0\n")
        with pytest.raises(ParseError):
            read_pfm(p)

    def test_wrong_shape_write_rejected(self, tmp_path):
        with pytest.raises(ParameterError):
            write_pfm(tmp_path / "w.pfm", np.zeros((4, 4, 2)))


class TestPng:
    def test_roundtrip_quantization_bound(self, tmp_path):
        """8-bit quantization error stays below half a quantization step."""
        rng = np.random.default_rng(3)
        x = rng.random((16, 16))
        p = tmp_path / "x.png"
        write_png(p, x)
        back = read_png(p)
        assert np.abs(back - x).max() <= 1.0 / 510 + 1e-12

    def test_round_half_even(self, tmp_path):
        # 127.5/255 quantizes to 128 under round-half-even? No: round(127.5)=128
        # is half-to-even -> 128 (even). 0.5/255*127.5 path checked end to end.
        x = np.array([[127.5 / 255.0, 128.5 / 255.0]])
        p = tmp_path / "r.png"
        write_png(p, x)
        back = np.round(read_png(p) * 255).astype(int)
        assert back.tolist() == [[128, 128]]


class TestSparseMapFile:
    def _random_map(self, seed):
        rng = np.random.default_rng(seed)
        rows, cols = 14, 21
        indptr = [0]
        indices = []
        data = []
        for _ in range(rows):
            k = int(rng.integers(0, 6))
            cols_r = np.sort(rng.choice(cols, size=k, replace=False))
            indices.extend(cols_r.tolist())
            data.extend(np.float32(rng.standard_normal(k)).tolist())
            indptr.append(len(indices))
        return SparseLinearMap(rows, cols, np.array(indptr), np.array(indices),
                               np.array(data))

    def test_roundtrip_bit_identical(self, tmp_path):
        m = self._random_map(4)
        p = tmp_path / "m.tsr1"
        write_sparse_map(p, m)
        back = read_sparse_map(p)
        assert back.rows == m.rows and back.cols == m.cols
        np.testing.assert_array_equal(back.indptr, m.indptr)
        np.testing.assert_array_equal(back.indices, m.indices)
        np.testing.assert_array_equal(back.data, m.data)

    def test_wrong_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.tsr1"
        p.write_bytes(b"XXXX" + b"\0" * 32)
        with pytest.raises(ParseError, match="magic"):
            read_sparse_map(p)

    def test_nnz_mismatch_rejected(self, tmp_path):
        m = self._random_map(5)
        p = tmp_path / "n.tsr1"
        write_sparse_map(p, m)
        p.write_bytes(p.read_bytes() + b"\0\0\0\0")
        with pytest.raises(ParseError, match="nnz"):
            read_sparse_map(p)

    def test_unsorted_columns_rejected(self, tmp_path):
        import struct
        p = tmp_path / "u.tsr1"
        indptr = np.array([0, 2], dtype="<u8")
        indices = np.array([3, 1], dtype="<u4")  # not sorted
        data = np.array([1.0, 2.0], dtype="<f4")
        p.write_bytes(b"TSR1" + struct.pack("<IIQ", 1, 5, 2)
                      + indptr.tobytes() + indices.tobytes() + data.tobytes())
        with pytest.raises(ParseError, match="row 0"):
            read_sparse_map(p)

    def test_out_of_range_column_rejected(self, tmp_path):
        import struct
        p = tmp_path / "o.tsr1"
        indptr = np.array([0, 1], dtype="<u8")
        indices = np.array([9], dtype="<u4")
        data = np.array([1.0], dtype="<f4")
        p.write_bytes(b"TSR1" + struct.pack("<IIQ", 1, 5, 1)
                      + indptr.tobytes() + indices.tobytes() + data.tobytes())
        with pytest.raises(ParseError, match="row 0"):
            read_sparse_map(p)


class TestKeyValue:
    def test_roundtrip(self, tmp_path):
        p = tmp_path / "s.cfg"
        write_keyvalue(p, {"width": 64, "noise_std": repr(0.005), "texture": "mixed"})
        back = read_keyvalue(p)
        assert back["width"] == "64"
        assert float(back["noise_std"]) == 0.005
        assert back["texture"] == "mixed"

    def test_comments_and_blanks(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("# header\n\nwidth = 32  # trailing\n")
        assert read_keyvalue(p) == {"width": "32"}

    def test_malformed_line_rejected(self, tmp_path):
        p = tmp_path / "m.cfg"
        p.write_text("just words\n")
        with pytest.raises(ParseError, match="line 1"):
            read_keyvalue(p)
