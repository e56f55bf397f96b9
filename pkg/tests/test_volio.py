import json
import struct

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from toothbench import volio
from toothbench.metrics import CaseReport
from toothbench.volume import Spacing, Volume


def minimal_nifti(dims_xyz, datatype, bitpix, pixdim_xyz, data: bytes, magic=b"n+1\x00") -> bytes:
    """NIfTI-1 header assembled from the standard field table (offsets in bytes)."""
    fields = [
        (0, "<i", 348),                    # sizeof_hdr
        (40, "<8h", (3, *dims_xyz, 1, 1, 1, 1)),  # dim
        (70, "<h", datatype),
        (72, "<h", bitpix),
        (76, "<8f", (1.0, *pixdim_xyz, 0, 0, 0, 0)),  # pixdim; [0] is qfac
        (108, "<f", 352.0),                # vox_offset
    ]
    hdr = bytearray(348)
    for off, fmt, val in fields:
        struct.pack_into(fmt, hdr, off, *(val if isinstance(val, tuple) else (val,)))
    hdr[344:348] = magic
    return bytes(hdr) + b"\0\0\0\0" + data


def make_report(case_id="a", **kw):
    base = dict(case_id=case_id, wdsc=95.0, dsc=90.0, iou=81.0, sen=92.0, ppv=88.0, hd=2.5, assd=0.4,
                so=96.0, sd=95.5, theta_mm=1.0, threshold=0.5)
    base.update(kw)
    return CaseReport(**base)


class TestNative:
    def test_roundtrip_f32(self, tmp_path):
        rng = np.random.default_rng(0)
        v = Volume(rng.standard_normal((8, 16, 16)).astype(np.float32), Spacing(0.3, 0.25, 0.25))
        volio.write_volume(v, tmp_path / "vol")
        back = volio.read_volume(tmp_path / "vol")
        assert back.dims == v.dims and back.spacing == v.spacing
        assert back.data.dtype == np.float32
        assert back.data.tobytes() == v.data.tobytes()

    def test_label_u8_roundtrip(self, tmp_path):
        m = (np.arange(27).reshape(3, 3, 3) % 2).astype(np.uint8)
        volio.write_volume(Volume(m, kind="label"), tmp_path / "m.ctvol.json")
        back = volio.read_volume(tmp_path / "m.ctvol.raw")
        assert back.kind == "label"
        np.testing.assert_array_equal(back.data, m)

    def test_header_layout(self, tmp_path):
        volio.write_volume(Volume(np.zeros((2, 3, 4), dtype=np.int16), Spacing(0.3, 0.25, 0.2)), tmp_path / "h")
        h = json.loads((tmp_path / "h.ctvol.json").read_text())
        assert h["dims"] == [2, 3, 4] and h["spacing_mm"] == [0.3, 0.25, 0.2]
        assert h["dtype"] == "i16" and h["order"] == "zyx" and h["endianness"] == "little"
        assert (tmp_path / "h.ctvol.raw").stat().st_size == 2 * 3 * 4 * 2

    def test_little_endian_blob(self, tmp_path):
        v = Volume(np.array([1, 256], dtype=np.int16).reshape(1, 1, 2))
        volio.write_volume(v, tmp_path / "e")
        assert (tmp_path / "e.ctvol.raw").read_bytes() == b"\x01\x00\x00\x01"

    def test_truncated_blob(self, tmp_path):
        volio.write_volume(Volume(np.zeros((2, 2, 2), dtype=np.float32)), tmp_path / "t")
        raw = tmp_path / "t.ctvol.raw"
        raw.write_bytes(raw.read_bytes()[:-1])
        with pytest.raises(volio.VolumeFormatError, match="expected"):
            volio.read_volume(tmp_path / "t")

    def test_garbled_header(self, tmp_path):
        volio.write_volume(Volume(np.zeros((2, 2, 2), dtype=np.float32)), tmp_path / "g")
        (tmp_path / "g.ctvol.json").write_text("{dims: ")
        with pytest.raises(volio.VolumeFormatError, match="garbled"):
            volio.read_volume(tmp_path / "g")

    def test_unknown_dtype(self, tmp_path):
        volio.write_volume(Volume(np.zeros((2, 2, 2), dtype=np.float32)), tmp_path / "u")
        h = json.loads((tmp_path / "u.ctvol.json").read_text())
        h["dtype"] = "f64"
        (tmp_path / "u.ctvol.json").write_text(json.dumps(h))
        with pytest.raises(volio.VolumeFormatError, match="dtype"):
            volio.read_volume(tmp_path / "u")
        with pytest.raises(volio.VolumeFormatError):
            volio.write_volume(Volume(np.zeros((1, 1, 1))), tmp_path / "x", dtype="f64")

    def test_missing_files(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            volio.read_volume(tmp_path / "nothing")

    @settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(st.integers(0, 2**32 - 1), st.sampled_from(["u8", "i16", "f32"]))
    def test_random_roundtrips(self, tmp_path, seed, dtype):
        rng = np.random.default_rng(seed)
        dims = tuple(rng.integers(1, 7, 3))
        if dtype == "f32":
            data = rng.integers(0, 2**32, dims, dtype=np.uint32).view(np.float32)
            data = np.where(np.isfinite(data), data, np.float32(0))
        else:
            info = np.iinfo(volio.DTYPES[dtype])
            data = rng.integers(info.min, info.max, dims, endpoint=True).astype(volio.DTYPES[dtype])
        v = Volume(data, Spacing(*rng.uniform(0.1, 3, 3)))
        volio.write_volume(v, tmp_path / "r")
        back = volio.read_volume(tmp_path / "r")
        assert back.data.dtype == volio.DTYPES[dtype].newbyteorder("=")
        assert back.data.tobytes() == v.data.tobytes()
        assert back.spacing == v.spacing


class TestNifti:
    def test_minimal_header(self, tmp_path):
        data = np.arange(32, dtype="<f4")
        f = tmp_path / "x.nii"
        f.write_bytes(minimal_nifti((4, 4, 2), 16, 32, (0.25, 0.25, 0.3), data.tobytes()))
        v = volio.read_nifti(f)
        assert v.dims == (2, 4, 4)
        assert v.spacing == Spacing(np.float32(0.3), 0.25, 0.25)
        # x varies fastest on disk
        assert v.data[0, 0, 1] == 1 and v.data[0, 1, 0] == 4 and v.data[1, 0, 0] == 16

    def test_u8_and_i16(self, tmp_path):
        for code, bitpix, dt in ((2, 8, "<u1"), (4, 16, "<i2")):
            data = np.arange(6, dtype=dt)
            f = tmp_path / f"d{code}.nii"
            f.write_bytes(minimal_nifti((3, 2, 1), code, bitpix, (1, 1, 1), data.tobytes()))
            v = volio.read_nifti(f)
            assert v.dims == (1, 2, 3)
            np.testing.assert_array_equal(v.data.ravel(), np.arange(6))

    def test_two_file_magic_rejected(self, tmp_path):
        f = tmp_path / "x.nii"
        f.write_bytes(minimal_nifti((2, 2, 2), 16, 32, (1, 1, 1), bytes(32), magic=b"ni1\x00"))
        with pytest.raises(volio.VolumeFormatError, match="magic"):
            volio.read_nifti(f)

    def test_f64_rejected(self, tmp_path):
        f = tmp_path / "x.nii"
        f.write_bytes(minimal_nifti((2, 2, 2), 64, 64, (1, 1, 1), bytes(64)))
        with pytest.raises(volio.VolumeFormatError, match="datatype"):
            volio.read_nifti(f)

    def test_4d_rejected(self, tmp_path):
        raw = bytearray(minimal_nifti((2, 2, 2), 16, 32, (1, 1, 1), bytes(32)))
        struct.pack_into("<h", raw, 40, 4)
        f = tmp_path / "x.nii"
        f.write_bytes(bytes(raw))
        with pytest.raises(volio.VolumeFormatError, match="dim"):
            volio.read_nifti(f)

    def test_package_helper_matches_field_table(self):
        ours = minimal_nifti((4, 4, 2), 16, 32, (0.25, 0.25, 0.3), b"")
        theirs = volio.nifti_header_bytes((4, 4, 2), 16, (0.25, 0.25, 0.3))
        assert len(theirs) == len(ours) == 352
        # the helper additionally sets scl_slope = 1
        assert theirs[:112] == ours[:112] and theirs[116:] == ours[116:]
        assert struct.unpack_from("<f", theirs, 112)[0] == 1.0


class TestReports:
    def test_perfect_row(self, tmp_path):
        rep = make_report(wdsc=100.0, dsc=100.0, iou=100.0, sen=100.0, ppv=100.0, hd=0.0, assd=0.0, so=100.0, sd=100.0)
        volio.write_report([rep], tmp_path / "r.json", "json")
        rows = json.loads((tmp_path / "r.json").read_text())
        assert rows[0]["dsc"] == 100.0 and rows[0]["hd"] == 0.0 and rows[0]["so"] == 100.0
        assert list(rows[0]) == list(volio.REPORT_FIELDS)

    def test_mean_row_csv(self, tmp_path):
        volio.write_report([make_report("a", dsc=80.0), make_report("b", dsc=90.0)], tmp_path / "r.csv", "csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0].split(",")[:10] == ["case_id", "wdsc", "dsc", "iou", "sen", "ppv", "hd", "assd", "so", "sd"]
        mean = lines[-1].split(",")
        assert mean[0] == "mean" and mean[2] == "85.00"
        assert len(lines) == 4

    def test_mean_row_json(self):
        rows = json.loads(volio.format_report_json([make_report("a", dsc=80.0), make_report("b", dsc=90.0)]))
        assert rows[-1]["case_id"] == "mean" and rows[-1]["dsc"] == 85.0

    def test_fixed_decimals(self):
        text = volio.format_report_csv([make_report(hd=1 / 3, dsc=200 / 3)])
        row = text.splitlines()[1].split(",")
        assert row[2] == "66.67" and row[6] == "0.3333"

    def test_undefined_marker_and_mean(self):
        rows = [make_report("a", ppv=None), make_report("b")]
        csv_text = volio.format_report_csv(rows)
        assert "undefined" in csv_text.splitlines()[1]
        assert csv_text.splitlines()[-1].split(",")[5] == "undefined"
        data = json.loads(volio.format_report_json(rows))
        assert data[0]["ppv"] is None and data[-1]["ppv"] is None

    def test_sorted_and_deterministic(self):
        rows = [make_report("b"), make_report("a")]
        t1 = volio.format_report_json(rows)
        assert t1 == volio.format_report_json(rows[::-1])
        assert [r["case_id"] for r in json.loads(t1)] == ["a", "b", "mean"]

    def test_empty_list(self, tmp_path):
        with pytest.raises(ValueError):
            volio.write_report([], tmp_path / "x.json")

    def test_read_back(self, tmp_path):
        volio.write_report([make_report("a"), make_report("b", hd=None)], tmp_path / "r.json", "json")
        back = volio.read_reports(tmp_path / "r.json")
        assert [r.case_id for r in back] == ["a", "b"] and back[1].hd is None
