import struct

import numpy as np
import pytest

from cloudseg.errors import FormatError, TruncationError
from cloudseg.formats import (
    decode_checkpoint, decode_record, encode_checkpoint, encode_record, format_kv, parse_kv,
    read_checkpoint, read_grids, read_record, sidecar_path, write_checkpoint, write_mask_record,
    write_record,
)
from cloudseg.lidar import DayRecord, SyntheticSceneSpec, generate_day


def _day(seed=0):
    return generate_day(SyntheticSceneSpec(seed=seed, missing_fraction=0.05), day_id="d")


def test_record_round_trip_bitwise(tmp_path):
    day = _day()
    path = tmp_path / "d.mplb"
    write_record(day, path)
    back = read_record(path)
    for name in ("backscatter", "ldr", "clean_mask", "noisy_mask"):
        assert getattr(back, name).tobytes() == getattr(day, name).tobytes()
    np.testing.assert_array_equal(np.isnan(back.backscatter), np.isnan(day.backscatter))
    assert back.day_id == "d"


def test_record_write_read_write_identical_bytes(tmp_path):
    a, b = tmp_path / "a.mplb", tmp_path / "b.mplb"
    write_record(_day(1), a)
    write_record(read_record(a), b)
    assert a.read_bytes() == b.read_bytes()


def test_record_header_layout():
    day = DayRecord(np.ones((2, 3), np.float32), np.zeros((2, 3), np.float32))
    buf = encode_record(day)
    assert buf[:4] == b"MPLB"
    assert struct.unpack("<IB", buf[4:9]) == (1, 2)
    assert struct.unpack("<BBII", buf[9:19]) == (0, 0, 2, 3)
    assert len(buf) == 9 + 2 * (10 + 24)


def test_record_without_masks_round_trips():
    day = DayRecord(np.ones((2, 3), np.float32), np.zeros((2, 3), np.float32))
    back = decode_record(encode_record(day))
    assert back.clean_mask is None and back.noisy_mask is None


def test_bad_magic_is_format_error():
    buf = b"XXXX" + encode_record(_day())[4:]
    with pytest.raises(FormatError, match="offset 0"):
        decode_record(buf)


def test_truncated_payload_reports_offset():
    buf = encode_record(_day())
    with pytest.raises(TruncationError, match=r"offset 19\b"):
        decode_record(buf[:100])


def test_dimension_overflow_rejected():
    buf = b"MPLB" + struct.pack("<IB", 1, 1) + struct.pack("<BBII", 0, 0, 1 << 30, 4)
    with pytest.raises(FormatError):
        decode_record(buf)


def test_trailing_bytes_rejected():
    with pytest.raises(FormatError, match="trailing"):
        decode_record(encode_record(_day()) + b"\0")


def test_csv_fixture(tmp_path):
    (tmp_path / "fix.csv").write_text("1,2,3\n4,,6\n")
    (tmp_path / "fix_ldr.csv").write_text("0.1,0.2,0.3\n0.4,0.5,0.6\n")
    day = read_record(tmp_path / "fix.csv")
    assert day.shape == (2, 3)
    assert np.isnan(day.backscatter[1, 1])
    assert day.ldr[1, 2] == np.float32(0.6)


def test_ragged_csv_rejected(tmp_path):
    (tmp_path / "bad.csv").write_text("1,2\n3\n")
    with pytest.raises(FormatError):
        read_record(tmp_path / "bad.csv")


def test_mask_record(tmp_path):
    mask = (np.random.default_rng(0).random((5, 7)) < 0.3).astype(np.uint8)
    write_mask_record(mask, tmp_path / "m.mplb")
    np.testing.assert_array_equal(read_grids(tmp_path / "m.mplb")["noisy_mask"], mask)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"block1_conv1/kernel": rng.normal(size=(3, 3, 2, 4)).astype(np.float32),
              "block1_conv1/bias": np.zeros(4, np.float32),
              "scalar": np.array(1.5, np.float32)}
    path = tmp_path / "w.mplw"
    write_checkpoint(arrays, path, {"kind": "classifier", "lr": 0.001})
    back = read_checkpoint(path)
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].tobytes() == arrays[k].tobytes() and back[k].shape == arrays[k].shape
    assert encode_checkpoint(back) == path.read_bytes()
    assert parse_kv(sidecar_path(path).read_text()) == {"kind": "classifier", "lr": "0.001"}


def test_checkpoint_corruption():
    buf = encode_checkpoint({"w": np.ones((2, 2), np.float32)})
    with pytest.raises(FormatError):
        decode_checkpoint(b"MPLB" + buf[4:])
    with pytest.raises(TruncationError):
        decode_checkpoint(buf[:-3])


def test_kv_text():
    assert parse_kv("a = 1\n# note\nb=x y  # tail\na = 2\n") == {"a": "2", "b": "x y"}
    assert parse_kv(format_kv({"k": 3})) == {"k": "3"}
    with pytest.raises(ValueError):
        parse_kv("no equals here")
