"""Mismatch log framing, round trips and damage recovery."""

import json
import struct
import zlib
from dataclasses import replace

import pytest
from hypothesis import given, strategies as st

from hybridsim.mismatch_log import (
    INDEX_NAME, LOG_NAME, MismatchLog, MismatchRecord, RecordError, TimingTrace, read_log,
    read_records,
)
from hybridsim.proto import DerivedState, EstimateEntry, EstimateReportMsg, encode_state_update
from hybridsim.scenario import bundled, scenario_text
from hybridsim.world import EntityState, KindTag, Vec3


def gt(n, eid=1):
    return tuple(EntityState(eid, k * 10_000, Vec3(k * 0.08, 0.0, 0.0), Vec3(8.0, 0.0, 0.0),
                             Vec3(1.0, 0.0, 0.0)).quantized() for k in range(n))


def rec(rid=1, n_gt=50, criterion="derived_state", seed=7):
    ests = (EstimateReportMsg(1, 1, 180, DerivedState.SAFE_TO_DRIVE, 9_000_000, 10, 50_010),
            EstimateReportMsg(1, 1, 181, DerivedState.SLOW_DOWN, 9_050_000, 20, 50_020,
                              (EstimateEntry(KindTag.PEDESTRIAN, 9.0, 0.125, Vec3(80, 0, 0), 0.75),)))
    return MismatchRecord(rid, criterion, 1, 1, 9_050_000, 181, TimingTrace(20, 50_020, 60_000),
                          seed, 10.0, scenario_text(bundled("ped-crossing")),
                          {"position_tolerance_m": 2.0}, {"hazard": "COLLISION_POSSIBLE"},
                          gt(n_gt), ests)


def test_record_framing_layout():
    r = rec()
    data = r.encode()
    body = r.encode_body()
    assert data[:4] == b"CCMR"
    assert struct.unpack_from("<I", data, 4)[0] == len(body)
    assert struct.unpack_from("<I", data, len(data) - 4)[0] == zlib.crc32(body)
    # record id then a length-prefixed criterion
    assert body[:4] == (1).to_bytes(4, "little")
    assert body[4] == len("derived_state") and body[5:18] == b"derived_state"


def test_round_trip_through_the_log(tmp_path):
    log = MismatchLog(tmp_path)
    records = [rec(1), rec(2, criterion="staleness"), rec(3, n_gt=0)]
    offsets = [log.append(r) for r in records]
    got, warning = read_records(tmp_path / LOG_NAME)
    assert warning is None and got == records
    assert offsets[0] == 0 and offsets[1] == len(records[0].encode())
    lines = [json.loads(line) for line in (tmp_path / INDEX_NAME).read_text().splitlines()]
    assert [ln["record_id"] for ln in lines] == [1, 2, 3]
    assert [ln["offset"] for ln in lines] == offsets
    assert lines[0]["gt_span_s"] == pytest.approx(9.05)


def test_windows_are_byte_identical_after_reading(tmp_path):
    MismatchLog(tmp_path).append(rec())
    (back,), _ = read_records(tmp_path / LOG_NAME)
    assert back.encode() == rec().encode()
    assert back.trigger().frame_id_ref == 181


def test_pre_encoded_window_is_used_verbatim():
    r = rec()
    raw = b"".join(encode_state_update(s) for s in r.gt_window)
    fast = replace(r, gt_raw=raw)
    assert fast == r and fast.encode_body() == r.encode_body()
    # a blob of the wrong size is ignored, not trusted
    assert replace(r, gt_raw=raw[:-1]).encode_body() == r.encode_body()


def test_corrupted_byte_fails_the_checksum(tmp_path):
    log = MismatchLog(tmp_path)
    log.append(rec(1))
    log.append(rec(2))
    path = tmp_path / LOG_NAME
    data = bytearray(path.read_bytes())
    second = len(rec(1).encode())
    data[second + 40] ^= 0xFF
    path.write_bytes(bytes(data))
    got, warning = read_records(path)
    assert [r.record_id for r in got] == [1]
    assert "checksum" in warning


def test_truncated_tail_is_salvaged(tmp_path):
    log = MismatchLog(tmp_path)
    log.append(rec(1))
    log.append(rec(2, n_gt=200))
    path = tmp_path / LOG_NAME
    data = path.read_bytes()
    path.write_bytes(data[:-3000])
    good, partial = read_log(path)
    assert [r.record_id for r in good] == [1]
    assert "truncated" in partial.warning
    assert partial.fields["record_id"] == 2 and partial.fields["seed"] == 7
    assert 'name = "ped-crossing"' in partial.fields["scenario_text"]
    assert 0 < len(partial.gt_window) < 200
    assert list(partial.gt_window) == list(gt(200)[:len(partial.gt_window)])


def test_bad_magic_is_reported(tmp_path):
    path = tmp_path / LOG_NAME
    path.write_bytes(b"NOPE" + bytes(20))
    assert read_records(path) == ([], "bad record magic at offset 0")


def test_trailing_bytes_in_body_are_an_error():
    with pytest.raises(RecordError):
        MismatchRecord.decode_body(rec().encode_body() + b"\x00")


def test_unwritable_directory_surfaces_after_retries(tmp_path):
    log = MismatchLog(tmp_path)
    (tmp_path / LOG_NAME).mkdir()  # a directory where the file should be
    with pytest.raises(OSError):
        log.append(rec())
    assert log.failures == 1 and log.written == 0


@given(st.integers(1, 2**32 - 1), st.integers(0, 2**64 - 1), st.integers(0, 300),
       st.sampled_from(["derived_state", "position", "staleness"]),
       st.floats(0.5, 60.0))
def test_record_round_trip_property(rid, seed, n_gt, criterion, window_s):
    r = MismatchRecord(rid, criterion, 3, 4, 1_000_000, 20, TimingTrace(1, 2, 3), seed,
                       window_s, "name = 'x'\n", {}, {"k": [1, 2]}, gt(n_gt))
    assert MismatchRecord.decode_body(r.encode_body()) == r
