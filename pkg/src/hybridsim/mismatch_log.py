"""Append-only mismatch log.

Each record is framed as::

    "CCMR" | u32 body_len | body | u32 crc32(body)

and the body is::

    u32 record_id | str8 criterion | u32 client_id | u32 entity_id
    | u64 sim_time_us | u64 frame_id | u64 t_render_us | u64 t_estimate_us
    | u64 t_ingest_us | u64 seed | f64 window_s
    | u32 len + UTF-8 JSON {"criteria": ..., "details": ...}
    | u32 len + UTF-8 scenario text
    | u32 n_gt + n_gt x 48-byte state records (wire encoding)
    | u32 n_est + n_est x (u32 len + EstimateReport payload)

All integers little-endian. A sibling ``index.jsonl`` holds one summary line
per record with its byte offset.
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

from .proto import STATE_RECORD_SIZE, EstimateReportMsg, decode_state_update, encode_state_update
from .world import EntityState

log = logging.getLogger("hybridsim.mismatch_log")

RECORD_MAGIC = b"CCMR"
LOG_NAME = "mismatches.bin"
INDEX_NAME = "index.jsonl"
_FIXED = struct.Struct("<IIQQQQQQd")  # client, entity, sim_time, frame, t_render, t_est, t_ingest, seed, window
_U32 = struct.Struct("<I")


class RecordError(ValueError):
    pass


@dataclass(frozen=True)
class TimingTrace:
    t_render_us: int
    t_estimate_us: int
    t_ingest_us: int

    @property
    def pipeline_age_us(self) -> int:
        return self.t_estimate_us - self.t_render_us


@dataclass(frozen=True)
class MismatchRecord:
    record_id: int
    criterion: str
    client_id: int
    entity_id: int
    sim_time_us: int
    frame_id: int
    timing: TimingTrace
    seed: int
    window_s: float
    scenario_text: str
    criteria: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)
    gt_window: tuple[EntityState, ...] = ()
    est_window: tuple[EstimateReportMsg, ...] = ()
    # wire encoding of gt_window when the caller already has it
    gt_raw: bytes = field(default=b"", compare=False, repr=False)

    def gt_span_us(self) -> int:
        if not self.gt_window:
            return 0
        return self.sim_time_us - min(s.sim_time_us for s in self.gt_window)

    def trigger(self) -> EstimateReportMsg | None:
        for r in reversed(self.est_window):
            if r.frame_id_ref == self.frame_id and r.client_id == self.client_id:
                return r
        return None

    def encode_body(self) -> bytes:
        crit = self.criterion.encode()
        meta = json.dumps({"criteria": self.criteria, "details": self.details},
                          sort_keys=True).encode()
        scen = self.scenario_text.encode()
        parts = [
            _U32.pack(self.record_id), bytes([len(crit)]), crit,
            _FIXED.pack(self.client_id, self.entity_id, self.sim_time_us, self.frame_id,
                        self.timing.t_render_us, self.timing.t_estimate_us,
                        self.timing.t_ingest_us, self.seed, self.window_s),
            _U32.pack(len(meta)), meta, _U32.pack(len(scen)), scen,
            _U32.pack(len(self.gt_window)),
        ]
        if len(self.gt_raw) == STATE_RECORD_SIZE * len(self.gt_window):
            parts.append(self.gt_raw)
        else:
            parts.extend(encode_state_update(s) for s in self.gt_window)
        parts.append(_U32.pack(len(self.est_window)))
        for r in self.est_window:
            p = r.encode()
            parts.append(_U32.pack(len(p)))
            parts.append(p)
        return b"".join(parts)

    def encode(self) -> bytes:
        body = self.encode_body()
        return RECORD_MAGIC + _U32.pack(len(body)) + body + _U32.pack(zlib.crc32(body))

    @classmethod
    def decode_body(cls, body: bytes) -> "MismatchRecord":
        try:
            (rid,) = _U32.unpack_from(body, 0)
            n = body[4]
            criterion = body[5:5 + n].decode()
            off = 5 + n
            cid, eid, t_sim, fid, t_r, t_e, t_i, seed, window = _FIXED.unpack_from(body, off)
            off += _FIXED.size
            (mlen,) = _U32.unpack_from(body, off)
            meta = json.loads(body[off + 4: off + 4 + mlen])
            off += 4 + mlen
            (slen,) = _U32.unpack_from(body, off)
            scen = body[off + 4: off + 4 + slen].decode()
            off += 4 + slen
            (n_gt,) = _U32.unpack_from(body, off)
            off += 4
            gt = []
            for _ in range(n_gt):
                if off + STATE_RECORD_SIZE > len(body):
                    raise RecordError("ground-truth window truncated")
                gt.append(decode_state_update(body[off:off + STATE_RECORD_SIZE], off))
                off += STATE_RECORD_SIZE
            (n_est,) = _U32.unpack_from(body, off)
            off += 4
            ests = []
            for _ in range(n_est):
                (plen,) = _U32.unpack_from(body, off)
                ests.append(EstimateReportMsg.decode(body[off + 4: off + 4 + plen]))
                off += 4 + plen
        except (struct.error, IndexError, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise RecordError(f"malformed record body: {exc}") from None
        if off != len(body):
            raise RecordError("trailing bytes in record body")
        return cls(rid, criterion, cid, eid, t_sim, fid, TimingTrace(t_r, t_e, t_i), seed,
                   window, scen, meta["criteria"], meta["details"], tuple(gt), tuple(ests))

    def summary(self) -> dict:
        return {
            "record_id": self.record_id, "criterion": self.criterion,
            "client_id": self.client_id, "entity_id": self.entity_id,
            "sim_time_s": self.sim_time_us / 1e6, "frame_id": self.frame_id,
            "pipeline_age_ms": self.timing.pipeline_age_us / 1000,
            "gt_samples": len(self.gt_window), "gt_span_s": self.gt_span_us() / 1e6,
            "estimates": len(self.est_window), "seed": self.seed,
            "details": self.details,
        }


class MismatchLog:
    """Writes records to ``<dir>/mismatches.bin`` and ``<dir>/index.jsonl``."""

    def __init__(self, directory: str | Path, retries: int = 3):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.path = self.dir / LOG_NAME
        self.index_path = self.dir / INDEX_NAME
        self.retries = retries
        self.written = 0
        self.failures = 0

    def append(self, record: MismatchRecord) -> int:
        """Append and return the byte offset; raises OSError after the retries."""
        data = record.encode()
        last: OSError | None = None
        for _ in range(self.retries):
            try:
                with open(self.path, "ab") as fh:
                    offset = fh.tell()
                    fh.write(data)
                line = dict(record.summary(), offset=offset, length=len(data))
                with open(self.index_path, "a") as fh:
                    fh.write(json.dumps(line, sort_keys=True) + "\n")
                self.written += 1
                return offset
            except OSError as exc:
                last = exc
        self.failures += 1
        raise last  # type: ignore[misc]


def iter_records(data: bytes) -> Iterator[tuple[int, MismatchRecord]]:
    off = 0
    while off < len(data):
        if data[off:off + 4] != RECORD_MAGIC:
            raise RecordError(f"bad record magic at offset {off}")
        if off + 8 > len(data):
            raise RecordError(f"truncated record header at offset {off}")
        (blen,) = _U32.unpack_from(data, off + 4)
        end = off + 8 + blen + 4
        if end > len(data):
            raise RecordError(f"truncated record at offset {off}")
        body = data[off + 8: off + 8 + blen]
        (crc,) = _U32.unpack_from(data, off + 8 + blen)
        if zlib.crc32(body) != crc:
            raise RecordError(f"checksum mismatch at offset {off}")
        yield off, MismatchRecord.decode_body(body)
        off = end


def read_records(path: str | Path) -> tuple[list[MismatchRecord], str | None]:
    """All intact records, plus a warning if the file ends in a damaged one."""
    data = Path(path).read_bytes()
    out: list[MismatchRecord] = []
    try:
        for _, rec in iter_records(data):
            out.append(rec)
    except RecordError as exc:
        return out, str(exc)
    return out, None


@dataclass
class PartialRecord:
    """What could be recovered from a damaged record."""

    fields: dict
    gt_window: list
    warning: str


def salvage(body: bytes, warning: str = "") -> PartialRecord:
    """Best-effort parse of a truncated body: header fields, scenario text and
    every whole ground-truth state record."""
    got: dict = {}
    states: list[EntityState] = []
    try:
        (got["record_id"],) = _U32.unpack_from(body, 0)
        n = body[4]
        got["criterion"] = body[5:5 + n].decode()
        off = 5 + n
        (got["client_id"], got["entity_id"], got["sim_time_us"], got["frame_id"], _, _, _,
         got["seed"], got["window_s"]) = _FIXED.unpack_from(body, off)
        off += _FIXED.size
        (mlen,) = _U32.unpack_from(body, off)
        if off + 4 + mlen > len(body):
            raise IndexError
        got["meta"] = json.loads(body[off + 4: off + 4 + mlen])
        off += 4 + mlen
        (slen,) = _U32.unpack_from(body, off)
        if off + 4 + slen > len(body):
            raise IndexError
        got["scenario_text"] = body[off + 4: off + 4 + slen].decode()
        off += 4 + slen
        (n_gt,) = _U32.unpack_from(body, off)
        off += 4
        for _ in range(n_gt):
            if off + STATE_RECORD_SIZE > len(body):
                break
            states.append(decode_state_update(body[off:off + STATE_RECORD_SIZE], off))
            off += STATE_RECORD_SIZE
    except (struct.error, IndexError, UnicodeDecodeError, ValueError):
        pass
    return PartialRecord(got, states, warning)


def read_log(path: str | Path) -> tuple[list[MismatchRecord], PartialRecord | None]:
    """Intact records and, if the file ends in a damaged record, its salvage."""
    data = Path(path).read_bytes()
    out: list[MismatchRecord] = []
    off = 0
    try:
        for off, rec in iter_records(data):
            out.append(rec)
    except RecordError as exc:
        start = off if not out else _end_of(data, off)
        return out, salvage(data[start + 8:], str(exc))
    return out, None


def _end_of(data: bytes, off: int) -> int:
    (blen,) = _U32.unpack_from(data, off + 4)
    return off + 8 + blen + 4
