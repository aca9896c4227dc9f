"""Bit-exact wire formats and message framing.

Every message is ``header + payload``. The 8-byte header is::

    offset 0  2 bytes  magic 0xC0 0xCA
    offset 2  u8       version (1)
    offset 3  u8       msg_type (MsgType)
    offset 4  u32      payload_len (<= 16 MiB)

All integers are little-endian, floats IEEE-754 binary32. Payload layouts are
documented next to each message class and in docs/wire-protocol.md.
"""

from __future__ import annotations

import enum
import math
import os
import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

from .sensor import CameraPose, Detection, ProjectedBox
from .world import EntityState, KindTag, Vec3

MAGIC = b"\xC0\xCA"
VERSION = 1
MAX_PAYLOAD = 16 * 1024 * 1024
PADDING_BYTES = 320 * 240 * 3  # one 320x240 RGB frame with 8-bit channels
STATE_RECORD_SIZE = 48

HEADER = struct.Struct("<2sBBI")
STATE_RECORD = struct.Struct("<IQ9f")
_POSE = struct.Struct("<4f")
_BOX = struct.Struct("<IBBffff")
_DET = struct.Struct("<Bfffff")
_EST = struct.Struct("<Bffffff")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")

assert STATE_RECORD.size == STATE_RECORD_SIZE and HEADER.size == 8


class MsgType(enum.IntEnum):
    HELLO = 1
    SENSOR_FRAME = 2
    CONTROL_CMD = 3
    STATE_UPDATE_BATCH = 4
    ESTIMATE_REPORT = 5
    INFER_REQUEST = 6
    INFER_RESPONSE = 7
    ACK = 8
    BYE = 9


class Role(enum.IntEnum):
    CLIENT = 1
    DETECTOR = 2
    INFERENCE_USER = 3
    ESTIMATE_SOURCE = 4


class DerivedState(enum.IntEnum):
    SAFE_TO_DRIVE = 0
    SLOW_DOWN = 1
    STOP = 2


class ProtocolError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (offset {offset})")


class EncodeError(ProtocolError):
    pass


def padding_from_env(default: bool = False) -> bool:
    value = os.environ.get("HYBRIDSIM_PADDING")
    if value is None:
        return default
    return value.strip().lower() in ("1", "on", "true", "yes")


def _check_finite(values: Sequence[float], base: int, what: str) -> None:
    for i, v in enumerate(values):
        if not math.isfinite(v):
            raise ProtocolError(f"non-finite {what}", base + 4 * i)


# ---------------------------------------------------------------- state records

def encode_state_update(state: EntityState) -> bytes:
    """48-byte record: id | sim_time_us | position | velocity | direction."""
    floats = (*state.position, *state.velocity, *state.direction)
    if not all(math.isfinite(f) for f in floats):
        raise EncodeError(f"non-finite state for entity {state.entity_id}")
    try:
        return STATE_RECORD.pack(state.entity_id, state.sim_time_us, *floats)
    except (struct.error, OverflowError) as exc:
        raise EncodeError(str(exc)) from None


def decode_state_update(data: bytes, base: int = 0) -> EntityState:
    if len(data) != STATE_RECORD_SIZE:
        raise ProtocolError(f"state record must be {STATE_RECORD_SIZE} bytes, got {len(data)}")
    eid, t, *f = STATE_RECORD.unpack(data)
    _check_finite(f, base + 12, "float in state record")
    return EntityState(eid, t, Vec3(*f[0:3]), Vec3(*f[3:6]), Vec3(*f[6:9]))


def encode_state_batch(states: Sequence[EntityState]) -> bytes:
    return _U32.pack(len(states)) + b"".join(encode_state_update(s) for s in states)


def decode_state_batch(payload: bytes) -> list[EntityState]:
    if len(payload) < 4:
        raise ProtocolError("truncated state batch")
    (n,) = _U32.unpack_from(payload)
    if len(payload) != 4 + n * STATE_RECORD_SIZE:
        raise ProtocolError(f"state batch length {len(payload)} does not match count {n}")
    return [decode_state_update(payload[4 + i * 48: 52 + i * 48], 4 + i * 48) for i in range(n)]


# ---------------------------------------------------------------- helper blocks

def encode_pose(pose: CameraPose) -> bytes:
    return _POSE.pack(*pose.position, pose.yaw)


def decode_pose(data: bytes, offset: int = 0) -> CameraPose:
    x, y, z, yaw = _POSE.unpack_from(data, offset)
    _check_finite((x, y, z, yaw), offset, "pose component")
    return CameraPose(Vec3(x, y, z), yaw)


def encode_annotations(boxes: Sequence[ProjectedBox]) -> bytes:
    """u16 count, then per box: u32 id, u8 class, u8 truncated, f32 u_min, v_min, b, h."""
    parts = [_U16.pack(len(boxes))]
    for bx in boxes:
        parts.append(_BOX.pack(bx.entity_id, int(bx.tag), int(bx.truncated),
                               bx.u_min, bx.v_min, bx.b, bx.h))
    return b"".join(parts)


def decode_annotations(data: bytes) -> list[ProjectedBox]:
    if len(data) < 2:
        raise ProtocolError("truncated annotation block")
    (n,) = _U16.unpack_from(data)
    if len(data) != 2 + n * _BOX.size:
        raise ProtocolError("annotation block length mismatch")
    out = []
    for i in range(n):
        eid, tag, trunc, u, v, b, h = _BOX.unpack_from(data, 2 + i * _BOX.size)
        out.append(ProjectedBox(eid, KindTag(tag), u, v, b, h, bool(trunc)))
    return out


def _pack_str8(s: str) -> bytes:
    raw = s.encode()
    if len(raw) > 255:
        raise EncodeError("string longer than 255 bytes")
    return bytes([len(raw)]) + raw


def _unpack_str8(data: bytes, off: int) -> tuple[str, int]:
    n = data[off]
    return data[off + 1: off + 1 + n].decode(), off + 1 + n


# ---------------------------------------------------------------- messages

@dataclass(frozen=True)
class HelloMsg:
    """u8 role | u32 client_id | u32 entity_id (0xFFFFFFFF = any) | f32 fps."""

    msg_type = MsgType.HELLO
    role: Role
    client_id: int = 0
    entity_id: int = 0xFFFFFFFF
    fps: float = 0.0
    _S = struct.Struct("<BIIf")

    def encode(self) -> bytes:
        return self._S.pack(int(self.role), self.client_id, self.entity_id, self.fps)

    @classmethod
    def decode(cls, p: bytes) -> "HelloMsg":
        role, cid, eid, fps = cls._S.unpack(p)
        return cls(Role(role), cid, eid, fps)


@dataclass(frozen=True)
class AckMsg:
    """Empty (plain OK) or u8 status | u64 ref | utf-8 reason."""

    msg_type = MsgType.ACK
    status: int = 0
    ref: int = 0
    reason: str = ""
    _S = struct.Struct("<BQ")

    OK = 0
    REJECTED = 1

    def encode(self) -> bytes:
        if self.status == 0 and self.ref == 0 and not self.reason:
            return b""
        return self._S.pack(self.status, self.ref) + self.reason.encode()

    @classmethod
    def decode(cls, p: bytes) -> "AckMsg":
        if not p:
            return cls()
        status, ref = cls._S.unpack_from(p)
        return cls(status, ref, p[cls._S.size:].decode())


@dataclass(frozen=True)
class ByeMsg:
    msg_type = MsgType.BYE
    reason: str = ""

    def encode(self) -> bytes:
        return self.reason.encode()

    @classmethod
    def decode(cls, p: bytes) -> "ByeMsg":
        return cls(p.decode())


@dataclass(frozen=True)
class StateUpdateBatch:
    msg_type = MsgType.STATE_UPDATE_BATCH
    states: tuple[EntityState, ...]

    def encode(self) -> bytes:
        return encode_state_batch(self.states)

    @classmethod
    def decode(cls, p: bytes) -> "StateUpdateBatch":
        return cls(tuple(decode_state_batch(p)))


@dataclass(frozen=True)
class SensorFrameMsg:
    """u64 frame_id | u64 sim_time_us | u64 t_render_us | u32 client_id | pose (4 x f32)
    | u32 annotation_len | annotation block | u32 padding_len | padding bytes.

    ``annotations`` stays an opaque byte string: clients forward it to the
    inference service and never look inside.
    """

    msg_type = MsgType.SENSOR_FRAME
    frame_id: int
    sim_time_us: int
    t_render_us: int
    client_id: int
    camera_pose: CameraPose
    annotations: bytes = b"\x00\x00"
    padding_len: int = 0
    _S = struct.Struct("<QQQI")

    def encode(self) -> bytes:
        if self.padding_len not in (0, PADDING_BYTES):
            raise EncodeError(f"padding_len must be 0 or {PADDING_BYTES}")
        return b"".join((
            self._S.pack(self.frame_id, self.sim_time_us, self.t_render_us, self.client_id),
            encode_pose(self.camera_pose),
            _U32.pack(len(self.annotations)), self.annotations,
            _U32.pack(self.padding_len), bytes(self.padding_len),
        ))

    @classmethod
    def decode(cls, p: bytes) -> "SensorFrameMsg":
        fid, t_sim, t_render, cid = cls._S.unpack_from(p)
        off = cls._S.size
        pose = decode_pose(p, off)
        off += _POSE.size
        (alen,) = _U32.unpack_from(p, off)
        off += 4
        ann = p[off: off + alen]
        off += alen
        (plen,) = _U32.unpack_from(p, off)
        off += 4
        if plen not in (0, PADDING_BYTES):
            raise ProtocolError("invalid padding_len", off - 4)
        if len(p) != off + plen:
            raise ProtocolError("sensor frame length mismatch")
        return cls(fid, t_sim, t_render, cid, pose, bytes(ann), plen)


@dataclass(frozen=True)
class ControlCmdMsg:
    """u64 frame_id_ref | f32 steering (rad) | f32 throttle | f32 brake."""

    msg_type = MsgType.CONTROL_CMD
    frame_id_ref: int
    steering: float = 0.0
    throttle: float = 0.0
    brake: float = 0.0
    _S = struct.Struct("<Qfff")

    def encode(self) -> bytes:
        return self._S.pack(self.frame_id_ref, self.steering, self.throttle, self.brake)

    @classmethod
    def decode(cls, p: bytes) -> "ControlCmdMsg":
        return cls(*cls._S.unpack(p))

    def validate(self) -> str | None:
        """Return a reason string if the command is out of range."""
        if not all(math.isfinite(v) for v in (self.steering, self.throttle, self.brake)):
            return "non-finite control value"
        if not 0.0 <= self.throttle <= 1.0:
            return f"throttle {self.throttle} outside [0, 1]"
        if not 0.0 <= self.brake <= 1.0:
            return f"brake {self.brake} outside [0, 1]"
        if self.throttle > 0.5 and self.brake > 0.5:
            return "throttle and brake both above 0.5"
        return None


@dataclass(frozen=True)
class EstimateEntry:
    tag: KindTag
    distance: float
    bearing: float
    world_position: Vec3
    confidence: float


@dataclass(frozen=True)
class EstimateReportMsg:
    """u32 client_id | u32 entity_id | u64 frame_id_ref | u8 derived_state
    | u64 sim_time_us | u64 t_render_us | u64 t_estimate_us | u16 count
    | count x (u8 class | f32 distance | f32 bearing | 3 x f32 world pos | f32 confidence).
    """

    msg_type = MsgType.ESTIMATE_REPORT
    client_id: int
    entity_id: int
    frame_id_ref: int
    derived_state: DerivedState
    sim_time_us: int
    t_render_us: int
    t_estimate_us: int
    estimates: tuple[EstimateEntry, ...] = ()
    _S = struct.Struct("<IIQBQQQH")

    def encode(self) -> bytes:
        parts = [self._S.pack(self.client_id, self.entity_id, self.frame_id_ref,
                              int(self.derived_state), self.sim_time_us, self.t_render_us,
                              self.t_estimate_us, len(self.estimates))]
        for e in self.estimates:
            parts.append(_EST.pack(int(e.tag), e.distance, e.bearing, *e.world_position,
                                   e.confidence))
        return b"".join(parts)

    @classmethod
    def decode(cls, p: bytes) -> "EstimateReportMsg":
        cid, eid, fid, ds, t_sim, t_r, t_e, n = cls._S.unpack_from(p)
        if len(p) != cls._S.size + n * _EST.size:
            raise ProtocolError("estimate report length mismatch")
        ests = []
        for i in range(n):
            off = cls._S.size + i * _EST.size
            tag, d, b, x, y, z, c = _EST.unpack_from(p, off)
            _check_finite((d, b, x, y, z, c), off + 1, "estimate value")
            ests.append(EstimateEntry(KindTag(tag), d, b, Vec3(x, y, z), c))
        return cls(cid, eid, fid, DerivedState(ds), t_sim, t_r, t_e, tuple(ests))


@dataclass(frozen=True)
class InferRequestMsg:
    """str8 model | u32 client_id | u64 frame_id | u64 sim_time_us | u64 t_send_us
    | pose (4 x f32) | u32 annotation_len | annotation block."""

    msg_type = MsgType.INFER_REQUEST
    model: str
    client_id: int
    frame_id: int
    sim_time_us: int
    t_send_us: int
    camera_pose: CameraPose
    annotations: bytes = b"\x00\x00"
    _S = struct.Struct("<IQQQ")

    def encode(self) -> bytes:
        return b"".join((
            _pack_str8(self.model),
            self._S.pack(self.client_id, self.frame_id, self.sim_time_us, self.t_send_us),
            encode_pose(self.camera_pose),
            _U32.pack(len(self.annotations)), self.annotations,
        ))

    @classmethod
    def decode(cls, p: bytes) -> "InferRequestMsg":
        model, off = _unpack_str8(p, 0)
        cid, fid, t_sim, t_send = cls._S.unpack_from(p, off)
        off += cls._S.size
        pose = decode_pose(p, off)
        off += _POSE.size
        (alen,) = _U32.unpack_from(p, off)
        off += 4
        if len(p) != off + alen:
            raise ProtocolError("infer request length mismatch")
        return cls(model, cid, fid, t_sim, t_send, pose, bytes(p[off:]))


class InferStatus(enum.IntEnum):
    OK = 0
    OVERLOADED = 1
    UNKNOWN_MODEL = 2
    WRONG_KIND = 3
    UNAVAILABLE = 4


class ModelKind(enum.IntEnum):
    OBJECT_DETECTOR = 0
    STEERING_PREDICTOR = 1


@dataclass(frozen=True)
class InferResponseMsg:
    """u8 status | str8 model | u64 frame_id | u32 client_id | u32 model_version
    | u64 t_queue_us | u64 t_service_us | u8 kind | payload, where payload is
    u16 count + count x (u8 class | f32 conf | f32 u_min, v_min, b, h) for
    detectors and a single f32 steering angle for steering predictors."""

    msg_type = MsgType.INFER_RESPONSE
    status: InferStatus
    model: str
    frame_id: int
    client_id: int
    model_version: int = 0
    t_queue_us: int = 0
    t_service_us: int = 0
    kind: ModelKind = ModelKind.OBJECT_DETECTOR
    detections: tuple[Detection, ...] = ()
    steering: float = 0.0
    _S = struct.Struct("<QIIQQB")

    def encode(self) -> bytes:
        parts = [bytes([int(self.status)]), _pack_str8(self.model),
                 self._S.pack(self.frame_id, self.client_id, self.model_version,
                              self.t_queue_us, self.t_service_us, int(self.kind))]
        if self.kind == ModelKind.OBJECT_DETECTOR:
            parts.append(_U16.pack(len(self.detections)))
            for d in self.detections:
                parts.append(_DET.pack(int(d.tag), d.confidence, d.u_min, d.v_min, d.b, d.h))
        else:
            parts.append(struct.pack("<f", self.steering))
        return b"".join(parts)

    @classmethod
    def decode(cls, p: bytes) -> "InferResponseMsg":
        status = InferStatus(p[0])
        model, off = _unpack_str8(p, 1)
        fid, cid, ver, tq, ts, kind = cls._S.unpack_from(p, off)
        off += cls._S.size
        kind = ModelKind(kind)
        dets: list[Detection] = []
        steering = 0.0
        if kind == ModelKind.OBJECT_DETECTOR:
            (n,) = _U16.unpack_from(p, off)
            off += 2
            if len(p) != off + n * _DET.size:
                raise ProtocolError("infer response length mismatch")
            for i in range(n):
                tag, c, u, v, b, h = _DET.unpack_from(p, off + i * _DET.size)
                dets.append(Detection(KindTag(tag), c, u, v, b, h))
        else:
            (steering,) = struct.unpack_from("<f", p, off)
        return cls(status, model, fid, cid, ver, tq, ts, kind, tuple(dets), steering)


MESSAGE_CLASSES = {
    MsgType.HELLO: HelloMsg,
    MsgType.SENSOR_FRAME: SensorFrameMsg,
    MsgType.CONTROL_CMD: ControlCmdMsg,
    MsgType.STATE_UPDATE_BATCH: StateUpdateBatch,
    MsgType.ESTIMATE_REPORT: EstimateReportMsg,
    MsgType.INFER_REQUEST: InferRequestMsg,
    MsgType.INFER_RESPONSE: InferResponseMsg,
    MsgType.ACK: AckMsg,
    MsgType.BYE: ByeMsg,
}


# ---------------------------------------------------------------- framing

class Frame(NamedTuple):
    msg_type: MsgType
    payload: bytes

    def decode(self):
        return decode_payload(self.msg_type, self.payload)


def frame_message(msg_type: MsgType, payload: bytes) -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise EncodeError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return HEADER.pack(MAGIC, VERSION, int(msg_type), len(payload)) + payload


def encode_message(msg) -> bytes:
    return frame_message(msg.msg_type, msg.encode())


def decode_payload(msg_type: MsgType, payload: bytes):
    try:
        return MESSAGE_CLASSES[msg_type].decode(payload)
    except (struct.error, IndexError, UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, ProtocolError):
            raise
        raise ProtocolError(f"malformed {msg_type.name} payload: {exc}") from None


class NeedMore(NamedTuple):
    missing: int


def _check_header(buf: bytes) -> tuple[MsgType, int]:
    _, version, mtype, plen = HEADER.unpack_from(buf)
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}", 2)
    try:
        msg_type = MsgType(mtype)
    except ValueError:
        raise ProtocolError(f"unknown msg_type {mtype}", 3) from None
    if plen > MAX_PAYLOAD:
        raise ProtocolError(f"payload_len {plen} exceeds {MAX_PAYLOAD}", 4)
    return msg_type, plen


def parse_message(buf: bytes) -> tuple[Frame | None, bytes]:
    """Parse one message from the front of ``buf``.

    Returns ``(frame, rest)``; ``frame`` is None when more bytes are needed.
    Leading garbage is skipped up to the next magic.
    """
    buf = bytes(buf)
    start = buf.find(MAGIC)
    if start < 0:
        return None, buf[-1:] if buf.endswith(MAGIC[:1]) else b""
    buf = buf[start:]
    if len(buf) < HEADER.size:
        return None, buf
    msg_type, plen = _check_header(buf)
    end = HEADER.size + plen
    if len(buf) < end:
        return None, buf
    return Frame(msg_type, buf[HEADER.size:end]), buf[end:]


class FrameParser:
    """Incremental parser owning its stream buffer; one thread at a time."""

    def __init__(self):
        self._buf = bytearray()
        self.skipped_bytes = 0

    def feed(self, data: bytes) -> list[Frame]:
        self._buf += data
        frames = []
        while True:
            frame = self._next()
            if frame is None:
                return frames
            frames.append(frame)

    def _next(self) -> Frame | None:
        buf = self._buf
        if not buf.startswith(MAGIC):
            idx = buf.find(MAGIC)
            if idx < 0:
                keep = 1 if buf.endswith(MAGIC[:1]) else 0
                self.skipped_bytes += len(buf) - keep
                del buf[: len(buf) - keep]
                return None
            self.skipped_bytes += idx
            del buf[:idx]
        if len(buf) < HEADER.size:
            return None
        msg_type, plen = _check_header(buf)
        end = HEADER.size + plen
        if len(buf) < end:
            return None
        payload = bytes(buf[HEADER.size:end])
        del buf[:end]
        return Frame(msg_type, payload)

    @property
    def buffered(self) -> int:
        return len(self._buf)
