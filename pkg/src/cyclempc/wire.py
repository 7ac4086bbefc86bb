"""Binary UDP frame formats for the split plant/controller topology.

Every frame is a 12-byte header followed by a fixed-size body chosen
by the message type.  All fields are little-endian; floats are IEEE-754
doubles.  Layout:

    header       "<IBBHI"   magic, version, msg_type, reserved, seq
    measurement  "<I6d"     cycle, imep, ca50, nox, mprr,
                            ref_imep, ref_ca50          (64 bytes total)
    actuation    "<I3dIB3x" cycle, doi_fuel, doi_water, nvo,
                            solve_time_us, status, pad  (48 bytes total)
    heartbeat    (no body)                              (12 bytes total)

The sequence number counts frames per sender and is the receiver's
duplicate/reorder handle; ``cycle`` identifies the engine cycle the
payload belongs to.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

MAGIC = 0x48434349
WIRE_VERSION = 1

MSG_MEASUREMENT = 1
MSG_ACTUATION = 2
MSG_HEARTBEAT = 3

STATUS_OK = 0
STATUS_DEGRADED = 1
STATUS_ABORTED = 2

STATUS_CODES = {"ok": STATUS_OK, "degraded": STATUS_DEGRADED,
                "aborted": STATUS_ABORTED}
STATUS_NAMES = {v: k for k, v in STATUS_CODES.items()}

_HEADER = struct.Struct("<IBBHI")
_MEASUREMENT = struct.Struct("<I6d")
_ACTUATION = struct.Struct("<I3dIB3x")

HEADER_SIZE = _HEADER.size          # 12
MEASUREMENT_SIZE = HEADER_SIZE + _MEASUREMENT.size   # 64
ACTUATION_SIZE = HEADER_SIZE + _ACTUATION.size       # 48
HEARTBEAT_SIZE = HEADER_SIZE


class WireError(Exception):
    """Base class for frame encode/decode failures."""


class WireMagicError(WireError):
    pass


class WireVersionError(WireError):
    def __init__(self, version: int):
        super().__init__(f"unsupported wire version {version}, "
                         f"expected {WIRE_VERSION}")
        self.version = version


class WireTypeError(WireError):
    def __init__(self, msg_type: int):
        super().__init__(f"unknown message type {msg_type}")
        self.msg_type = msg_type


class WireLengthError(WireError):
    pass


@dataclass(frozen=True)
class MeasurementMsg:
    """Plant -> controller: one cycle's measured outputs plus the
    reference pair the controller should track for this cycle."""

    cycle: int
    imep: float
    ca50: float
    nox: float
    mprr: float
    ref_imep: float
    ref_ca50: float


@dataclass(frozen=True)
class ActuationMsg:
    """Controller -> plant: the actuator command for one cycle."""

    cycle: int
    doi_fuel: float
    doi_water: float
    nvo: float
    solve_time_us: int
    status: int

    @property
    def status_name(self) -> str:
        return STATUS_NAMES.get(self.status, f"unknown({self.status})")


@dataclass(frozen=True)
class HeartbeatMsg:
    """Keepalive; carries no payload beyond the header sequence."""


def _header(msg_type: int, seq: int) -> bytes:
    return _HEADER.pack(MAGIC, WIRE_VERSION, msg_type, 0, seq & 0xFFFFFFFF)


def _check_finite(name, *values):
    if not all(math.isfinite(v) for v in values):
        raise ValueError(f"non-finite value in {name} frame")


def encode_measurement(seq: int, msg: MeasurementMsg) -> bytes:
    _check_finite("measurement", msg.imep, msg.ca50, msg.nox, msg.mprr,
                  msg.ref_imep, msg.ref_ca50)
    body = _MEASUREMENT.pack(msg.cycle & 0xFFFFFFFF, msg.imep, msg.ca50,
                             msg.nox, msg.mprr, msg.ref_imep, msg.ref_ca50)
    return _header(MSG_MEASUREMENT, seq) + body


def encode_actuation(seq: int, msg: ActuationMsg) -> bytes:
    _check_finite("actuation", msg.doi_fuel, msg.doi_water, msg.nvo)
    body = _ACTUATION.pack(msg.cycle & 0xFFFFFFFF, msg.doi_fuel,
                           msg.doi_water, msg.nvo,
                           min(msg.solve_time_us, 0xFFFFFFFF) & 0xFFFFFFFF,
                           msg.status & 0xFF)
    return _header(MSG_ACTUATION, seq) + body


def encode_heartbeat(seq: int) -> bytes:
    return _header(MSG_HEARTBEAT, seq)


_BODY_SIZES = {
    MSG_MEASUREMENT: _MEASUREMENT.size,
    MSG_ACTUATION: _ACTUATION.size,
    MSG_HEARTBEAT: 0,
}


def decode_frame(data: bytes):
    """Parse one datagram into ``(seq, message)``.

    Framing problems raise a specific WireError subclass; payload values
    are passed through untouched (receivers validate physics, not the
    codec).
    """
    if len(data) < HEADER_SIZE:
        raise WireLengthError(
            f"frame of {len(data)} bytes is shorter than the header")
    magic, version, msg_type, _reserved, seq = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise WireMagicError(f"bad magic 0x{magic:08X}")
    if version != WIRE_VERSION:
        raise WireVersionError(version)
    if msg_type not in _BODY_SIZES:
        raise WireTypeError(msg_type)
    expected = HEADER_SIZE + _BODY_SIZES[msg_type]
    if len(data) != expected:
        raise WireLengthError(
            f"message type {msg_type} needs {expected} bytes, "
            f"got {len(data)}")
    if msg_type == MSG_MEASUREMENT:
        fields = _MEASUREMENT.unpack_from(data, HEADER_SIZE)
        return seq, MeasurementMsg(*fields)
    if msg_type == MSG_ACTUATION:
        cycle, fuel, water, nvo, us, status = _ACTUATION.unpack_from(
            data, HEADER_SIZE)
        return seq, ActuationMsg(cycle, fuel, water, nvo, us, status)
    return seq, HeartbeatMsg()
