"""APDU framing and payload codecs for the match-on-card applet.

Command format (short APDU only)::

    CLA(1) INS(1) P1(1) P2(1) [Lc(1) data(Lc)] [Le(1)]

Template payload (ENROLL_TEMPLATE / VERIFY_BINARY), short form::

    Version(1) HashLenBits(1) RotationID(2) template(L/8)

Long form inserts SaltID(2) TemplateID(2) before the template, which then
starts at offset 8. All integers are big-endian; templates are packed
MSB-first.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Optional, Sequence

CLA_PROPRIETARY = 0x80

INS_ENROLL_TEMPLATE = 0x10
INS_VERIFY_BINARY = 0x20
INS_REKEY_ROTATION = 0x30

PROTOCOL_VERSION = 0x01
SUPPORTED_LENGTHS = (16, 32, 64, 128)

SHORT_HEADER_LEN = 4
LONG_HEADER_LEN = 8
MAX_SHORT_LC = 255


class StatusWord(IntEnum):
    OK = 0x9000
    CONDITIONS_NOT_SATISFIED = 0x6985
    WRONG_DATA = 0x6A80
    RECORD_NOT_FOUND = 0x6A82
    NOT_ENOUGH_MEMORY = 0x6A84
    SECURITY_STATUS_NOT_SATISFIED = 0x6982
    WRONG_LENGTH = 0x6700
    INS_NOT_SUPPORTED = 0x6D00

    @property
    def text(self) -> str:
        return _SW_TEXT[self]


_SW_TEXT = {
    StatusWord.OK: "Success / accept",
    StatusWord.CONDITIONS_NOT_SATISFIED: "Conditions not satisfied / reject",
    StatusWord.WRONG_DATA: "Wrong data",
    StatusWord.RECORD_NOT_FOUND: "Record not found",
    StatusWord.NOT_ENOUGH_MEMORY: "Not enough memory space",
    StatusWord.SECURITY_STATUS_NOT_SATISFIED: "Security status not satisfied",
    StatusWord.WRONG_LENGTH: "Wrong length",
    StatusWord.INS_NOT_SUPPORTED: "Instruction code not supported",
}


class ApduError(ValueError):
    """Base class for codec failures."""


class FramingError(ApduError):
    """Raw bytes are not a well-formed short APDU (Lc/Le mismatch, truncation)."""


class PayloadLengthError(ApduError):
    """Payload length is not one of the canonical sizes."""


class PayloadFormatError(ApduError):
    """Payload fields carry unsupported or inconsistent values."""


# ---------------------------------------------------------------------------
# Bit packing
# ---------------------------------------------------------------------------


def pack_bits(bits: Iterable[int]) -> bytes:
    """Pack a bit sequence MSB-first: bit 8i lands in the top bit of byte i."""
    bits = [int(b) for b in bits]
    if len(bits) % 8:
        raise ApduError(f"bit count {len(bits)} is not a multiple of 8")
    out = bytearray(len(bits) // 8)
    for i, b in enumerate(bits):
        if b not in (0, 1):
            raise ApduError(f"bit {i} has value {b}, expected 0 or 1")
        out[i >> 3] |= b << (7 - (i & 7))
    return bytes(out)


def unpack_bits(data: bytes) -> list[int]:
    """Inverse of :func:`pack_bits`."""
    return [(byte >> (7 - k)) & 1 for byte in data for k in range(8)]


@dataclass(frozen=True)
class BinaryTemplate:
    """An L-bit template held in its packed wire form."""

    data: bytes
    length_bits: int

    def __post_init__(self):
        if self.length_bits not in SUPPORTED_LENGTHS:
            raise ApduError(f"unsupported template length {self.length_bits}")
        if len(self.data) != self.length_bits // 8:
            raise ApduError(
                f"{self.length_bits}-bit template needs {self.length_bits // 8} bytes, "
                f"got {len(self.data)}"
            )
        object.__setattr__(self, "data", bytes(self.data))

    @classmethod
    def from_bits(cls, bits: Sequence[int]) -> BinaryTemplate:
        return cls(pack_bits(bits), len(bits))

    @classmethod
    def from_hex(cls, text: str) -> BinaryTemplate:
        data = bytes.fromhex(text)
        return cls(data, len(data) * 8)

    @property
    def bits(self) -> list[int]:
        return unpack_bits(self.data)

    def hex(self) -> str:
        return self.data.hex().upper()

    def __len__(self) -> int:
        return self.length_bits


# ---------------------------------------------------------------------------
# Command / response frames
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ApduCommand:
    cla: int
    ins: int
    p1: int = 0
    p2: int = 0
    data: bytes = b""
    le: Optional[int] = None

    def __post_init__(self):
        for name in ("cla", "ins", "p1", "p2"):
            value = getattr(self, name)
            if not 0 <= value <= 0xFF:
                raise ApduError(f"{name}=0x{value:X} does not fit in a byte")
        if self.le is not None and not 0 <= self.le <= 0xFF:
            raise ApduError(f"le={self.le} does not fit in a byte")
        object.__setattr__(self, "data", bytes(self.data))

    @property
    def lc(self) -> int:
        return len(self.data)

    def to_bytes(self) -> bytes:
        return serialize_command(self)


@dataclass(frozen=True)
class ApduResponse:
    sw: int
    data: bytes = b""

    def to_bytes(self) -> bytes:
        return bytes(self.data) + self.sw.to_bytes(2, "big")

    @classmethod
    def from_bytes(cls, raw: bytes) -> ApduResponse:
        if len(raw) < 2:
            raise FramingError("response shorter than a status word")
        return cls(int.from_bytes(raw[-2:], "big"), bytes(raw[:-2]))

    @property
    def ok(self) -> bool:
        return self.sw == StatusWord.OK


def parse_command(raw: bytes) -> ApduCommand:
    """Parse a short APDU, rejecting any Lc that disagrees with the body.

    Accepted shapes: header only; header + Le; header + Lc + data;
    header + Lc + data + Le. Anything else raises :class:`FramingError`.
    """
    raw = bytes(raw)
    if len(raw) < 4:
        raise FramingError(f"APDU too short ({len(raw)} bytes)")
    cla, ins, p1, p2 = raw[:4]
    body = raw[4:]
    if not body:
        return ApduCommand(cla, ins, p1, p2)
    if len(body) == 1:
        return ApduCommand(cla, ins, p1, p2, le=body[0])
    lc = body[0]
    if lc == 0:
        # short form reserves Lc=0; extended APDUs are not supported
        raise FramingError("Lc=0 followed by data")
    if len(body) == 1 + lc:
        return ApduCommand(cla, ins, p1, p2, body[1:])
    if len(body) == 2 + lc:
        return ApduCommand(cla, ins, p1, p2, body[1:-1], le=body[-1])
    raise FramingError(f"Lc={lc} but {len(body) - 1} bytes follow")


def serialize_command(cmd: ApduCommand) -> bytes:
    if len(cmd.data) > MAX_SHORT_LC:
        raise ApduError(f"data length {len(cmd.data)} exceeds short APDU limit")
    out = bytearray((cmd.cla, cmd.ins, cmd.p1, cmd.p2))
    if cmd.data:
        out.append(len(cmd.data))
        out += cmd.data
    if cmd.le is not None:
        out.append(cmd.le)
    return bytes(out)


# ---------------------------------------------------------------------------
# Payloads
# ---------------------------------------------------------------------------


def canonical_payload_lengths(length_bits: int) -> tuple[int, int]:
    """The two accepted template-payload sizes (short form, long form)."""
    n = length_bits // 8
    return SHORT_HEADER_LEN + n, LONG_HEADER_LEN + n


@dataclass(frozen=True)
class TemplatePayload:
    """Data field shared by ENROLL_TEMPLATE and VERIFY_BINARY.

    ``salt_id`` and ``template_id`` travel together: both set selects the
    8-byte long-form header, both ``None`` the 4-byte short form.
    """

    rotation_id: int
    template: BinaryTemplate
    salt_id: Optional[int] = None
    template_id: Optional[int] = None
    version: int = PROTOCOL_VERSION

    def __post_init__(self):
        if not 0 <= self.rotation_id <= 0xFFFF:
            raise ApduError(f"rotation_id {self.rotation_id} out of u16 range")
        if (self.salt_id is None) != (self.template_id is None):
            raise ApduError("salt_id and template_id must both be set or both unset")
        for value in (self.salt_id, self.template_id):
            if value is not None and not 0 <= value <= 0xFFFF:
                raise ApduError(f"optional field {value} out of u16 range")

    @property
    def hash_len_bits(self) -> int:
        return self.template.length_bits

    @property
    def long_form(self) -> bool:
        return self.salt_id is not None

    def encode(self) -> bytes:
        out = struct.pack(">BBH", self.version, self.hash_len_bits, self.rotation_id)
        if self.long_form:
            out += struct.pack(">HH", self.salt_id, self.template_id)
        return out + self.template.data

    @classmethod
    def decode(cls, data: bytes):
        data = bytes(data)
        if len(data) < 2:
            raise PayloadLengthError(f"payload of {len(data)} bytes has no header")
        version, hash_len_bits = data[0], data[1]
        if version != PROTOCOL_VERSION:
            raise PayloadFormatError(f"unsupported version 0x{version:02X}")
        if hash_len_bits not in SUPPORTED_LENGTHS:
            raise PayloadFormatError(f"unsupported HashLenBits {hash_len_bits}")
        short_len, long_len = canonical_payload_lengths(hash_len_bits)
        if len(data) == short_len:
            (rotation_id,) = struct.unpack_from(">H", data, 2)
            salt_id = template_id = None
            offset = SHORT_HEADER_LEN
        elif len(data) == long_len:
            rotation_id, salt_id, template_id = struct.unpack_from(">HHH", data, 2)
            offset = LONG_HEADER_LEN
        else:
            raise PayloadLengthError(
                f"{len(data)} bytes is not canonical for L={hash_len_bits} "
                f"(expected {short_len} or {long_len})"
            )
        template = BinaryTemplate(data[offset:], hash_len_bits)
        return cls(rotation_id, template, salt_id, template_id, version)


class EnrollPayload(TemplatePayload):
    pass


class VerifyPayload(TemplatePayload):
    pass


@dataclass(frozen=True)
class RekeyPayload:
    new_rotation_id: int

    def __post_init__(self):
        if not 0 <= self.new_rotation_id <= 0xFFFF:
            raise ApduError(f"rotation_id {self.new_rotation_id} out of u16 range")

    def encode(self) -> bytes:
        return struct.pack(">H", self.new_rotation_id)

    @classmethod
    def decode(cls, data: bytes) -> RekeyPayload:
        if len(data) != 2:
            raise PayloadLengthError(f"REKEY payload must be 2 bytes, got {len(data)}")
        return cls(struct.unpack(">H", bytes(data))[0])


# ---------------------------------------------------------------------------
# Command builders and trace formatting
# ---------------------------------------------------------------------------


def enroll_command(payload: TemplatePayload) -> ApduCommand:
    return ApduCommand(CLA_PROPRIETARY, INS_ENROLL_TEMPLATE, 0, 0, payload.encode())


def verify_command(payload: TemplatePayload) -> ApduCommand:
    return ApduCommand(CLA_PROPRIETARY, INS_VERIFY_BINARY, 0, 0, payload.encode())


def rekey_command(new_rotation_id: int) -> ApduCommand:
    return ApduCommand(
        CLA_PROPRIETARY, INS_REKEY_ROTATION, 0, 0, RekeyPayload(new_rotation_id).encode()
    )


def hexdump(data: bytes) -> str:
    return " ".join(f"{b:02X}" for b in data)


def format_trace(command: bytes, response: bytes) -> list[str]:
    """Two log lines: ``> `` command bytes, ``< `` response bytes."""
    return [f"> {hexdump(command)}", f"< {hexdump(response)}"]


@dataclass
class TraceLog:
    lines: list[str] = field(default_factory=list)

    def record(self, command: bytes, response: bytes) -> None:
        self.lines.extend(format_trace(command, response))

    def dump(self) -> str:
        return "".join(line + "\n" for line in self.lines)
