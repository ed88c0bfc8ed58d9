"""Simulated secure element: APDU state machine over a small EEPROM model.

The card stores one reference template per TemplateID (a single default
record unless the long-form header is used), compares probes with a
fixed-schedule XOR+popcount and answers with a status word only.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from typing import Optional

from .apdu import (
    CLA_PROPRIETARY,
    INS_ENROLL_TEMPLATE,
    INS_REKEY_ROTATION,
    INS_VERIFY_BINARY,
    SUPPORTED_LENGTHS,
    ApduResponse,
    BinaryTemplate,
    EnrollPayload,
    FramingError,
    PayloadFormatError,
    PayloadLengthError,
    RekeyPayload,
    StatusWord,
    VerifyPayload,
    parse_command,
)

ROTATION_ID_BYTES = 2
POLICY_FLAG_BYTES = 1
MAX_TEMPLATE_BYTES = max(SUPPORTED_LENGTHS) // 8
INTEGRITY_TAG_RANGE = (8, 16)

_ACCEPT = int(StatusWord.OK)
_REJECT = int(StatusWord.CONDITIONS_NOT_SATISFIED)


def record_footprint(length_bits: int, tag_bytes: int = 0) -> int:
    """EEPROM bytes for one identity: template + RotationID + policy (+ tag)."""
    if length_bits not in SUPPORTED_LENGTHS:
        raise ValueError(f"unsupported template length {length_bits}")
    if tag_bytes and not INTEGRITY_TAG_RANGE[0] <= tag_bytes <= INTEGRITY_TAG_RANGE[1]:
        raise ValueError(f"integrity tag must be 8..16 bytes, got {tag_bytes}")
    return length_bits // 8 + ROTATION_ID_BYTES + POLICY_FLAG_BYTES + tag_bytes


class OpCounter:
    """Records every primitive operation executed by the matcher.

    Two runs are constant-time equivalent when their ``events`` lists are
    equal; the lists never contain operand values.
    """

    def __init__(self):
        self.events: list[str] = []

    def tick(self, op: str) -> None:
        self.events.append(op)

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for op in self.events:
            out[op] = out.get(op, 0) + 1
        return out


def _popcount8(x: int) -> int:
    # SWAR popcount: no table lookup, no branches
    x = x - ((x >> 1) & 0x55)
    x = (x & 0x33) + ((x >> 2) & 0x33)
    return (x + (x >> 4)) & 0x0F


def hamming_ct(a: bytes, b: bytes, counter: Optional[OpCounter] = None) -> int:
    """Hamming distance with a loop schedule that depends only on the length."""
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    acc = 0
    for i in range(len(a)):
        x = a[i] ^ b[i]
        acc += _popcount8(x)
        if counter is not None:
            counter.tick("load")
            counter.tick("xor")
            counter.tick("popcount")
            counter.tick("add")
    return acc


def ct_less_equal(d: int, tau: int, counter: Optional[OpCounter] = None) -> int:
    """1 if d <= tau else 0, via the sign bit of d - tau - 1 (operands < 2**16)."""
    if counter is not None:
        counter.tick("compare")
    return ((d - tau - 1) >> 16) & 1


def ct_select_sw(accept: int, counter: Optional[OpCounter] = None) -> int:
    if counter is not None:
        counter.tick("select")
    return _REJECT ^ ((_REJECT ^ _ACCEPT) & -accept)


@dataclass
class CardConfig:
    """Personalization-time settings; ``thresholds`` maps L -> tau."""

    thresholds: dict[int, int]
    eeprom_quota_bytes: int = 512
    require_issuer_auth_for_enroll: bool = False
    rate_limit: Optional[int] = None
    integrity_tag_bytes: int = 0

    def __post_init__(self):
        self.thresholds = {int(k): int(v) for k, v in self.thresholds.items()}
        for length_bits, tau in self.thresholds.items():
            if length_bits not in SUPPORTED_LENGTHS:
                raise ValueError(f"threshold for unsupported length {length_bits}")
            if not 0 <= tau <= length_bits:
                raise ValueError(f"tau={tau} outside [0, {length_bits}]")
        if self.eeprom_quota_bytes < 0:
            raise ValueError("eeprom quota must be non-negative")
        if self.rate_limit is not None and self.rate_limit < 1:
            raise ValueError("rate_limit must be >= 1 when set")
        record_footprint(64, self.integrity_tag_bytes)


@dataclass
class TemplateRecord:
    template: bytearray
    length_bits: int
    rotation_id: int
    policy_flags: int = 0
    salt_id: Optional[int] = None
    template_id: Optional[int] = None
    integrity_tag: Optional[bytearray] = None

    @property
    def footprint(self) -> int:
        tag = len(self.integrity_tag) if self.integrity_tag is not None else 0
        return record_footprint(self.length_bits, tag)

    def erase(self) -> None:
        for buf in (self.template, self.integrity_tag):
            if buf is not None:
                for i in range(len(buf)):
                    buf[i] = 0


@dataclass
class Card:
    """One card instance. Not thread-safe; serialize access per instance."""

    config: CardConfig
    records: dict[Optional[int], TemplateRecord] = field(default_factory=dict)
    active_rotation_id: Optional[int] = None
    issuer_authenticated: bool = False
    verify_attempt_counter: int = 0
    probe_buffer: bytearray = field(default_factory=lambda: bytearray(MAX_TEMPLATE_BYTES))
    op_counter: Optional[OpCounter] = field(default=None, compare=False, repr=False)

    # -- simulator-level session API (not reachable over APDUs) ------------

    def authenticate_issuer(self) -> None:
        self.issuer_authenticated = True

    def reset_session(self) -> None:
        self.issuer_authenticated = False
        self.verify_attempt_counter = 0

    @property
    def used_bytes(self) -> int:
        return sum(r.footprint for r in self.records.values())

    # -- APDU entry point --------------------------------------------------

    def transmit(self, raw: bytes) -> bytes:
        return self.process(raw).to_bytes()

    def process(self, raw: bytes) -> ApduResponse:
        """Handle one command frame. Never raises; the answer is the SW."""
        try:
            sw = self._dispatch(bytes(raw))
        finally:
            self._clear_probe()
        return ApduResponse(int(sw))

    def _dispatch(self, raw: bytes) -> int:
        if len(raw) < 4:
            return StatusWord.WRONG_LENGTH
        if raw[0] != CLA_PROPRIETARY or raw[1] not in _HANDLERS:
            return StatusWord.INS_NOT_SUPPORTED
        try:
            cmd = parse_command(raw)
        except FramingError:
            return StatusWord.WRONG_LENGTH
        if cmd.le not in (None, 0):
            return StatusWord.WRONG_LENGTH
        if cmd.p1 or cmd.p2:
            return StatusWord.WRONG_DATA
        decoder, handler = _HANDLERS[cmd.ins]
        try:
            payload = decoder(cmd.data)
        except PayloadLengthError:
            return StatusWord.WRONG_LENGTH
        except PayloadFormatError:
            return StatusWord.WRONG_DATA
        return handler(self, payload)

    # -- handlers ----------------------------------------------------------

    def handle_enroll(self, payload: EnrollPayload) -> int:
        if self.config.require_issuer_auth_for_enroll and not self.issuer_authenticated:
            return StatusWord.SECURITY_STATUS_NOT_SATISFIED
        if self.active_rotation_id is not None and payload.rotation_id != self.active_rotation_id:
            return StatusWord.WRONG_DATA
        tag_len = self.config.integrity_tag_bytes
        record = TemplateRecord(
            template=bytearray(payload.template.data),
            length_bits=payload.hash_len_bits,
            rotation_id=payload.rotation_id,
            salt_id=payload.salt_id,
            template_id=payload.template_id,
            integrity_tag=bytearray(tag_len) if tag_len else None,
        )
        key = payload.template_id
        previous = self.records.get(key)
        freed = previous.footprint if previous is not None else 0
        if self.used_bytes - freed + record.footprint > self.config.eeprom_quota_bytes:
            return StatusWord.NOT_ENOUGH_MEMORY
        if previous is not None:
            previous.erase()
        self.records[key] = record
        self.active_rotation_id = payload.rotation_id
        return StatusWord.OK

    def handle_verify(self, payload: VerifyPayload) -> int:
        record = self.records.get(payload.template_id)
        if record is None or record.length_bits != payload.hash_len_bits:
            return StatusWord.RECORD_NOT_FOUND
        tau = self.config.thresholds.get(payload.hash_len_bits)
        if tau is None:
            return StatusWord.RECORD_NOT_FOUND
        if payload.rotation_id != record.rotation_id or payload.salt_id != record.salt_id:
            return StatusWord.WRONG_DATA
        limit = self.config.rate_limit
        if limit is not None and self.verify_attempt_counter >= limit:
            return StatusWord.CONDITIONS_NOT_SATISFIED

        n = payload.hash_len_bits // 8
        self.probe_buffer[:n] = payload.template.data
        counter = self.op_counter
        d = hamming_ct(memoryview(self.probe_buffer)[:n], record.template, counter)
        accept = ct_less_equal(d, tau, counter)
        sw = ct_select_sw(accept, counter)
        # consecutive failures; a successful match resets the window
        self.verify_attempt_counter = (self.verify_attempt_counter + 1) * (1 - accept)
        return sw

    def handle_rekey(self, payload: RekeyPayload) -> int:
        if self.config.require_issuer_auth_for_enroll and not self.issuer_authenticated:
            return StatusWord.SECURITY_STATUS_NOT_SATISFIED
        for record in self.records.values():
            record.erase()
        self.records.clear()
        self.active_rotation_id = payload.new_rotation_id
        self.verify_attempt_counter = 0
        return StatusWord.OK

    def _clear_probe(self) -> None:
        for i in range(len(self.probe_buffer)):
            self.probe_buffer[i] = 0

    # -- persistence -------------------------------------------------------

    def to_bytes(self) -> bytes:
        return dump_card(self)

    @classmethod
    def from_bytes(cls, raw: bytes) -> Card:
        return load_card(raw)


_HANDLERS = {
    INS_ENROLL_TEMPLATE: (EnrollPayload.decode, Card.handle_enroll),
    INS_VERIFY_BINARY: (VerifyPayload.decode, Card.handle_verify),
    INS_REKEY_ROTATION: (RekeyPayload.decode, Card.handle_rekey),
}


def process(state: Card, raw: bytes) -> tuple[Card, ApduResponse]:
    """Functional form: returns a new card state and leaves ``state`` untouched."""
    new_state = copy.deepcopy(state)
    response = new_state.process(raw)
    return new_state, response


# ---------------------------------------------------------------------------
# Binary card image
#
#   "CARD" u8 version
#   config: u32 quota, u8 flags(bit0 = issuer auth required), u16 rate limit
#           (0 = off), u8 tag bytes, u8 n, n x (u8 L, u8 tau)
#   state:  u8 issuer_authenticated, u16 attempt counter, u8 has_rotation,
#           u16 rotation
#   records: u16 n, per record:
#           u8 has_tid, u16 tid, u8 L, u16 rotation, u8 policy, u8 has_salt,
#           u16 salt, u8 tag_len, tag, template(L/8)
# ---------------------------------------------------------------------------

CARD_MAGIC = b"CARD"
CARD_FORMAT_VERSION = 1


def dump_card(card: Card) -> bytes:
    cfg = card.config
    out = bytearray(CARD_MAGIC)
    out += struct.pack(
        "<BIBHB",
        CARD_FORMAT_VERSION,
        cfg.eeprom_quota_bytes,
        1 if cfg.require_issuer_auth_for_enroll else 0,
        cfg.rate_limit or 0,
        cfg.integrity_tag_bytes,
    )
    out += struct.pack("<B", len(cfg.thresholds))
    for length_bits in sorted(cfg.thresholds):
        out += struct.pack("<BB", length_bits, cfg.thresholds[length_bits])
    out += struct.pack(
        "<BHBH",
        1 if card.issuer_authenticated else 0,
        card.verify_attempt_counter,
        card.active_rotation_id is not None,
        card.active_rotation_id or 0,
    )
    out += struct.pack("<H", len(card.records))
    for key in sorted(card.records, key=lambda k: -1 if k is None else k):
        r = card.records[key]
        tag = bytes(r.integrity_tag or b"")
        out += struct.pack(
            "<BHBHBBHB",
            r.template_id is not None,
            r.template_id or 0,
            r.length_bits,
            r.rotation_id,
            r.policy_flags,
            r.salt_id is not None,
            r.salt_id or 0,
            len(tag),
        )
        out += tag + bytes(r.template)
    return bytes(out)


def load_card(raw: bytes) -> Card:
    raw = bytes(raw)
    if raw[:4] != CARD_MAGIC:
        raise ValueError("not a card image (bad magic)")
    pos = 4

    def take(fmt):
        nonlocal pos
        values = struct.unpack_from(fmt, raw, pos)
        pos += struct.calcsize(fmt)
        return values

    version, quota, flags, rate_limit, tag_bytes = take("<BIBHB")
    if version != CARD_FORMAT_VERSION:
        raise ValueError(f"unsupported card image version {version}")
    (n,) = take("<B")
    thresholds = dict(take("<BB") for _ in range(n))
    config = CardConfig(
        thresholds=thresholds,
        eeprom_quota_bytes=quota,
        require_issuer_auth_for_enroll=bool(flags & 1),
        rate_limit=rate_limit or None,
        integrity_tag_bytes=tag_bytes,
    )
    auth, counter, has_rot, rot = take("<BHBH")
    card = Card(
        config,
        active_rotation_id=rot if has_rot else None,
        issuer_authenticated=bool(auth),
        verify_attempt_counter=counter,
    )
    (n_records,) = take("<H")
    for _ in range(n_records):
        has_tid, tid, length_bits, rotation_id, policy, has_salt, salt, tag_len = take(
            "<BHBHBBHB"
        )
        tag = raw[pos : pos + tag_len]
        pos += tag_len
        n_bytes = length_bits // 8
        template = raw[pos : pos + n_bytes]
        pos += n_bytes
        BinaryTemplate(template, length_bits)  # validates length
        key = tid if has_tid else None
        card.records[key] = TemplateRecord(
            template=bytearray(template),
            length_bits=length_bits,
            rotation_id=rotation_id,
            policy_flags=policy,
            salt_id=salt if has_salt else None,
            template_id=key,
            integrity_tag=bytearray(tag) if tag_len else None,
        )
    if pos != len(raw):
        raise ValueError("trailing bytes in card image")
    return card
