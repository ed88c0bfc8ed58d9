"""Transport-bounded verification latency: T_total = T_io(bytes, bitrate) + T_card.

Bytes on the wire for one VERIFY transaction::

    payload header + template (L/8) + helper + status word (2) + per-link overhead

The 4-byte short-form payload header plus a 28-byte contact overhead at
10 bits/byte lands the 9.6 kbps totals at 43.9 ms (64 b) and 52.2 ms (128 b).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .apdu import SHORT_HEADER_LEN, SUPPORTED_LENGTHS

T_CARD_MS = 0.128
SW_BYTES = 2

CONTACT = "contact"
CONTACTLESS = "contactless"
CONTACT_BITRATES = (9600, 38400, 115200)
CONTACTLESS_BITRATES = (106000, 212000, 424000, 848000)


@dataclass(frozen=True)
class LinkProfile:
    name: str
    standard: str
    bitrate: float
    bits_per_byte: float = 8.0
    per_transaction_overhead_bytes: int = 0
    payload_header_bytes: int = SHORT_HEADER_LEN

    def __post_init__(self):
        if self.standard not in (CONTACT, CONTACTLESS):
            raise ValueError(f"{self.name}: standard must be contact or contactless")
        if self.bitrate <= 0:
            raise ValueError(f"{self.name}: bitrate must be positive")
        if self.bits_per_byte < 8:
            raise ValueError(f"{self.name}: bits_per_byte must be >= 8")
        if self.per_transaction_overhead_bytes < 0 or self.payload_header_bytes < 0:
            raise ValueError(f"{self.name}: byte counts must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> LinkProfile:
        try:
            return cls(**d)
        except TypeError as exc:
            raise ValueError(f"bad link profile {d!r}: {exc}") from None


CONTACT_BITS_PER_BYTE = 10.0
CONTACT_OVERHEAD_BYTES = 28
CONTACTLESS_OVERHEAD_BYTES = 28


def default_profiles() -> list[LinkProfile]:
    profiles = [
        LinkProfile(f"7816-{r / 1000:g}k", CONTACT, r, CONTACT_BITS_PER_BYTE, CONTACT_OVERHEAD_BYTES)
        for r in CONTACT_BITRATES
    ]
    profiles += [
        LinkProfile(f"14443-{r // 1000}k", CONTACTLESS, r, 8.0, CONTACTLESS_OVERHEAD_BYTES)
        for r in CONTACTLESS_BITRATES
    ]
    return profiles


def wire_bytes(length_bits: int, helper_bytes: int, profile: LinkProfile) -> int:
    if length_bits not in SUPPORTED_LENGTHS:
        raise ValueError(f"unsupported template length {length_bits}")
    if helper_bytes < 0:
        raise ValueError("helper_bytes must be non-negative")
    return (
        profile.payload_header_bytes
        + length_bits // 8
        + helper_bytes
        + SW_BYTES
        + profile.per_transaction_overhead_bytes
    )


def t_io(length_bits: int, helper_bytes: int, profile: LinkProfile) -> float:
    """Link time in milliseconds."""
    return wire_bytes(length_bits, helper_bytes, profile) * profile.bits_per_byte / profile.bitrate * 1000.0


def t_total(length_bits: int, helper_bytes: int, profile: LinkProfile, t_card_ms: float = T_CARD_MS) -> float:
    return t_io(length_bits, helper_bytes, profile) + t_card_ms


@dataclass(frozen=True)
class LatencyRow:
    profile: str
    standard: str
    bitrate: float
    length_bits: int
    helper_bytes: int
    n_bytes: int
    t_io_ms: float
    t_card_ms: float
    t_total_ms: float


# 64 b, 128 b, and 64 b with a 6-byte parity helper
DEFAULT_CONFIGS = ((64, 0), (128, 0), (64, 6))


@dataclass
class LatencyReport:
    rows: list[LatencyRow]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([f for f in LatencyRow.__dataclass_fields__])
        for r in self.rows:
            writer.writerow([
                r.profile, r.standard, f"{r.bitrate:g}", r.length_bits, r.helper_bytes,
                r.n_bytes, f"{r.t_io_ms:.4f}", f"{r.t_card_ms:.4f}", f"{r.t_total_ms:.4f}",
            ])
        return buf.getvalue()

    def to_json(self) -> str:
        rows = []
        for r in self.rows:
            d = asdict(r)
            for k in ("t_io_ms", "t_card_ms", "t_total_ms"):
                d[k] = round(d[k], 4)
            rows.append(d)
        return json.dumps({"rows": rows}, indent=2, sort_keys=True) + "\n"


def sweep(
    profiles: Sequence[LinkProfile],
    configs: Iterable[tuple[int, int]] = DEFAULT_CONFIGS,
    t_card_ms: float = T_CARD_MS,
) -> LatencyReport:
    configs = list(configs)
    if not profiles or not configs:
        raise ValueError("sweep needs at least one profile and one configuration")
    rows = []
    for p in profiles:
        for length_bits, helper in configs:
            io_ms = t_io(length_bits, helper, p)
            rows.append(LatencyRow(
                p.name, p.standard, p.bitrate, length_bits, helper,
                wire_bytes(length_bits, helper, p), io_ms, t_card_ms, io_ms + t_card_ms,
            ))
    return LatencyReport(rows)


def load_profiles(path) -> list[LinkProfile]:
    """Read a JSON list of profile objects (or ``{"profiles": [...]}``)."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: {exc}") from None
    if isinstance(doc, dict):
        doc = doc.get("profiles")
    if not isinstance(doc, list) or not doc:
        raise ValueError(f"{path}: expected a non-empty list of link profiles")
    return [LinkProfile.from_dict(d) for d in doc]


def dump_profiles(profiles: Sequence[LinkProfile]) -> str:
    return json.dumps([asdict(p) for p in profiles], indent=2) + "\n"
