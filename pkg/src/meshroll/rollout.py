"""Firmware roll-out application: packetisation, framing and per-consumer
received/lost accounting with a stopwatch goodput."""

from __future__ import annotations

import binascii
from dataclasses import dataclass, field

from .engine import S, stream

HEADER_BYTES = 14  # seq(4) + total(4) + src(2) + dst(2) + checksum(2)
DEFAULT_IMAGE_SIZE = 102_400


def crc16(data: bytes) -> int:
    """CRC-16/CCITT-FALSE (poly 0x1021, init 0xFFFF)."""
    return binascii.crc_hqx(data, 0xFFFF)


@dataclass(frozen=True)
class FirmwareImage:
    size: int = DEFAULT_IMAGE_SIZE
    content_seed: int = 0

    def __post_init__(self) -> None:
        if self.size <= 0:
            raise ValueError("firmware size must be positive")

    def content(self) -> bytes:
        return stream(self.content_seed, "firmware").bytes(self.size)


@dataclass(frozen=True)
class DataPacket:
    seq: int
    total: int
    payload: bytes
    checksum: int

    def body(self) -> bytes:
        return self.seq.to_bytes(4, "big") + self.total.to_bytes(4, "big") + self.payload

    def verify(self) -> bool:
        return crc16(self.body()) == self.checksum

    def __len__(self) -> int:
        return len(self.payload)


def make_packet(seq: int, total: int, payload: bytes) -> DataPacket:
    body = seq.to_bytes(4, "big") + total.to_bytes(4, "big") + payload
    return DataPacket(seq, total, payload, crc16(body))


def packet_count(size: int, max_payload: int) -> int:
    return -(-size // max_payload)


def packetize(image: FirmwareImage, max_payload: int) -> list[DataPacket]:
    if max_payload <= 0:
        raise ValueError("max_payload must be positive")
    data = image.content()
    total = packet_count(image.size, max_payload)
    return [
        make_packet(seq, total, data[seq * max_payload : (seq + 1) * max_payload])
        for seq in range(total)
    ]


def reassemble(packets) -> bytes:
    return b"".join(p.payload for p in sorted(packets, key=lambda p: p.seq))


@dataclass
class RolloutState:
    received_ids: dict[int, None] = field(default_factory=dict)
    lost_ids: dict[int, None] = field(default_factory=dict)
    t_first: int | None = None
    t_last: int | None = None
    last_seq_seen: int = -1
    received_bytes: int = 0
    closed: bool = False

    def on_receive(self, packet: DataPacket, now: int, checksum_ok: bool | None = None) -> None:
        """Account for one delivery. Anomalies are recorded, never raised."""
        if self.closed:
            return
        if checksum_ok is None:
            checksum_ok = packet.verify()
        seq = packet.seq
        if seq in self.received_ids:
            return
        if not checksum_ok:
            self.lost_ids.setdefault(seq, None)
            return
        if seq <= self.last_seq_seen:
            # arrived out of order; no retransmissions, so it stays lost
            self.lost_ids.setdefault(seq, None)
            return
        for gap in range(self.last_seq_seen + 1, seq):
            self.lost_ids.setdefault(gap, None)
        self.received_ids[seq] = None
        self.received_bytes += len(packet.payload)
        self.last_seq_seen = seq
        if self.t_first is None:
            self.t_first = now
        self.t_last = now
        if seq == packet.total - 1:
            self.closed = True

    def charge_tail(self, total_packets: int) -> None:
        for seq in range(self.last_seq_seen + 1, total_packets):
            if seq not in self.received_ids:
                self.lost_ids.setdefault(seq, None)


def on_receive(state: RolloutState, packet: DataPacket, now: int, checksum_ok: bool | None = None) -> RolloutState:
    state.on_receive(packet, now, checksum_ok)
    return state


@dataclass
class ConsumerReport:
    node: int
    pdr: float
    goodput: float | None
    complete: bool
    received: int = 0
    lost: int = 0
    joined_at: float | None = None  # seconds
    dropped: bool = False
    side: str = ""

    CSV_FIELDS = ("node", "side", "joined_at", "pdr", "goodput", "complete", "dropped", "received", "lost")

    def row(self) -> dict:
        return {k: getattr(self, k) for k in self.CSV_FIELDS}


def finalize(state: RolloutState, total_packets: int, node: int = -1) -> ConsumerReport:
    state.charge_tail(total_packets)
    n = len(state.received_ids)
    goodput = None
    if n >= 2 and state.t_last > state.t_first:
        goodput = state.received_bytes * 8 * S / (state.t_last - state.t_first)
    pdr = n / total_packets if total_packets else 0.0
    return ConsumerReport(
        node=node,
        pdr=pdr,
        goodput=goodput,
        complete=n == total_packets,
        received=n,
        lost=len(state.lost_ids),
    )
