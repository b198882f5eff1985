"""Packet capture ingestion: per-probe parsing, merging and de-duplication.

Packet streams are held as numpy structured arrays with ``PACKET_DTYPE``;
``PacketRecord`` is the per-row view for code that wants plain objects.
"""

import csv
import ipaddress
import json
import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Iterator, Optional

import numpy as np

from dcmon import pcap
from dcmon.errors import DcmonError, TruncatedRecord, UnorderedInput

log = logging.getLogger(__name__)


class Transport(IntEnum):
    OTHER = 0
    ICMP = 1
    TCP = 6
    UDP = 17


PACKET_DTYPE = np.dtype(
    [
        ("ts_micros", "<i8"),
        ("src_addr", "<u4"),
        ("dst_addr", "<u4"),
        ("transport", "u1"),
        ("wire_len", "<u4"),
        ("ip_id", "<u2"),
        ("source_probe", "<u2"),
        ("seq_in_probe", "<i8"),
    ]
)

PACKET_CSV_HEADER = [
    "ts_micros",
    "src_addr",
    "dst_addr",
    "transport",
    "wire_len",
    "ip_id",
    "source_probe",
    "seq_in_probe",
]


@dataclass(frozen=True)
class PacketRecord:
    ts_micros: int
    src_addr: ipaddress.IPv4Address
    dst_addr: ipaddress.IPv4Address
    transport: Transport
    wire_len: int
    ip_id: int
    source_probe: int
    seq_in_probe: int


def empty_packets(n=0):
    return np.zeros(n, dtype=PACKET_DTYPE)


def iter_records(packets: np.ndarray) -> Iterator[PacketRecord]:
    for row in packets.tolist():
        ts, src, dst, proto, wire_len, ip_id, probe, seq = row
        yield PacketRecord(
            ts,
            ipaddress.IPv4Address(src),
            ipaddress.IPv4Address(dst),
            Transport(proto),
            wire_len,
            ip_id,
            probe,
            seq,
        )


def records_to_array(records: Iterable[PacketRecord]) -> np.ndarray:
    rows = [
        (
            r.ts_micros,
            int(r.src_addr),
            int(r.dst_addr),
            int(r.transport),
            r.wire_len,
            r.ip_id,
            r.source_probe,
            r.seq_in_probe,
        )
        for r in records
    ]
    return np.array(rows, dtype=PACKET_DTYPE)


def transport_from_proto(proto: np.ndarray) -> np.ndarray:
    proto = np.asarray(proto, dtype=np.uint8)
    known = np.isin(proto, (Transport.ICMP, Transport.TCP, Transport.UDP))
    return np.where(known, proto, Transport.OTHER).astype(np.uint8)


@dataclass
class CaptureStream:
    probe_id: int
    records: np.ndarray
    clock_offset_micros: int = 0
    truncated: bool = False
    skipped: int = 0
    reordered: int = 0

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter_records(self.records)


def parse_pcap(path, probe_id: int, clock_offset_micros: int = 0, strict: bool = False) -> CaptureStream:
    """Read the IPv4 packets of one probe's capture file.

    Non-IPv4 frames are counted in ``skipped``. Frames the capturing kernel
    wrote out of timestamp order are stably re-sorted; ``seq_in_probe`` keeps
    the original file position. A record running past end-of-file ends the
    parse with ``truncated`` set, or raises ``TruncatedRecord`` (carrying the
    partial stream) when ``strict`` is true.
    """
    raw = pcap.read_capture(path)
    decoded = pcap.decode_ipv4(raw)
    keep = decoded.mask

    records = empty_packets(int(keep.sum()))
    records["ts_micros"] = raw.ts_micros[keep] + clock_offset_micros
    records["src_addr"] = decoded.src[keep]
    records["dst_addr"] = decoded.dst[keep]
    records["transport"] = transport_from_proto(decoded.proto[keep])
    records["wire_len"] = raw.orig_len[keep]
    records["ip_id"] = decoded.ip_id[keep]
    records["source_probe"] = probe_id
    records["seq_in_probe"] = np.arange(len(records))

    if len(records) and records["ts_micros"].min() < 0:
        raise DcmonError(f"{path}: clock offset {clock_offset_micros} moves timestamps before the epoch")

    reordered = 0
    if len(records) > 1:
        backwards = np.diff(records["ts_micros"]) < 0
        reordered = int(backwards.sum())
        if reordered:
            log.warning("%s: %d out-of-order records re-sorted", path, reordered)
            records = records[np.argsort(records["ts_micros"], kind="stable")]

    skipped = len(raw.ts_micros) - len(records)
    if skipped:
        log.info("%s: skipped %d non-IPv4 frames", path, skipped)

    stream = CaptureStream(
        probe_id=probe_id,
        records=records,
        clock_offset_micros=clock_offset_micros,
        truncated=raw.truncated,
        skipped=skipped,
        reordered=reordered,
    )
    if raw.truncated:
        msg = f"{path}: truncated record after {len(raw.ts_micros)} records"
        if strict:
            raise TruncatedRecord(msg, stream)
        log.warning(msg)
    return stream


def merge_key_order(packets: np.ndarray) -> np.ndarray:
    return np.lexsort((packets["seq_in_probe"], packets["source_probe"], packets["ts_micros"]))


def merge_streams(streams: list) -> np.ndarray:
    """Merge per-probe streams into one stream ordered by
    (ts_micros, source_probe, seq_in_probe)."""
    seen = set()
    for s in streams:
        ts = s.records["ts_micros"]
        if len(ts) > 1 and np.any(np.diff(ts) < 0):
            raise UnorderedInput(f"stream of probe {s.probe_id} is not ordered by timestamp")
        probes = set(np.unique(s.records["source_probe"]).tolist())
        if probes & seen:
            raise DcmonError(f"probe id(s) {sorted(probes & seen)} appear in more than one stream")
        seen |= probes
    if not streams:
        return empty_packets()
    merged = np.concatenate([s.records for s in streams])
    if len(streams) == 1:
        return merged
    return merged[merge_key_order(merged)]


def deduplicate(packets: np.ndarray, window_micros: int) -> np.ndarray:
    """Drop copies of a packet seen by another probe within ``window_micros``.

    Two records are copies when they agree on addresses, transport, wire
    length and IP id. Each record is compared only against records already
    kept, so the first sighting survives and the operation is idempotent.
    Records from the same probe never suppress each other.
    """
    if window_micros < 0:
        raise ValueError("window_micros must be >= 0")
    n = len(packets)
    if n == 0:
        return packets
    keep = np.ones(n, dtype=bool)
    recent = {}
    cols = zip(
        packets["ts_micros"].tolist(),
        packets["src_addr"].tolist(),
        packets["dst_addr"].tolist(),
        packets["transport"].tolist(),
        packets["wire_len"].tolist(),
        packets["ip_id"].tolist(),
        packets["source_probe"].tolist(),
    )
    for i, (ts, src, dst, proto, wire_len, ip_id, probe) in enumerate(cols):
        key = (src, dst, proto, wire_len, ip_id)
        kept = recent.get(key)
        if kept is not None:
            # drop sightings that fell out of the window
            kept = [(t, p) for t, p in kept if ts - t <= window_micros]
            if any(p != probe for _, p in kept):
                keep[i] = False
                recent[key] = kept
                continue
            kept.append((ts, probe))
            recent[key] = kept
        else:
            recent[key] = [(ts, probe)]
    return packets[keep]


def write_packets_csv(packets: np.ndarray, f) -> None:
    writer = csv.writer(f, lineterminator="\n")
    writer.writerow(PACKET_CSV_HEADER)
    ip = ipaddress.IPv4Address
    for ts, src, dst, proto, wire_len, ip_id, probe, seq in packets.tolist():
        writer.writerow([ts, ip(src), ip(dst), Transport(proto).name, wire_len, ip_id, probe, seq])


def read_packets_csv(f) -> np.ndarray:
    reader = csv.reader(f)
    header = next(reader, None)
    if header is None:
        return empty_packets()
    if header != PACKET_CSV_HEADER:
        raise DcmonError(f"unexpected packet CSV header {header}")
    rows = []
    for lineno, row in enumerate(reader, start=2):
        try:
            ts, src, dst, proto, wire_len, ip_id, probe, seq = row
            rows.append(
                (
                    int(ts),
                    int(ipaddress.IPv4Address(src)),
                    int(ipaddress.IPv4Address(dst)),
                    int(Transport[proto]),
                    int(wire_len),
                    int(ip_id),
                    int(probe),
                    int(seq),
                )
            )
        except (ValueError, KeyError) as exc:
            raise DcmonError(f"bad packet row at line {lineno}: {exc}") from exc
    return np.array(rows, dtype=PACKET_DTYPE) if rows else empty_packets()


def _parse_network(text):
    return ipaddress.IPv4Network(text, strict=False)


def _pair(a, b):
    a, b = ipaddress.IPv4Address(a), ipaddress.IPv4Address(b)
    if a == b:
        raise ValueError(f"couple needs two distinct addresses, got {a} twice")
    return (a, b) if a < b else (b, a)


@dataclass(frozen=True)
class EnclosureProfile:
    """Which addresses belong to the monitored enclosure, plus operator-pinned
    nodes and couples that must always be tracked."""

    internal_addrs: tuple
    known_relevant_nodes: frozenset = field(default_factory=frozenset)
    known_relevant_couples: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        nets = tuple(_parse_network(n) if not isinstance(n, ipaddress.IPv4Network) else n for n in self.internal_addrs)
        if not nets:
            raise ValueError("internal_addrs must not be empty")
        object.__setattr__(self, "internal_addrs", nets)
        object.__setattr__(
            self, "known_relevant_nodes", frozenset(ipaddress.IPv4Address(a) for a in self.known_relevant_nodes)
        )
        object.__setattr__(
            self, "known_relevant_couples", frozenset(_pair(*c) for c in self.known_relevant_couples)
        )

    def is_internal(self, addrs: np.ndarray) -> np.ndarray:
        addrs = np.asarray(addrs, dtype=np.uint32)
        inside = np.zeros(addrs.shape, dtype=bool)
        for net in self.internal_addrs:
            mask = np.uint32(int(net.netmask))
            inside |= (addrs & mask) == np.uint32(int(net.network_address))
        return inside

    @classmethod
    def from_json(cls, data: dict) -> "EnclosureProfile":
        return cls(
            internal_addrs=tuple(data["internal"]),
            known_relevant_nodes=frozenset(data.get("nodes", ())),
            known_relevant_couples=frozenset(tuple(c) for c in data.get("couples", ())),
        )

    def to_json(self) -> dict:
        return {
            "internal": [str(n) for n in self.internal_addrs],
            "nodes": sorted(str(a) for a in self.known_relevant_nodes),
            "couples": sorted([str(a), str(b)] for a, b in self.known_relevant_couples),
        }


PRIVATE_PROFILE = EnclosureProfile(internal_addrs=("10.0.0.0/8", "172.16.0.0/12", "192.168.0.0/16"))


def load_profile(path: Optional[str]) -> EnclosureProfile:
    if path is None:
        return PRIVATE_PROFILE
    with open(path) as f:
        try:
            return EnclosureProfile.from_json(json.load(f))
        except (KeyError, ValueError, TypeError) as exc:
            raise DcmonError(f"{path}: invalid enclosure profile: {exc}") from exc
