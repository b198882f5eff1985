"""Minimal libpcap file reader and writer.

Only the classic pcap container is handled (not pcapng). Record headers are
walked in a Python loop; the IPv4 fields of every record are then decoded in
one vectorised pass over the raw file buffer.
"""

import struct
from dataclasses import dataclass

import numpy as np

from dcmon.errors import MalformedHeader

GLOBAL_HEADER_LEN = 24
RECORD_HEADER_LEN = 16

MAGIC_MICROS = 0xA1B2C3D4
MAGIC_NANOS = 0xA1B23C4D

LINKTYPE_NULL = 0
LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
LINKTYPE_LINUX_SLL = 113
LINKTYPE_IPV4 = 228
LINKTYPE_LINUX_SLL2 = 276
_RAW_LINKTYPES = (LINKTYPE_RAW, LINKTYPE_IPV4, 12, 14)

_VLAN_ETHERTYPES = (0x8100, 0x88A8, 0x9100)
ETHERTYPE_IPV4 = 0x0800

# Bytes kept per frame by write_pcap: Ethernet + IPv4 + 20 bytes of L4 header.
WRITE_SNAPLEN = 54


@dataclass
class RawCapture:
    """Record headers and the undecoded file buffer of one capture."""

    linktype: int
    snaplen: int
    ts_micros: np.ndarray  # int64, as stored in the file
    incl_len: np.ndarray  # int64
    orig_len: np.ndarray  # int64
    data_offset: np.ndarray  # int64 offsets into buf
    buf: bytes
    truncated: bool


@dataclass
class DecodedIPv4:
    mask: np.ndarray  # True where the record carried a decodable IPv4 header
    src: np.ndarray  # uint32
    dst: np.ndarray  # uint32
    proto: np.ndarray  # uint8
    ip_id: np.ndarray  # uint16


def read_global_header(buf):
    if len(buf) < GLOBAL_HEADER_LEN:
        raise MalformedHeader(f"file shorter than the {GLOBAL_HEADER_LEN}-byte pcap header")
    (magic_le,) = struct.unpack_from("<I", buf, 0)
    (magic_be,) = struct.unpack_from(">I", buf, 0)
    if magic_le in (MAGIC_MICROS, MAGIC_NANOS):
        endian, magic = "<", magic_le
    elif magic_be in (MAGIC_MICROS, MAGIC_NANOS):
        endian, magic = ">", magic_be
    else:
        raise MalformedHeader(f"bad pcap magic 0x{magic_le:08x}")
    _, _, _, _, snaplen, linktype = struct.unpack_from(endian + "HHiIII", buf, 4)
    return endian, magic == MAGIC_NANOS, snaplen, linktype & 0x0FFFFFFF


def read_capture(path):
    """Walk every record header of a pcap file.

    Stops at the first record whose header or captured bytes run past the end
    of the file and reports it through ``RawCapture.truncated``.
    """
    with open(path, "rb") as f:
        buf = f.read()
    endian, nanos, snaplen, linktype = read_global_header(buf)

    unpack = struct.Struct(endian + "IIII").unpack_from
    size = len(buf)
    pos = GLOBAL_HEADER_LEN
    secs, fracs, incls, origs, offsets = [], [], [], [], []
    truncated = False
    while pos < size:
        if size - pos < RECORD_HEADER_LEN:
            truncated = True
            break
        sec, frac, incl, orig = unpack(buf, pos)
        pos += RECORD_HEADER_LEN
        if incl > size - pos:
            truncated = True
            break
        secs.append(sec)
        fracs.append(frac)
        incls.append(incl)
        origs.append(orig)
        offsets.append(pos)
        pos += incl

    secs = np.asarray(secs, dtype=np.int64)
    fracs = np.asarray(fracs, dtype=np.int64)
    if nanos:
        fracs //= 1000
    return RawCapture(
        linktype=linktype,
        snaplen=snaplen,
        ts_micros=secs * 1_000_000 + fracs,
        incl_len=np.asarray(incls, dtype=np.int64),
        orig_len=np.asarray(origs, dtype=np.int64),
        data_offset=np.asarray(offsets, dtype=np.int64),
        buf=buf,
        truncated=truncated,
    )


def _gather_u8(arr, pos, ok):
    return arr[np.where(ok, pos, 0)].astype(np.uint32)


def _gather_be16(arr, pos, ok):
    return (_gather_u8(arr, pos, ok) << 8) | _gather_u8(arr, pos + 1, ok)


def decode_ipv4(raw):
    """Locate and decode the IPv4 header of every record in ``raw``."""
    n = len(raw.ts_micros)
    arr = np.frombuffer(raw.buf, dtype=np.uint8)
    start = raw.data_offset
    end = start + raw.incl_len
    ok = np.ones(n, dtype=bool)

    if raw.linktype == LINKTYPE_ETHERNET:
        l3 = start + 14
        ok &= l3 <= end
        ethertype = _gather_be16(arr, l3 - 2, ok)
        for _ in range(2):
            tagged = ok & np.isin(ethertype, _VLAN_ETHERTYPES)
            l3 = np.where(tagged, l3 + 4, l3)
            ok &= l3 <= end
            ethertype = np.where(tagged, _gather_be16(arr, l3 - 2, ok), ethertype)
        ok &= ethertype == ETHERTYPE_IPV4
    elif raw.linktype == LINKTYPE_LINUX_SLL:
        l3 = start + 16
        ok &= l3 <= end
        ok &= _gather_be16(arr, start + 14, ok) == ETHERTYPE_IPV4
    elif raw.linktype == LINKTYPE_LINUX_SLL2:
        l3 = start + 20
        ok &= l3 <= end
        ok &= _gather_be16(arr, start, ok) == ETHERTYPE_IPV4
    elif raw.linktype == LINKTYPE_NULL:
        l3 = start + 4
        ok &= l3 <= end
        family = _gather_u8(arr, start, ok) | _gather_u8(arr, start + 3, ok)
        ok &= family == 2  # AF_INET in either byte order
    elif raw.linktype in _RAW_LINKTYPES:
        l3 = start
    else:
        ok[:] = False
        l3 = start

    ok &= l3 + 20 <= end
    vihl = _gather_u8(arr, l3, ok)
    ok &= (vihl >> 4) == 4
    ok &= (vihl & 0x0F) >= 5

    def be32(pos):
        return (_gather_be16(arr, pos, ok) << 16) | _gather_be16(arr, pos + 2, ok)

    return DecodedIPv4(
        mask=ok,
        src=be32(l3 + 12),
        dst=be32(l3 + 16),
        proto=_gather_u8(arr, l3 + 9, ok).astype(np.uint8),
        ip_id=_gather_be16(arr, l3 + 4, ok).astype(np.uint16),
    )


_FRAME_DTYPE = np.dtype(
    [
        ("ts_sec", "<u4"),
        ("ts_usec", "<u4"),
        ("incl_len", "<u4"),
        ("orig_len", "<u4"),
        ("eth_dst", "u1", (6,)),
        ("eth_src", "u1", (6,)),
        ("ethertype", ">u2"),
        ("vihl", "u1"),
        ("tos", "u1"),
        ("tot_len", ">u2"),
        ("ip_id", ">u2"),
        ("frag", ">u2"),
        ("ttl", "u1"),
        ("proto", "u1"),
        ("csum", ">u2"),
        ("src", ">u4"),
        ("dst", ">u4"),
        ("l4", "u1", (20,)),
    ]
)
assert _FRAME_DTYPE.itemsize == RECORD_HEADER_LEN + WRITE_SNAPLEN


def _mac_from_ip(ip):
    mac = np.zeros((len(ip), 6), dtype=np.uint8)
    mac[:, 0] = 0x02
    for k in range(4):
        mac[:, 2 + k] = (ip >> (24 - 8 * k)) & 0xFF
    return mac


def _ipv4_checksum(frames):
    words = (
        ((frames["vihl"].astype(np.uint32) << 8) | frames["tos"])
        + frames["tot_len"].astype(np.uint32)
        + frames["ip_id"]
        + frames["frag"]
        + ((frames["ttl"].astype(np.uint32) << 8) | frames["proto"])
        + (frames["src"] >> 16)
        + (frames["src"] & 0xFFFF)
        + (frames["dst"] >> 16)
        + (frames["dst"] & 0xFFFF)
    ).astype(np.uint32)
    words = (words & 0xFFFF) + (words >> 16)
    words = (words & 0xFFFF) + (words >> 16)
    return (~words & 0xFFFF).astype(np.uint16)


def write_pcap(path, ts_micros, src, dst, proto, wire_len, ip_id):
    """Write Ethernet/IPv4 frames snapped to their first 54 bytes.

    ``wire_len`` is stored as the original frame length, so readers recover
    the on-wire size even though the payload is not kept.
    """
    ts_micros = np.asarray(ts_micros, dtype=np.int64)
    wire_len = np.asarray(wire_len, dtype=np.int64)
    n = len(ts_micros)
    if n and wire_len.min() < WRITE_SNAPLEN:
        raise ValueError(f"frames must be at least {WRITE_SNAPLEN} bytes on the wire")
    src = np.asarray(src, dtype=np.uint32)
    dst = np.asarray(dst, dtype=np.uint32)
    proto = np.asarray(proto, dtype=np.uint8)
    ip_id = np.asarray(ip_id, dtype=np.uint16)

    frames = np.zeros(n, dtype=_FRAME_DTYPE)
    frames["ts_sec"] = ts_micros // 1_000_000
    frames["ts_usec"] = ts_micros % 1_000_000
    frames["incl_len"] = WRITE_SNAPLEN
    frames["orig_len"] = wire_len
    frames["eth_dst"] = _mac_from_ip(dst)
    frames["eth_src"] = _mac_from_ip(src)
    frames["ethertype"] = ETHERTYPE_IPV4
    frames["vihl"] = 0x45
    frames["tot_len"] = np.minimum(wire_len - 14, 0xFFFF)
    frames["ip_id"] = ip_id
    frames["frag"] = 0x4000  # DF
    frames["ttl"] = 64
    frames["proto"] = proto
    frames["src"] = src
    frames["dst"] = dst
    frames["csum"] = _ipv4_checksum(frames)

    l4 = frames["l4"]
    sport = 1024 + ip_id.astype(np.uint32) % 60000
    is_tcp = proto == 6
    is_udp = proto == 17
    dport = np.where(is_tcp, 443, 53).astype(np.uint32)
    ports = is_tcp | is_udp
    l4[ports, 0] = sport[ports] >> 8
    l4[ports, 1] = sport[ports] & 0xFF
    l4[ports, 2] = dport[ports] >> 8
    l4[ports, 3] = dport[ports] & 0xFF
    l4[is_tcp, 12] = 0x50
    l4[is_tcp, 13] = 0x10  # ACK
    udp_len = np.minimum(wire_len - 34, 0xFFFF).astype(np.uint32)
    l4[is_udp, 4] = udp_len[is_udp] >> 8
    l4[is_udp, 5] = udp_len[is_udp] & 0xFF
    l4[proto == 1, 0] = 8  # echo request
    frames["l4"] = l4

    header = struct.pack("<IHHiIII", MAGIC_MICROS, 2, 4, 0, 0, WRITE_SNAPLEN, LINKTYPE_ETHERNET)
    with open(path, "wb") as f:
        f.write(header)
        f.write(frames.tobytes())
