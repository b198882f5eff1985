import io
import struct
from collections import Counter

import dpkt
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ip, make_packets, random_packets
from dcmon.errors import MalformedHeader, TruncatedRecord, UnorderedInput
from dcmon.pcap import write_pcap
from dcmon.trace_ingest import (
    CaptureStream,
    EnclosureProfile,
    Transport,
    deduplicate,
    empty_packets,
    iter_records,
    merge_streams,
    parse_pcap,
    read_packets_csv,
    records_to_array,
    write_packets_csv,
)

T0 = 1_700_000_000


def _eth_ipv4(src, dst, proto=dpkt.ip.IP_PROTO_TCP, total=100, ip_id=7, vlan=None):
    l4 = dpkt.tcp.TCP(sport=1234, dport=80) if proto == dpkt.ip.IP_PROTO_TCP else dpkt.udp.UDP(sport=1, dport=2)
    header_len = 14 + 20 + len(bytes(l4)) + (4 if vlan is not None else 0)
    l4.data = b"x" * (total - header_len)
    pkt = dpkt.ip.IP(src=bytes(map(int, src.split("."))), dst=bytes(map(int, dst.split("."))), p=proto, id=ip_id, data=l4)
    pkt.len = len(bytes(pkt))
    eth = dpkt.ethernet.Ethernet(src=b"\x02" * 6, dst=b"\x04" * 6, type=dpkt.ethernet.ETH_TYPE_IP, data=pkt)
    if vlan is not None:
        # 802.1Q tag inserted by hand so the layout does not depend on dpkt's VLAN support
        raw = bytes(eth)
        return raw[:12] + struct.pack(">HH", 0x8100, vlan) + raw[12:]
    return bytes(eth)


def _dpkt_file(path, frames, nano=False, linktype=dpkt.pcap.DLT_EN10MB):
    with open(path, "wb") as f:
        w = dpkt.pcap.Writer(f, nano=nano, linktype=linktype)
        for ts, frame in frames:
            w.writepkt(frame, ts=ts)


def test_header_only_capture_is_empty(tmp_path):
    path = tmp_path / "empty.pcap"
    _dpkt_file(path, [])
    stream = parse_pcap(path, probe_id=3)
    assert len(stream) == 0
    assert not stream.truncated


def test_ten_tcp_packets_from_reference_writer(tmp_path):
    path = tmp_path / "ten.pcap"
    _dpkt_file(path, [(T0 + k, _eth_ipv4("10.0.0.1", "10.0.0.2", ip_id=k)) for k in range(10)])
    stream = parse_pcap(path, probe_id=1)
    r = stream.records
    assert len(r) == 10
    assert (r["transport"] == Transport.TCP).all()
    assert (r["wire_len"] == 100).all()
    assert r["ts_micros"].tolist() == [(T0 + k) * 1_000_000 for k in range(10)]
    assert r["ip_id"].tolist() == list(range(10))
    assert r["seq_in_probe"].tolist() == list(range(10))
    assert (r["source_probe"] == 1).all()
    assert (r["src_addr"] == ip("10.0.0.1")).all() and (r["dst_addr"] == ip("10.0.0.2")).all()


def test_nanosecond_capture_and_clock_offset(tmp_path):
    path = tmp_path / "nano.pcap"
    _dpkt_file(path, [(T0 + 0.25, _eth_ipv4("10.0.0.1", "10.0.0.2"))], nano=True)
    stream = parse_pcap(path, 0, clock_offset_micros=-250_000)
    assert stream.records["ts_micros"].tolist() == [T0 * 1_000_000]


def test_big_endian_capture(tmp_path):
    frame = _eth_ipv4("10.0.0.5", "192.0.2.1", proto=dpkt.ip.IP_PROTO_UDP, total=80)
    buf = struct.pack(">IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 1)
    buf += struct.pack(">IIII", T0, 17, len(frame), len(frame)) + frame
    path = tmp_path / "be.pcap"
    path.write_bytes(buf)
    r = parse_pcap(path, 0).records
    assert r["ts_micros"].tolist() == [T0 * 1_000_000 + 17]
    assert r["transport"].tolist() == [Transport.UDP]
    assert r["wire_len"].tolist() == [80]


def test_vlan_tagged_frame(tmp_path):
    path = tmp_path / "vlan.pcap"
    _dpkt_file(path, [(T0, _eth_ipv4("10.0.0.1", "10.0.0.9", total=120, vlan=42))])
    r = parse_pcap(path, 0).records
    assert r["dst_addr"].tolist() == [ip("10.0.0.9")]
    assert r["wire_len"].tolist() == [120]


def test_non_ipv4_frames_are_skipped(tmp_path):
    arp = dpkt.ethernet.Ethernet(src=b"\x02" * 6, dst=b"\xff" * 6, type=dpkt.ethernet.ETH_TYPE_ARP, data=dpkt.arp.ARP())
    path = tmp_path / "mixed.pcap"
    _dpkt_file(path, [(T0, bytes(arp)), (T0 + 1, _eth_ipv4("10.0.0.1", "10.0.0.2"))])
    stream = parse_pcap(path, 0)
    assert len(stream) == 1
    assert stream.skipped == 1


def test_snaplen_truncated_packets_use_orig_len(tmp_path):
    frame = _eth_ipv4("10.0.0.1", "10.0.0.2", total=1400)
    buf = struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 64, 1)
    buf += struct.pack("<IIII", T0, 0, 64, len(frame)) + frame[:64]
    path = tmp_path / "snap.pcap"
    path.write_bytes(buf)
    assert parse_pcap(path, 0).records["wire_len"].tolist() == [1400]


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.pcap"
    path.write_bytes(b"\x00" * 24)
    with pytest.raises(MalformedHeader):
        parse_pcap(path, 0)


def test_oversized_record_claim_truncates(tmp_path):
    buf = struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 1)
    buf += struct.pack("<IIII", T0, 0, 10**9, 10**9) + b"\x00" * 1000
    path = tmp_path / "trunc.pcap"
    path.write_bytes(buf)
    stream = parse_pcap(path, 0)
    assert stream.truncated and len(stream) == 0
    with pytest.raises(TruncatedRecord) as info:
        parse_pcap(path, 0, strict=True)
    assert len(info.value.stream) == 0


def test_truncation_keeps_earlier_records(tmp_path):
    path = tmp_path / "partial.pcap"
    _dpkt_file(path, [(T0 + k, _eth_ipv4("10.0.0.1", "10.0.0.2")) for k in range(3)])
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    stream = parse_pcap(path, 0)
    assert stream.truncated and len(stream) == 2


def test_writer_output_is_readable_by_reference_reader(tmp_path, rng):
    pk = random_packets(rng, 50)
    path = tmp_path / "ours.pcap"
    write_pcap(path, pk["ts_micros"], pk["src_addr"], pk["dst_addr"], pk["transport"], pk["wire_len"], pk["ip_id"])
    with open(path, "rb") as f:
        seen = []
        for ts, frame in dpkt.pcap.Reader(f):
            eth = dpkt.ethernet.Ethernet(frame)
            seen.append((round(ts * 1e6), int.from_bytes(eth.data.src, "big"), eth.data.id, eth.data.p))
    expected = list(zip(pk["ts_micros"].tolist(), pk["src_addr"].tolist(), pk["ip_id"].tolist(), pk["transport"].tolist()))
    assert seen == expected


records_strategy = st.lists(
    st.tuples(
        st.integers(0, 2**40),
        st.integers(0, 2**32 - 1),
        st.integers(0, 2**32 - 1),
        st.sampled_from([Transport.TCP, Transport.UDP, Transport.ICMP, Transport.OTHER]),
        st.integers(54, 65535),
        st.integers(0, 65535),
    ),
    max_size=30,
)


@settings(max_examples=40, deadline=None)
@given(records_strategy)
def test_pcap_round_trip(tmp_path_factory, rows):
    rows.sort(key=lambda r: r[0])
    pk = make_packets(rows)
    path = tmp_path_factory.mktemp("rt") / "rt.pcap"
    write_pcap(path, pk["ts_micros"], pk["src_addr"], pk["dst_addr"], pk["transport"], pk["wire_len"], pk["ip_id"])
    back = parse_pcap(path, 0).records
    for name in ("ts_micros", "src_addr", "dst_addr", "transport", "wire_len", "ip_id"):
        assert back[name].tolist() == pk[name].tolist(), name


def _stream(pk, probe):
    pk = pk.copy()
    pk["source_probe"] = probe
    pk["seq_in_probe"] = np.arange(len(pk))
    return CaptureStream(probe, pk)


def test_merge_single_stream_is_identity(rng):
    s = _stream(random_packets(rng, 100), 0)
    assert np.array_equal(merge_streams([s]), s.records)


def test_merge_with_empty_stream(rng):
    s = _stream(random_packets(rng, 100), 1)
    assert np.array_equal(merge_streams([CaptureStream(0, empty_packets()), s]), s.records)


def test_merge_matches_sort_of_concatenation(rng):
    streams = [_stream(random_packets(rng, 1000, span_us=1000), p) for p in range(4)]
    merged = merge_streams(streams)
    oracle = sorted(
        (r for s in streams for r in s.records.tolist()),
        key=lambda r: (r[0], r[6], r[7]),
    )
    assert merged.tolist() == oracle


def test_merge_rejects_unordered_stream(rng):
    pk = random_packets(rng, 10)[::-1].copy()
    with pytest.raises(UnorderedInput):
        merge_streams([_stream(pk, 0)])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.integers(0, 50), max_size=20), min_size=1, max_size=5))
def test_merge_is_permutation_complete_and_totally_ordered(ts_lists):
    streams = []
    for p, ts in enumerate(ts_lists):
        pk = make_packets([(t, 1, 2, Transport.TCP, 60) for t in sorted(ts)])
        streams.append(_stream(pk, p))
    merged = merge_streams(streams)
    census = Counter(zip(merged["source_probe"].tolist(), merged["seq_in_probe"].tolist()))
    expected = Counter((p, k) for p, ts in enumerate(ts_lists) for k in range(len(ts)))
    assert census == expected
    keys = list(zip(merged["ts_micros"].tolist(), merged["source_probe"].tolist(), merged["seq_in_probe"].tolist()))
    assert all(a < b for a, b in zip(keys, keys[1:]))


def test_dedup_zero_window_single_probe_is_identity(rng):
    pk = random_packets(rng, 200)
    assert np.array_equal(deduplicate(pk, 0), pk)


def test_dedup_keeps_earlier_of_cross_probe_pair():
    pk = make_packets([(1000, 1, 2, Transport.TCP, 60, 9, 1, 0), (1500, 1, 2, Transport.TCP, 60, 9, 2, 0)])
    out = deduplicate(pk, 1000)
    assert len(out) == 1 and out["source_probe"][0] == 1


def test_dedup_respects_window():
    pk = make_packets([(1000, 1, 2, Transport.TCP, 60, 9, 1, 0), (2500, 1, 2, Transport.TCP, 60, 9, 2, 0)])
    assert len(deduplicate(pk, 1000)) == 2


def test_dedup_never_drops_same_probe_repeats():
    pk = make_packets([(1000, 1, 2, Transport.TCP, 60, 9, 1, 0), (1001, 1, 2, Transport.TCP, 60, 9, 1, 1)])
    assert len(deduplicate(pk, 1000)) == 2


def test_dedup_recovers_pre_duplication_stream(rng):
    # unique ip ids make every original record distinguishable
    base = random_packets(rng, 2000, probe=0, span_us=10**9)
    base["ip_id"] = rng.permutation(65536)[:2000]
    copy = base.copy()
    copy["source_probe"] = 1
    copy["ts_micros"] += rng.integers(1, 500, size=len(copy))
    merged = merge_streams([CaptureStream(0, base), CaptureStream(1, copy[np.argsort(copy["ts_micros"], kind="stable")])])
    out = deduplicate(merged, 1000)
    assert len(out) == len(base)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 3000), st.integers(0, 2), st.integers(0, 2)), max_size=40),
    st.integers(0, 1500),
)
def test_dedup_is_idempotent(rows, window):
    rows.sort()
    pk = make_packets([(t, 1, 2, Transport.UDP, 60, key, probe, i) for i, (t, probe, key) in enumerate(rows)])
    once = deduplicate(pk, window)
    assert np.array_equal(deduplicate(once, window), once)


def test_packet_csv_round_trip(rng):
    pk = random_packets(rng, 100)
    buf = io.StringIO()
    write_packets_csv(pk, buf)
    buf.seek(0)
    assert np.array_equal(read_packets_csv(buf), pk)


def test_record_view_round_trip(rng):
    pk = random_packets(rng, 20)
    assert np.array_equal(records_to_array(iter_records(pk)), pk)


def test_profile_json_round_trip():
    p = EnclosureProfile(("10.0.0.0/24",), {"10.0.0.1"}, {("10.0.0.2", "10.0.0.1")})
    assert EnclosureProfile.from_json(p.to_json()) == p
    assert p.is_internal(np.array([ip("10.0.0.77"), ip("10.0.1.1")], dtype=np.uint32)).tolist() == [True, False]


def test_profile_invariants():
    with pytest.raises(ValueError):
        EnclosureProfile(())
    with pytest.raises(ValueError):
        EnclosureProfile(("10.0.0.0/8",), known_relevant_couples={("10.0.0.1", "10.0.0.1")})
