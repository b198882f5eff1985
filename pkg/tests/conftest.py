import ipaddress

import numpy as np
import pytest

from dcmon.trace_ingest import PACKET_DTYPE, Transport

ACCEPTANCE_LINES = []


def ip(text):
    return int(ipaddress.IPv4Address(text))


def make_packets(rows):
    """rows: (ts, src, dst, transport, wire_len[, ip_id, probe, seq])"""
    out = np.zeros(len(rows), dtype=PACKET_DTYPE)
    for i, row in enumerate(rows):
        ts, src, dst, proto, wire_len, *rest = row
        ip_id, probe, seq = (list(rest) + [0, 0, i])[:3]
        out[i] = (ts, ip(src) if isinstance(src, str) else src, ip(dst) if isinstance(dst, str) else dst,
                  int(proto), wire_len, ip_id, probe, seq)
    return out


def random_packets(rng, n, n_addrs=8, probe=0, t0=1_700_000_000_000_000, span_us=10_000_000):
    pk = np.zeros(n, dtype=PACKET_DTYPE)
    pk["ts_micros"] = np.sort(t0 + rng.integers(0, span_us, size=n))
    base = ip("10.0.0.1")
    pk["src_addr"] = base + rng.integers(0, n_addrs, size=n)
    pk["dst_addr"] = base + rng.integers(0, n_addrs, size=n)
    pk["transport"] = rng.choice([Transport.TCP, Transport.UDP, Transport.ICMP], size=n)
    pk["wire_len"] = rng.integers(64, 1501, size=n)
    pk["ip_id"] = rng.integers(0, 65536, size=n)
    pk["source_probe"] = probe
    pk["seq_in_probe"] = np.arange(n)
    return pk


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def criterion():
    """Record a PASS/FAIL line for the acceptance summary."""

    def record(name, ok, detail=""):
        ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip())
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
