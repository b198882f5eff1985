"""Per-second traffic indicators at system, node and couple scope."""

import csv
import ipaddress
import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np

from dcmon.correlation import AlignedSeries
from dcmon.errors import DcmonError, NoOverlap
from dcmon.power_ingest import PowerSample, derive
from dcmon.trace_ingest import EnclosureProfile, Transport

log = logging.getLogger(__name__)

MICROS = 1_000_000

INDICATOR_CSV_HEADER = [
    "second_index",
    "scope",
    "msg_rate",
    "bandwidth_bps",
    "tcp_msgs",
    "avg_msg_size_bytes",
    "inner_msgs",
    "outer_msgs",
]

_KIND_ORDER = {"system": 0, "node": 1, "couple": 2}


@dataclass(frozen=True)
class Scope:
    kind: str
    addrs: tuple = ()

    @classmethod
    def system(cls):
        return cls("system")

    @classmethod
    def node(cls, addr):
        return cls("node", (ipaddress.IPv4Address(addr),))

    @classmethod
    def couple(cls, a, b):
        a, b = ipaddress.IPv4Address(a), ipaddress.IPv4Address(b)
        if a == b:
            raise ValueError(f"couple scope needs two distinct addresses, got {a} twice")
        return cls("couple", (a, b) if a < b else (b, a))

    @classmethod
    def parse(cls, label: str) -> "Scope":
        if label == "system":
            return cls.system()
        kind, _, rest = label.partition(":")
        if kind == "node":
            return cls.node(rest)
        if kind == "couple":
            a, sep, b = rest.partition("|")
            if not sep:
                raise ValueError(f"couple scope needs 'a|b', got {label!r}")
            return cls.couple(a, b)
        raise ValueError(f"unknown scope {label!r}")

    @property
    def label(self) -> str:
        if self.kind == "system":
            return "system"
        if self.kind == "node":
            return f"node:{self.addrs[0]}"
        return f"couple:{self.addrs[0]}|{self.addrs[1]}"

    def sort_key(self):
        return (_KIND_ORDER[self.kind], tuple(int(a) for a in self.addrs))

    def mask(self, packets: np.ndarray) -> np.ndarray:
        if self.kind == "system":
            return np.ones(len(packets), dtype=bool)
        src, dst = packets["src_addr"], packets["dst_addr"]
        if self.kind == "node":
            a = np.uint32(int(self.addrs[0]))
            return (src == a) | (dst == a)
        a, b = (np.uint32(int(x)) for x in self.addrs)
        return ((src == a) & (dst == b)) | ((src == b) & (dst == a))


@dataclass(frozen=True)
class IndicatorTuple:
    second_index: int
    scope: Scope
    msg_rate: int
    bandwidth_bps: int
    tcp_msgs: int
    avg_msg_size_bytes: float
    inner_msgs: int
    outer_msgs: int

    @property
    def direction_split(self):
        return (self.inner_msgs, self.outer_msgs)


@dataclass
class IndicatorTable:
    """Indicator tuples plus the wall-clock second that ``second_index`` 0 maps to."""

    origin_s: int
    n_seconds: int
    tuples: List[IndicatorTuple]

    @property
    def empty(self) -> bool:
        return self.n_seconds == 0

    def for_scope(self, scope: Scope) -> List[IndicatorTuple]:
        return [t for t in self.tuples if t.scope == scope]

    def system_rates(self) -> np.ndarray:
        rates = np.zeros(self.n_seconds, dtype=np.int64)
        for t in self.tuples:
            if t.scope.kind == "system":
                rates[t.second_index] = t.msg_rate
        return rates


def compute_tuples(
    packets: np.ndarray,
    profile: EnclosureProfile,
    scopes: Optional[Iterable[Scope]] = None,
) -> IndicatorTable:
    """One tuple per (second, scope) over the whole span of the stream,
    silent seconds included. Seconds are wall-clock buckets [s, s+1)."""
    scopes = sorted(set(scopes) if scopes else {Scope.system()}, key=Scope.sort_key)
    if len(packets) == 0:
        log.warning("empty packet stream: no indicator tuples")
        return IndicatorTable(origin_s=0, n_seconds=0, tuples=[])

    secs = packets["ts_micros"] // MICROS
    origin = int(secs.min())
    sec_idx = secs - origin
    n_seconds = int(sec_idx.max()) + 1
    wire = packets["wire_len"].astype(np.int64)
    is_tcp = packets["transport"] == Transport.TCP
    inner = profile.is_internal(packets["src_addr"]) & profile.is_internal(packets["dst_addr"])

    per_scope = []
    for scope in scopes:
        m = scope.mask(packets)
        idx = sec_idx[m]
        count = np.bincount(idx, minlength=n_seconds)
        # int64 accumulation keeps byte totals exact
        nbytes = np.zeros(n_seconds, dtype=np.int64)
        np.add.at(nbytes, idx, wire[m])
        tcp = np.bincount(idx[is_tcp[m]], minlength=n_seconds)
        inn = np.bincount(idx[inner[m]], minlength=n_seconds)
        per_scope.append((scope, count.tolist(), nbytes.tolist(), tcp.tolist(), inn.tolist()))

    tuples = []
    for s in range(n_seconds):
        for scope, count, nbytes, tcp, inn in per_scope:
            c = count[s]
            b = nbytes[s]
            tuples.append(
                IndicatorTuple(
                    second_index=s,
                    scope=scope,
                    msg_rate=c,
                    bandwidth_bps=8 * b,
                    tcp_msgs=tcp[s],
                    avg_msg_size_bytes=b / c if c else 0.0,
                    inner_msgs=inn[s],
                    outer_msgs=c - inn[s],
                )
            )
    return IndicatorTable(origin_s=origin, n_seconds=n_seconds, tuples=tuples)


def _covered_seconds(t_micros, origin_s, cadence_s, mode):
    """Range of second indices [first, last] whose bucket end falls in the bin."""
    c_us = int(round(cadence_s * MICROS))
    if mode == "trailing":
        lo, hi = t_micros - c_us, t_micros
    elif mode == "centered":
        lo, hi = t_micros - c_us // 2, t_micros + (c_us - c_us // 2)
    else:
        raise ValueError(f"unknown binning mode {mode!r}")
    # bucket i ends at (origin + i + 1) s; keep ends in (lo, hi]
    first = lo // MICROS - origin_s
    last = hi // MICROS - origin_s - 1
    return first, last


def bin_series(
    table: IndicatorTable,
    power: Sequence[PowerSample],
    cadence_s: float = 10.0,
    mode: str = "trailing",
) -> AlignedSeries:
    """Pair each power reading with the mean system message rate of the
    seconds leading up to it. Readings whose bin is not fully covered by
    the traffic span are dropped and counted."""
    rates = table.system_rates()
    prefix = np.concatenate([[0], np.cumsum(rates)])
    ts, traffic, apparent = [], [], []
    dropped = 0
    for sample in power:
        first, last = _covered_seconds(sample.ts_micros, table.origin_s, cadence_s, mode)
        if last < first or first < 0 or last >= table.n_seconds:
            dropped += 1
            continue
        ts.append(sample.ts_micros)
        traffic.append((prefix[last + 1] - prefix[first]) / (last - first + 1))
        apparent.append(derive(sample).apparent_va)
    if not ts:
        raise NoOverlap("power samples and traffic do not overlap in time")
    if dropped:
        log.info("bin_series: dropped %d power samples outside the traffic span", dropped)
    return AlignedSeries(np.array(ts, dtype=np.int64), np.array(traffic), np.array(apparent), cadence_s, dropped)


def write_indicators_csv(table: IndicatorTable, f) -> None:
    f.write(f"# origin_s={table.origin_s}\n")
    w = csv.writer(f, lineterminator="\n")
    w.writerow(INDICATOR_CSV_HEADER)
    for t in table.tuples:
        w.writerow(
            [
                t.second_index,
                t.scope.label,
                t.msg_rate,
                t.bandwidth_bps,
                t.tcp_msgs,
                repr(t.avg_msg_size_bytes),
                t.inner_msgs,
                t.outer_msgs,
            ]
        )


def read_indicators_csv(f, origin_s: Optional[int] = None) -> IndicatorTable:
    lines = iter(f)
    first = next(lines, "")
    if first.startswith("#"):
        key, _, value = first[1:].strip().partition("=")
        if key.strip() == "origin_s":
            origin_s = int(value)
        header_line = next(lines, "")
    else:
        header_line = first
    if not header_line:
        return IndicatorTable(origin_s or 0, 0, [])
    header = next(csv.reader([header_line]))
    if header != INDICATOR_CSV_HEADER:
        raise DcmonError(f"unexpected indicator CSV header {header}")
    if origin_s is None:
        raise DcmonError("indicator file carries no '# origin_s=' line and no origin was given")
    tuples = []
    scopes = {}
    for lineno, row in enumerate(csv.reader(lines), start=3):
        try:
            sec, label, rate, bw, tcp, avg, inner, outer = row
            scope = scopes.get(label) or scopes.setdefault(label, Scope.parse(label))
            tuples.append(
                IndicatorTuple(int(sec), scope, int(rate), int(bw), int(tcp), float(avg), int(inner), int(outer))
            )
        except ValueError as exc:
            raise DcmonError(f"bad indicator row at line {lineno}: {exc}") from exc
    n_seconds = max((t.second_index for t in tuples), default=-1) + 1
    return IndicatorTable(origin_s, n_seconds, tuples)
