"""Synthetic paired traffic/power traces with planted correlation regimes,
plus fault injection.

Each segment draws one (traffic, apparent power) pair per power interval
from a bivariate Gaussian with the segment's target correlation
(y = rho*x + sqrt(1 - rho^2)*z). Traffic is then realised as individual
packets spread over the seconds of the interval; power is written as one
PDU reading at the end of every interval.
"""

import ipaddress
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np

from dcmon.errors import InvalidSpec, OutOfRange
from dcmon.pcap import write_pcap
from dcmon.power_ingest import MICROS_PER_HOUR, PowerSample, derive, write_power_log
from dcmon.trace_ingest import PACKET_DTYPE, CaptureStream, EnclosureProfile, Transport

MICROS = 1_000_000
DEFAULT_START_TS = 1_700_000_000 * MICROS


class Mode(Enum):
    CPU_INTENSIVE = "CpuIntensive"
    NETWORK_INTENSIVE = "NetworkIntensive"
    IDLE = "Idle"
    CPU_AND_NETWORK = "CpuAndNetwork"


# Sign of the traffic/power correlation each workload mode produces.
MODE_SIGN = {
    Mode.CPU_INTENSIVE: -1,  # power up, traffic down
    Mode.NETWORK_INTENSIVE: -1,  # traffic up, CPU (power) down
    Mode.IDLE: 1,  # both low
    Mode.CPU_AND_NETWORK: 1,  # both high
}


class FaultKind(Enum):
    CPU_LOOP = "CpuLoop"
    PSU_PF_DECAY = "PsuPowerFactorDecay"
    TRAFFIC_FLOOD = "TrafficFlood"


@dataclass(frozen=True)
class Segment:
    length_s: int
    mode: Mode
    target_rho: float
    traffic_mean_pps: float
    power_mean_w: float
    noise_sd: float  # relative to each mean

    @classmethod
    def from_json(cls, d):
        return cls(
            length_s=int(d["length_s"]),
            mode=Mode(d["mode"]),
            target_rho=float(d["target_rho"]),
            traffic_mean_pps=float(d["traffic_mean_pps"]),
            power_mean_w=float(d["power_mean_w"]),
            noise_sd=float(d["noise_sd"]),
        )


@dataclass(frozen=True)
class ScenarioSpec:
    duration_s: int
    segments: Tuple[Segment, ...]
    seed: int
    start_ts: int = DEFAULT_START_TS
    cadence_s: int = 10
    n_probes: int = 4
    power_factor: float = 0.98
    internal_pool: Tuple[str, ...] = tuple(f"10.0.0.{i}" for i in range(1, 9))
    external_pool: Tuple[str, ...] = tuple(f"198.51.100.{i}" for i in range(1, 5))
    inner_fraction: float = 0.7
    tcp_fraction: float = 0.6
    duplicate_fraction: float = 0.0
    duplicate_jitter_us: int = 200

    def validate(self):
        if not self.segments:
            raise InvalidSpec("scenario has no segments")
        if sum(s.length_s for s in self.segments) != self.duration_s:
            raise InvalidSpec("segment lengths must sum to duration_s")
        if self.cadence_s <= 0 or self.n_probes < 1:
            raise InvalidSpec("cadence_s and n_probes must be positive")
        if not 0 < self.power_factor <= 1:
            raise InvalidSpec("power_factor must be in (0, 1]")
        if len(self.internal_pool) < 2 or not self.external_pool:
            raise InvalidSpec("need at least two internal and one external address")
        for name in ("inner_fraction", "tcp_fraction", "duplicate_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise InvalidSpec(f"{name} must be in [0, 1]")
        for k, s in enumerate(self.segments):
            if s.length_s <= 0 or s.length_s % self.cadence_s:
                raise InvalidSpec(f"segment {k}: length must be a positive multiple of {self.cadence_s} s")
            if s.traffic_mean_pps <= 0 or s.power_mean_w <= 0:
                raise InvalidSpec(f"segment {k}: means must be positive")
            if not -1 <= s.target_rho <= 1:
                raise InvalidSpec(f"segment {k}: target_rho outside [-1, 1]")
            if s.noise_sd < 0:
                raise InvalidSpec(f"segment {k}: noise_sd must be >= 0")
            if s.target_rho * MODE_SIGN[s.mode] < 0:
                raise InvalidSpec(f"segment {k}: {s.mode.value} implies the opposite correlation sign")

    @classmethod
    def from_json(cls, d):
        segments = tuple(Segment.from_json(s) for s in d["segments"])
        kwargs = {k: d[k] for k in ("start_ts", "cadence_s", "n_probes", "power_factor", "inner_fraction",
                                     "tcp_fraction", "duplicate_fraction", "duplicate_jitter_us") if k in d}
        for k in ("internal_pool", "external_pool"):
            if k in d:
                kwargs[k] = tuple(d[k])
        return cls(
            duration_s=int(d.get("duration_s", sum(s.length_s for s in segments))),
            segments=segments,
            seed=int(d.get("seed", 0)),
            **kwargs,
        )


@dataclass(frozen=True)
class FaultSpec:
    kind: FaultKind
    start_ts: int
    duration_s: float
    magnitude: float
    traffic_drop: float = 0.5  # CpuLoop only: fraction of packets suppressed
    seed: int = 0

    @property
    def end_ts(self) -> int:
        return self.start_ts + int(round(self.duration_s * MICROS))

    @classmethod
    def from_json(cls, d, scenario_start_ts=DEFAULT_START_TS):
        if "start_ts" in d:
            start = int(d["start_ts"])
        else:
            start = scenario_start_ts + int(round(float(d["start_offset_s"]) * MICROS))
        return cls(
            kind=FaultKind(d["kind"]),
            start_ts=start,
            duration_s=float(d["duration_s"]),
            magnitude=float(d["magnitude"]),
            traffic_drop=float(d.get("traffic_drop", 0.5)),
            seed=int(d.get("seed", 0)),
        )


@dataclass
class SyntheticTraces:
    packets: np.ndarray  # every probe, in merge order
    power: List[PowerSample]
    start_ts: int
    duration_s: int
    cadence_s: int
    n_probes: int
    profile: EnclosureProfile
    spec: Optional[ScenarioSpec] = None
    faults: List[FaultSpec] = field(default_factory=list)

    @property
    def end_ts(self) -> int:
        return self.start_ts + self.duration_s * MICROS

    def probe_streams(self) -> List[CaptureStream]:
        return [
            CaptureStream(probe_id=p, records=self.packets[self.packets["source_probe"] == p])
            for p in range(self.n_probes)
        ]

    def write(self, out_dir) -> dict:
        """Write per-probe pcaps, the power log, the enclosure profile and
        the ground truth (segments and faults) under ``out_dir``."""
        os.makedirs(out_dir, exist_ok=True)
        paths = {"pcaps": []}
        for stream in self.probe_streams():
            r = stream.records
            path = os.path.join(out_dir, f"probe-{stream.probe_id}.pcap")
            write_pcap(path, r["ts_micros"], r["src_addr"], r["dst_addr"], r["transport"], r["wire_len"], r["ip_id"])
            paths["pcaps"].append(path)
        paths["power"] = os.path.join(out_dir, "power.csv")
        write_power_log(self.power, paths["power"])
        paths["profile"] = os.path.join(out_dir, "profile.json")
        with open(paths["profile"], "w") as f:
            json.dump(self.profile.to_json(), f, indent=1)
        paths["truth"] = os.path.join(out_dir, "truth.json")
        with open(paths["truth"], "w") as f:
            json.dump(self.truth(), f, indent=1)
        return paths

    def truth(self) -> dict:
        boundaries = []
        t = self.start_ts
        segments = self.spec.segments if self.spec else ()
        for s in segments:
            boundaries.append(
                {"start_ts": t, "end_ts": t + s.length_s * MICROS, "mode": s.mode.value, "target_rho": s.target_rho}
            )
            t += s.length_s * MICROS
        faults = [
            {"kind": f.kind.value, "start_ts": f.start_ts, "end_ts": f.end_ts, "magnitude": f.magnitude}
            for f in self.faults
        ]
        return {"start_ts": self.start_ts, "end_ts": self.end_ts, "segments": boundaries, "faults": faults}


def _latent_pairs(rng, seg, n):
    x = rng.standard_normal(n)
    z = rng.standard_normal(n)
    y = seg.target_rho * x + math.sqrt(max(0.0, 1.0 - seg.target_rho**2)) * z
    traffic = np.maximum(seg.traffic_mean_pps * (1.0 + seg.noise_sd * x), 0.0)
    power = np.maximum(seg.power_mean_w * (1.0 + seg.noise_sd * y), 0.0)
    return traffic, power


def _spread_counts(rng, totals, cadence):
    """Split each interval total over its seconds as evenly as possible,
    handing the remainder to randomly chosen seconds."""
    base = totals // cadence
    rem = totals % cadence
    ranks = rng.random((len(totals), cadence)).argsort(axis=1)
    return (base[:, None] + (ranks < rem[:, None])).ravel()


def _renumber(packets):
    """Sort into merge order and reassign per-probe sequence numbers."""
    packets = packets[np.lexsort((packets["source_probe"], packets["ts_micros"]))]
    probe = packets["source_probe"]
    order = np.argsort(probe, kind="stable")
    seq = np.empty(len(packets), dtype=np.int64)
    sorted_probe = probe[order]
    starts = np.searchsorted(sorted_probe, sorted_probe, side="left")
    seq[order] = np.arange(len(packets)) - starts
    packets["seq_in_probe"] = seq
    return packets


def _assign_ip_ids(rng, packets):
    src = packets["src_addr"]
    order = np.argsort(src, kind="stable")
    sorted_src = src[order]
    starts = np.searchsorted(sorted_src, sorted_src, side="left")
    first_id = rng.integers(0, 65536, size=len(packets))[order][starts]
    ids = np.empty(len(packets), dtype=np.int64)
    ids[order] = (first_id + np.arange(len(packets)) - starts) % 65536
    packets["ip_id"] = ids


def _emit_packets(rng, spec, per_second, second_offset=0):
    n = int(per_second.sum())
    secs = np.repeat(np.arange(len(per_second)) + second_offset, per_second)
    pk = np.zeros(n, dtype=PACKET_DTYPE)
    pk["ts_micros"] = spec.start_ts + secs * MICROS + rng.integers(0, MICROS, size=n)

    internal = np.array([int(ipaddress.IPv4Address(a)) for a in spec.internal_pool], dtype=np.uint32)
    external = np.array([int(ipaddress.IPv4Address(a)) for a in spec.external_pool], dtype=np.uint32)
    a_idx = rng.integers(0, len(internal), size=n)
    b_idx = (a_idx + rng.integers(1, len(internal), size=n)) % len(internal)
    inner = rng.random(n) < spec.inner_fraction
    peer = np.where(inner, internal[b_idx], external[rng.integers(0, len(external), size=n)])
    outbound = rng.random(n) < 0.5
    pk["src_addr"] = np.where(outbound, internal[a_idx], peer)
    pk["dst_addr"] = np.where(outbound, peer, internal[a_idx])

    u = rng.random(n)
    udp_cut = spec.tcp_fraction + (1 - spec.tcp_fraction) * 0.8
    pk["transport"] = np.where(u < spec.tcp_fraction, Transport.TCP, np.where(u < udp_cut, Transport.UDP, Transport.ICMP))
    pk["wire_len"] = rng.integers(64, 1501, size=n)
    # the probe on the switch serving the internal endpoint sees the packet
    pk["source_probe"] = a_idx % spec.n_probes
    return pk


def _add_duplicates(rng, spec, packets):
    if spec.duplicate_fraction <= 0 or spec.n_probes < 2:
        return packets
    pick = rng.random(len(packets)) < spec.duplicate_fraction
    dup = packets[pick].copy()
    dup["source_probe"] = (dup["source_probe"] + 1 + rng.integers(0, spec.n_probes - 1, size=len(dup))) % spec.n_probes
    dup["ts_micros"] += rng.integers(1, spec.duplicate_jitter_us + 1, size=len(dup))
    return np.concatenate([packets, dup])


def generate(spec: ScenarioSpec) -> SyntheticTraces:
    """Deterministic traces for ``spec``; the same seed gives identical output."""
    spec.validate()
    children = np.random.SeedSequence(spec.seed).spawn(len(spec.segments) + 1)
    c = spec.cadence_s
    traffic, apparent = [], []
    for seg, child in zip(spec.segments, children):
        t, p = _latent_pairs(np.random.default_rng(child), seg, seg.length_s // c)
        traffic.append(t)
        apparent.append(p)
    traffic = np.concatenate(traffic)
    apparent = np.concatenate(apparent)

    rng = np.random.default_rng(children[-1])
    totals = np.rint(traffic * c).astype(np.int64)
    packets = _emit_packets(rng, spec, _spread_counts(rng, totals, c))
    _assign_ip_ids(rng, packets)
    packets = _renumber(_add_duplicates(rng, spec, packets))

    pf = spec.power_factor
    reactive_share = math.sqrt(1.0 - pf * pf)
    phase = math.degrees(math.acos(pf))
    power = [
        PowerSample(spec.start_ts + (k + 1) * c * MICROS, float(s * pf), float(s * reactive_share), phase)
        for k, s in enumerate(apparent.tolist())
    ]
    profile = EnclosureProfile(internal_addrs=tuple(f"{a}/32" for a in spec.internal_pool))
    return SyntheticTraces(packets, power, spec.start_ts, spec.duration_s, c, spec.n_probes, profile, spec)


def _check_fault(traces, fault):
    if fault.duration_s <= 0:
        raise OutOfRange("fault duration must be positive")
    if fault.start_ts < traces.start_ts or fault.end_ts > traces.end_ts:
        raise OutOfRange("fault interval lies outside the scenario")
    if fault.magnitude < 0:
        raise OutOfRange("fault magnitude must be >= 0")
    if not 0 <= fault.traffic_drop <= 1:
        raise OutOfRange("traffic_drop must be in [0, 1]")


def inject(traces: SyntheticTraces, fault: FaultSpec) -> SyntheticTraces:
    """Return a perturbed copy of ``traces``.

    CpuLoop: inside the fault the PDU readings are shuffled (a pegged CPU no
    longer follows the network), active power rises by ``magnitude`` watts
    at constant power factor, and ``traffic_drop`` of the packets vanish.
    PsuPowerFactorDecay: reactive power grows so the power factor falls by
    ``magnitude`` per hour from the fault start.
    TrafficFlood: the packet rate is multiplied by 1 + ``magnitude``.
    A zero magnitude leaves the traces untouched.
    """
    _check_fault(traces, fault)
    out = replace(traces, packets=traces.packets.copy(), power=list(traces.power), faults=traces.faults + [fault])
    if fault.magnitude == 0:
        return out
    rng = np.random.default_rng(fault.seed)
    f0, f1 = fault.start_ts, fault.end_ts
    # a reading at t summarises (t - cadence, t]
    in_fault = [i for i, s in enumerate(out.power) if f0 < s.ts_micros <= f1]

    if fault.kind is FaultKind.CPU_LOOP:
        perm = rng.permutation(in_fault)
        old = [traces.power[j] for j in perm]
        for i, src in zip(in_fault, old):
            active = src.active_w + fault.magnitude
            scale = active / src.active_w if src.active_w > 0 else 1.0
            out.power[i] = replace(src, ts_micros=traces.power[i].ts_micros, active_w=active, reactive_var=src.reactive_var * scale)
        ts = out.packets["ts_micros"]
        hit = (ts >= f0) & (ts < f1)
        drop = hit & (rng.random(len(ts)) < fault.traffic_drop)
        out.packets = _renumber(out.packets[~drop])

    elif fault.kind is FaultKind.PSU_PF_DECAY:
        for i in in_fault:
            s = out.power[i]
            hours = (s.ts_micros - f0) / MICROS_PER_HOUR
            pf = max(derive(s).power_factor - fault.magnitude * hours, 0.01)
            sign = -1.0 if s.reactive_var < 0 else 1.0
            reactive = sign * s.active_w * math.sqrt(1.0 / (pf * pf) - 1.0)
            out.power[i] = replace(s, reactive_var=reactive, phase_displacement_deg=math.degrees(math.acos(pf)))

    elif fault.kind is FaultKind.TRAFFIC_FLOOD:
        ts = out.packets["ts_micros"]
        hit = np.flatnonzero((ts >= f0) & (ts < f1))
        whole, frac = divmod(fault.magnitude, 1.0)
        copies = np.full(len(hit), int(whole)) + (rng.random(len(hit)) < frac)
        extra = out.packets[np.repeat(hit, copies)].copy()
        sec_start = extra["ts_micros"] - extra["ts_micros"] % MICROS
        extra["ts_micros"] = sec_start + rng.integers(0, MICROS, size=len(extra))
        extra["ip_id"] = rng.integers(0, 65536, size=len(extra))
        out.packets = _renumber(np.concatenate([out.packets, extra]))
    return out


def load_config(path):
    """Read a scenario (and optional faults) from a JSON config file."""
    with open(path) as f:
        d = json.load(f)
    try:
        spec = ScenarioSpec.from_json(d)
        faults = [FaultSpec.from_json(x, spec.start_ts) for x in d.get("faults", [])]
    except (KeyError, ValueError, TypeError) as exc:
        raise InvalidSpec(f"{path}: {exc}") from exc
    return spec, faults


def scenario_to_json(spec: ScenarioSpec, faults=()) -> dict:
    d = asdict(spec)
    d["segments"] = [dict(asdict(s), mode=s.mode.value) for s in spec.segments]
    d["internal_pool"] = list(spec.internal_pool)
    d["external_pool"] = list(spec.external_pool)
    d["faults"] = [dict(asdict(f), kind=f.kind.value) for f in faults]
    return d
