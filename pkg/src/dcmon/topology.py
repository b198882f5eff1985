"""Communication graph recognition and relevant node/couple ranking.

The ranking formula is one admissible choice: a node scores the weighted
mean of its percentile rank by fan (fan-in + fan-out) and by packet rate;
a couple scores the percentile rank of its packet rate.
"""

import csv
import ipaddress
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from dcmon.trace_ingest import EnclosureProfile, Transport

Addr = ipaddress.IPv4Address
Pair = Tuple[Addr, Addr]


@dataclass
class NodeStats:
    fan_in: int = 0
    fan_out: int = 0
    in_msgs: int = 0
    out_msgs: int = 0
    in_rate_pps: float = 0.0
    out_rate_pps: float = 0.0
    protocols: frozenset = frozenset()


@dataclass
class EdgeStats:
    msgs: int = 0
    bytes: int = 0
    rate_pps: float = 0.0
    protocols: frozenset = frozenset()


@dataclass
class TopologyGraph:
    nodes: Dict[Addr, NodeStats] = field(default_factory=dict)
    edges: Dict[Pair, EdgeStats] = field(default_factory=dict)
    observation_span_s: float = 0.0


@dataclass
class RelevanceReport:
    ranked_nodes: List[Tuple[Addr, float]]
    ranked_couples: List[Tuple[Pair, float]]
    pinned: List[object]


def _pair(a, b):
    return (a, b) if a < b else (b, a)


def build_graph(packets: np.ndarray) -> TopologyGraph:
    """One node per observed address and one undirected edge per
    communicating pair. Rates divide by the observation span, floored at
    one second so a single burst still has a finite rate."""
    graph = TopologyGraph()
    if len(packets) == 0:
        return graph
    ts = packets["ts_micros"]
    span = (int(ts.max()) - int(ts.min())) / 1e6
    graph.observation_span_s = span
    denom = max(span, 1.0)

    # aggregate per directed (src, dst, transport) in numpy, then fold in Python
    keys = np.stack(
        [packets["src_addr"].astype(np.int64), packets["dst_addr"].astype(np.int64), packets["transport"].astype(np.int64)],
        axis=1,
    )
    uniq, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    nbytes = np.bincount(inverse.ravel(), weights=packets["wire_len"].astype(float), minlength=len(uniq))

    senders = defaultdict(set)
    receivers = defaultdict(set)
    protos = defaultdict(set)
    out_msgs = defaultdict(int)
    in_msgs = defaultdict(int)
    edge_msgs = defaultdict(int)
    edge_bytes = defaultdict(int)
    edge_protos = defaultdict(set)
    for (src, dst, proto), c, b in zip(uniq.tolist(), counts.tolist(), nbytes.tolist()):
        s, d = Addr(src), Addr(dst)
        t = Transport(proto)
        protos[s].add(t)
        protos[d].add(t)
        out_msgs[s] += c
        in_msgs[d] += c
        if s == d:
            continue
        receivers[s].add(d)
        senders[d].add(s)
        e = _pair(s, d)
        edge_msgs[e] += c
        edge_bytes[e] += int(b)
        edge_protos[e].add(t)

    for addr in sorted(protos):
        graph.nodes[addr] = NodeStats(
            fan_in=len(senders[addr]),
            fan_out=len(receivers[addr]),
            in_msgs=in_msgs[addr],
            out_msgs=out_msgs[addr],
            in_rate_pps=in_msgs[addr] / denom,
            out_rate_pps=out_msgs[addr] / denom,
            protocols=frozenset(protos[addr]),
        )
    for e in sorted(edge_msgs):
        graph.edges[e] = EdgeStats(
            msgs=edge_msgs[e], bytes=edge_bytes[e], rate_pps=edge_msgs[e] / denom, protocols=frozenset(edge_protos[e])
        )
    return graph


def percentile_ranks(values) -> np.ndarray:
    """Fraction of values less than or equal to each value."""
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        return v
    ordered = np.sort(v)
    return np.searchsorted(ordered, v, side="right") / len(v)


def score_relevance(
    graph: TopologyGraph,
    profile: EnclosureProfile,
    top_k: int = 10,
    fan_weight: float = 0.5,
    rate_weight: float = 0.5,
) -> RelevanceReport:
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    if fan_weight < 0 or rate_weight < 0 or fan_weight + rate_weight <= 0:
        raise ValueError("weights must be non-negative and not both zero")

    addrs = list(graph.nodes)
    fan = [graph.nodes[a].fan_in + graph.nodes[a].fan_out for a in addrs]
    rate = [graph.nodes[a].in_rate_pps + graph.nodes[a].out_rate_pps for a in addrs]
    node_scores = (fan_weight * percentile_ranks(fan) + rate_weight * percentile_ranks(rate)) / (fan_weight + rate_weight)
    nodes = sorted(zip(addrs, node_scores.tolist()), key=lambda p: (-p[1], int(p[0])))[:top_k]

    pairs = list(graph.edges)
    pair_scores = percentile_ranks([graph.edges[p].rate_pps for p in pairs])
    couples = sorted(zip(pairs, pair_scores.tolist()), key=lambda p: (-p[1], int(p[0][0]), int(p[0][1])))[:top_k]

    pinned = []
    for addr in sorted(profile.known_relevant_nodes):
        pinned.append(addr)
        nodes = [(a, s) for a, s in nodes if a != addr] + [(addr, 1.0)]
    for pair in sorted(profile.known_relevant_couples):
        pinned.append(pair)
        couples = [(p, s) for p, s in couples if p != pair] + [(pair, 1.0)]

    nodes.sort(key=lambda p: (-p[1], int(p[0])))
    couples.sort(key=lambda p: (-p[1], int(p[0][0]), int(p[0][1])))
    return RelevanceReport(ranked_nodes=nodes, ranked_couples=couples, pinned=pinned)


def write_nodes_csv(graph: TopologyGraph, f) -> None:
    w = csv.writer(f, lineterminator="\n")
    w.writerow(["addr", "fan_in", "fan_out", "in_msgs", "out_msgs", "in_rate_pps", "out_rate_pps", "protocols"])
    for addr, s in graph.nodes.items():
        protos = "|".join(sorted(t.name for t in s.protocols))
        w.writerow([addr, s.fan_in, s.fan_out, s.in_msgs, s.out_msgs, repr(s.in_rate_pps), repr(s.out_rate_pps), protos])


def write_edges_csv(graph: TopologyGraph, f) -> None:
    w = csv.writer(f, lineterminator="\n")
    w.writerow(["addr_a", "addr_b", "msgs", "bytes", "rate_pps", "protocols"])
    for (a, b), e in graph.edges.items():
        w.writerow([a, b, e.msgs, e.bytes, repr(e.rate_pps), "|".join(sorted(t.name for t in e.protocols))])


def write_dot(graph: TopologyGraph, f, report: RelevanceReport = None) -> None:
    relevant = {a for a, _ in report.ranked_nodes} if report else set()
    f.write("graph enclosure {\n")
    for addr, s in graph.nodes.items():
        style = ", style=bold" if addr in relevant else ""
        f.write(f'  "{addr}" [label="{addr}\\nin={s.fan_in} out={s.fan_out}"{style}];\n')
    for (a, b), e in graph.edges.items():
        f.write(f'  "{a}" -- "{b}" [label="{e.rate_pps:.3g} pps", weight={e.msgs}];\n')
    f.write("}\n")


def write_relevance_csv(report: RelevanceReport, f) -> None:
    w = csv.writer(f, lineterminator="\n")
    w.writerow(["scope", "score", "pinned"])
    pinned = set(report.pinned)
    for addr, score in report.ranked_nodes:
        w.writerow([f"node:{addr}", repr(score), addr in pinned])
    for (a, b), score in report.ranked_couples:
        w.writerow([f"couple:{a}|{b}", repr(score), (a, b) in pinned])
