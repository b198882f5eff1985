"""End-to-end wiring of the analysis stages, shared by the CLI and tests."""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from dcmon import correlation as corr
from dcmon.indicators import IndicatorTable, Scope, bin_series, compute_tuples
from dcmon.pcap import GLOBAL_HEADER_LEN, read_global_header
from dcmon.power_ingest import PowerSample
from dcmon.trace_ingest import (
    EnclosureProfile,
    deduplicate,
    merge_streams,
    parse_pcap,
    read_packets_csv,
)

log = logging.getLogger(__name__)


@dataclass
class AnalysisSettings:
    window_s: float = 600
    cadence_s: float = 10
    strong: float = corr.STRONG
    moderate: float = corr.MODERATE
    min_run: int = 5
    min_alert_run: int = 36
    decorrelation_band: float = 0.3
    bin_mode: str = "trailing"
    pf_window_s: float = 3600
    pf_slope_per_h: float = -0.05


@dataclass
class Analysis:
    table: IndicatorTable
    series: corr.AlignedSeries
    points: List[corr.CorrelationPoint]
    smoothed: corr.AlignedSeries
    events: List[corr.RegimeEvent] = field(default_factory=list)


def is_pcap(path) -> bool:
    with open(path, "rb") as f:
        head = f.read(GLOBAL_HEADER_LEN)
    try:
        read_global_header(head)
        return True
    except Exception:
        return False


def load_stream(paths: Sequence[str], offsets_us: Optional[Sequence[int]] = None, dedup_window_us: Optional[int] = None):
    """Parse and merge probe captures (probe ids follow argument order), or
    read one already-merged packet CSV."""
    if len(paths) == 1 and not is_pcap(paths[0]):
        with open(paths[0], newline="") as f:
            packets = read_packets_csv(f)
    else:
        offsets = list(offsets_us or [])
        offsets += [0] * (len(paths) - len(offsets))
        streams = [parse_pcap(p, probe, off) for probe, (p, off) in enumerate(zip(paths, offsets))]
        packets = merge_streams(streams)
    if dedup_window_us is not None:
        before = len(packets)
        packets = deduplicate(packets, dedup_window_us)
        log.info("dedup removed %d of %d records", before - len(packets), before)
    return packets


def correlate(table: IndicatorTable, power: Sequence[PowerSample], settings: AnalysisSettings):
    series = bin_series(table, power, settings.cadence_s, settings.bin_mode)
    points = corr.sliding_correlation(series, settings.window_s, strong=settings.strong, moderate=settings.moderate)
    return series, points


def detect(points, settings: AnalysisSettings, series=None, power=None):
    events = corr.detect_regimes(
        points,
        min_run=settings.min_run,
        decorrelation_band=settings.decorrelation_band,
        min_alert_run=settings.min_alert_run,
        strong=settings.strong,
    )
    if series is not None:
        events = corr.refine_boundaries(events, series, settings.window_s)
    if power:
        events += corr.detect_power_factor_decay(
            power, settings.pf_window_s, settings.pf_slope_per_h, cadence_s=settings.cadence_s
        )
        events.sort(key=lambda e: (e.start_ts, e.end_ts))
    return events


def analyze(
    packets: np.ndarray,
    power: Sequence[PowerSample],
    profile: EnclosureProfile,
    settings: AnalysisSettings = None,
    scopes=None,
) -> Analysis:
    settings = settings or AnalysisSettings()
    table = compute_tuples(packets, profile, scopes or {Scope.system()})
    series, points = correlate(table, power, settings)
    smoothed = corr.smooth_means(series, settings.window_s)
    events = detect(points, settings, series, power)
    return Analysis(table, series, points, smoothed, events)


def period_events(events):
    return [e for e in events if e.kind in corr.PERIOD_KINDS]
