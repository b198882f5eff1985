"""Sliding-window Pearson correlation between traffic and apparent power,
and rule-based detection of correlation regimes and deviation alerts."""

import csv
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Sequence

import numpy as np

from dcmon.errors import EmptySeries, LengthMismatch, TooFewSamples
from dcmon.power_ingest import MICROS_PER_HOUR, PowerSample, derive

STRONG = 0.7
MODERATE = 0.3

_EPS = np.finfo(float).eps


@dataclass
class AlignedSeries:
    """Traffic and apparent power paired on the power-sample clock.

    Point ``i`` summarises the interval ``(ts[i] - cadence, ts[i]]``.
    """

    ts_micros: np.ndarray
    traffic_pps: np.ndarray
    apparent_va: np.ndarray
    cadence_s: float = 10.0
    dropped: int = 0

    def __post_init__(self):
        self.ts_micros = np.asarray(self.ts_micros, dtype=np.int64)
        self.traffic_pps = np.asarray(self.traffic_pps, dtype=float)
        self.apparent_va = np.asarray(self.apparent_va, dtype=float)
        if not (len(self.ts_micros) == len(self.traffic_pps) == len(self.apparent_va)):
            raise LengthMismatch("aligned series columns differ in length")
        if len(self.ts_micros) > 1 and np.any(np.diff(self.ts_micros) <= 0):
            raise ValueError("aligned series timestamps must be strictly increasing")

    def __len__(self):
        return len(self.ts_micros)

    @property
    def start_ts(self) -> int:
        """Beginning of the interval covered by the first point."""
        return int(self.ts_micros[0] - round(self.cadence_s * 1e6))

    @property
    def end_ts(self) -> int:
        return int(self.ts_micros[-1])


class CorrClass(Enum):
    STRONG = "Strong"
    MODERATE = "Moderate"
    WEAK = "Weak"
    INDEPENDENT = "Independent"
    UNDEFINED = "Undefined"


class Direction(Enum):
    DIRECT = "Direct"
    INVERSE = "Inverse"
    NONE = "None"


class EventKind(Enum):
    CORRELATED = "CorrelatedPeriod"
    ANTICORRELATED = "AnticorrelatedPeriod"
    DECORRELATION_ALERT = "DecorrelationAlert"
    PF_DECAY_ALERT = "PowerFactorDecayAlert"


PERIOD_KINDS = (EventKind.CORRELATED, EventKind.ANTICORRELATED)


@dataclass
class PearsonAccumulator:
    """Streaming co-moments for the population Pearson coefficient.

    Updates are Welford-style (mean-centred) on values shifted by the first
    sample, so rounding scales with the spread of the data rather than its
    magnitude. A column sitting near 1e7 with a spread of 1e-2 is still
    resolved to about 1e-12 relative error.
    """

    n: int = 0
    mean_x: float = 0.0  # relative to shift_x
    mean_y: float = 0.0  # relative to shift_y
    m2_x: float = 0.0
    m2_y: float = 0.0
    c_xy: float = 0.0
    shift_x: float = 0.0
    shift_y: float = 0.0

    def add(self, x: float, y: float) -> None:
        if self.n == 0:
            self.shift_x, self.shift_y = x, y
        x -= self.shift_x
        y -= self.shift_y
        self.n += 1
        dx = x - self.mean_x
        dy = y - self.mean_y
        self.mean_x += dx / self.n
        self.mean_y += dy / self.n
        self.m2_x += dx * (x - self.mean_x)
        self.m2_y += dy * (y - self.mean_y)
        self.c_xy += dx * (y - self.mean_y)

    def extend(self, xs, ys) -> "PearsonAccumulator":
        for x, y in zip(xs, ys):
            self.add(x, y)
        return self

    @property
    def mean(self):
        return (self.shift_x + self.mean_x, self.shift_y + self.mean_y)

    def merge(self, other: "PearsonAccumulator") -> "PearsonAccumulator":
        """Combine with an accumulator over a disjoint sample set."""
        if other.n == 0:
            return replace(self)
        if self.n == 0:
            return replace(other)
        n = self.n + other.n
        # other's mean expressed against our shift
        dx = (other.shift_x - self.shift_x) + other.mean_x - self.mean_x
        dy = (other.shift_y - self.shift_y) + other.mean_y - self.mean_y
        w = self.n * other.n / n
        return PearsonAccumulator(
            n=n,
            mean_x=self.mean_x + dx * other.n / n,
            mean_y=self.mean_y + dy * other.n / n,
            m2_x=self.m2_x + other.m2_x + dx * dx * w,
            m2_y=self.m2_y + other.m2_y + dy * dy * w,
            c_xy=self.c_xy + other.c_xy + dx * dy * w,
            shift_x=self.shift_x,
            shift_y=self.shift_y,
        )

    def _spread(self, m2, mean):
        # rounding residue of a constant column is not variance
        if m2 <= self.n * (8 * _EPS * abs(mean)) ** 2:
            return 0.0
        return m2

    @property
    def var_x(self) -> float:
        return self._spread(self.m2_x, self.mean_x) / self.n if self.n else 0.0

    @property
    def var_y(self) -> float:
        return self._spread(self.m2_y, self.mean_y) / self.n if self.n else 0.0

    @property
    def cov(self) -> float:
        return self.c_xy / self.n if self.n else 0.0

    def rho(self) -> Optional[float]:
        if self.n < 2:
            return None
        sx = self._spread(self.m2_x, self.mean_x)
        sy = self._spread(self.m2_y, self.mean_y)
        if sx <= 0.0 or sy <= 0.0:
            return None
        r = self.c_xy / math.sqrt(sx * sy)
        return min(1.0, max(-1.0, r))


def pearson(xs: Sequence[float], ys: Sequence[float]) -> Optional[float]:
    """Population Pearson coefficient, or None when either input is constant."""
    if len(xs) != len(ys):
        raise LengthMismatch(f"{len(xs)} x values vs {len(ys)} y values")
    if len(xs) < 2:
        raise TooFewSamples("need at least 2 samples")
    return PearsonAccumulator().extend(xs, ys).rho()


def classify(rho: Optional[float], strong: float = STRONG, moderate: float = MODERATE):
    if rho is None or math.isnan(rho):
        return CorrClass.UNDEFINED, Direction.NONE
    direction = Direction.DIRECT if rho > 0 else Direction.INVERSE if rho < 0 else Direction.NONE
    mag = abs(rho)
    if mag > strong:
        return CorrClass.STRONG, direction
    if mag > moderate:
        return CorrClass.MODERATE, direction
    if mag > 0:
        return CorrClass.WEAK, direction
    return CorrClass.INDEPENDENT, direction


@dataclass(frozen=True)
class CorrelationPoint:
    window_end_ts: int
    window_start_ts: int
    rho: Optional[float]
    n_samples: int
    cls: CorrClass
    direction: Direction
    low_n: bool = False


def _window_starts(ts, window_us):
    # first index inside (t - window, t] for every t
    return np.searchsorted(ts, ts - window_us, side="right")


def min_window_samples(window_s: float, cadence_s: float, min_fill: float = 0.8) -> int:
    return math.ceil(round(min_fill * window_s / cadence_s, 9))


def sliding_correlation(
    series: AlignedSeries,
    window_s: float = 600,
    min_fill: float = 0.8,
    strong: float = STRONG,
    moderate: float = MODERATE,
) -> List[CorrelationPoint]:
    """One correlation point per sample over the trailing window (t - window_s, t].

    At the default 600 s window and 10 s cadence a full window holds exactly
    60 samples. Windows with fewer than ``min_fill`` of that are reported
    Undefined and flagged ``low_n``.
    """
    if len(series) == 0:
        raise EmptySeries("no aligned samples to correlate")
    if window_s < 2 * series.cadence_s:
        raise ValueError("window must span at least two samples")
    window_us = int(round(window_s * 1e6))
    need = max(min_window_samples(window_s, series.cadence_s, min_fill), 2)
    ts = series.ts_micros
    xs = series.traffic_pps.tolist()
    ys = series.apparent_va.tolist()
    starts = _window_starts(ts, window_us)

    points = []
    for i, j in enumerate(starts.tolist()):
        n = i - j + 1
        t = int(ts[i])
        if n < need:
            rho, low_n = None, True
        else:
            rho, low_n = PearsonAccumulator().extend(xs[j : i + 1], ys[j : i + 1]).rho(), False
        cls, direction = classify(rho, strong, moderate)
        points.append(CorrelationPoint(t, t - window_us, rho, n, cls, direction, low_n))
    return points


def smooth_means(series: AlignedSeries, window_s: float = 600) -> AlignedSeries:
    """Trailing moving average of both columns over (t - window_s, t]."""
    if window_s <= 0:
        raise ValueError("window_s must be positive")
    starts = _window_starts(series.ts_micros, int(round(window_s * 1e6)))
    traffic = np.empty(len(series))
    power = np.empty(len(series))
    for i, j in enumerate(starts):
        traffic[i] = series.traffic_pps[j : i + 1].mean()
        power[i] = series.apparent_va[j : i + 1].mean()
    return AlignedSeries(series.ts_micros.copy(), traffic, power, series.cadence_s, series.dropped)


@dataclass(frozen=True)
class RegimeEvent:
    kind: EventKind
    start_ts: int
    end_ts: int
    mean_rho: Optional[float]
    evidence: int
    detail: dict = field(default_factory=dict, compare=False)


def _label(rho, strong, band):
    if rho is None:
        return None
    if rho > strong:
        return "pos"
    if rho < -strong:
        return "neg"
    if abs(rho) < band:
        return "band"
    return None


def detect_regimes(
    points: Sequence[CorrelationPoint],
    min_run: int = 5,
    decorrelation_band: float = 0.3,
    min_alert_run: int = 36,
    strong: float = STRONG,
) -> List[RegimeEvent]:
    """Find strong-correlation periods and decorrelation alerts.

    A period is a maximal run of at least ``min_run`` points beyond
    +/-``strong``. A decorrelation alert is a run of at least
    ``min_alert_run`` points inside +/-``decorrelation_band`` that follows a
    period; one alert fires per loss of strong correlation. The default
    alert run outlasts the near-zero stretch a window spends crossing from
    +0.9 to -0.9, so plain sign flips do not alert.

    Event spans cover the data behind them: from the start of the first
    window to the end of the last one.
    """
    if min_run < 1 or min_alert_run < 1:
        raise ValueError("run lengths must be >= 1")
    events = []
    armed = False
    i = 0
    n = len(points)
    while i < n:
        label = _label(points[i].rho, strong, decorrelation_band)
        j = i
        while j + 1 < n and _label(points[j + 1].rho, strong, decorrelation_band) == label:
            j += 1
        run = points[i : j + 1]
        length = j - i + 1
        if label in ("pos", "neg") and length >= min_run:
            kind = EventKind.CORRELATED if label == "pos" else EventKind.ANTICORRELATED
            events.append(_event(kind, run))
            armed = True
        elif label == "band" and armed and length >= min_alert_run:
            events.append(_event(EventKind.DECORRELATION_ALERT, run))
            armed = False
        i = j + 1
    return _clip_same_kind(events)


def _event(kind, run):
    return RegimeEvent(
        kind=kind,
        start_ts=run[0].window_start_ts,
        end_ts=run[-1].window_end_ts,
        mean_rho=float(np.mean([p.rho for p in run])),
        evidence=len(run),
    )


def _clip_same_kind(events):
    last_end = {}
    out = []
    for ev in events:
        prev = last_end.get(ev.kind)
        if prev is not None and ev.start_ts < prev:
            ev = replace(ev, start_ts=min(prev, ev.end_ts))
        last_end[ev.kind] = ev.end_ts
        out.append(ev)
    return out


def _split_cost(x, y, min_side):
    """Index minimising the two-segment bivariate Gaussian cost, or None."""
    n = len(x)
    if n < 2 * min_side:
        return None
    x = x - x.mean()
    y = y - y.mean()
    zero = np.zeros(1)
    sx, sy = np.concatenate([zero, np.cumsum(x)]), np.concatenate([zero, np.cumsum(y)])
    sxx, syy = np.concatenate([zero, np.cumsum(x * x)]), np.concatenate([zero, np.cumsum(y * y)])
    sxy = np.concatenate([zero, np.cumsum(x * y)])

    def logdet(lo, hi):
        m = hi - lo
        mx = (sx[hi] - sx[lo]) / m
        my = (sy[hi] - sy[lo]) / m
        vx = (sxx[hi] - sxx[lo]) / m - mx * mx
        vy = (syy[hi] - syy[lo]) / m - my * my
        cxy = (sxy[hi] - sxy[lo]) / m - mx * my
        det = vx * vy - cxy * cxy
        return m * np.log(np.maximum(det, 1e-300))

    taus = np.arange(min_side, n - min_side + 1)
    costs = logdet(np.zeros_like(taus), taus) + logdet(taus, np.full_like(taus, n))
    return int(taus[np.argmin(costs)])


def refine_boundaries(
    events: Sequence[RegimeEvent],
    series: AlignedSeries,
    window_s: float = 600,
    min_side: int = 5,
) -> List[RegimeEvent]:
    """Sharpen period boundaries using the raw aligned samples.

    Windowed coefficients smear a regime change across a whole window. Where
    a correlated period is followed by an anticorrelated one (or the
    reverse), the change point is re-estimated on the samples between the
    last window of the first period and the first window of the second.
    The split is the one that best fits two separate bivariate Gaussians.
    All event spans are also clipped to the time covered by the series.
    """
    if len(series) == 0:
        return list(events)
    lo_ts, hi_ts = series.start_ts, series.end_ts
    out = [replace(ev, start_ts=min(max(ev.start_ts, lo_ts), hi_ts), end_ts=max(min(ev.end_ts, hi_ts), lo_ts)) for ev in events]
    window_us = int(round(window_s * 1e6))
    periods = [k for k, ev in enumerate(out) if ev.kind in PERIOD_KINDS]
    ts = series.ts_micros
    for a, b in zip(periods, periods[1:]):
        left, right = out[a], out[b]
        if left.kind == right.kind:
            continue
        region_lo = max(left.end_ts - window_us, left.start_ts)
        region_hi = min(right.start_ts + window_us, right.end_ts)
        i0 = int(np.searchsorted(ts, region_lo, side="right"))
        i1 = int(np.searchsorted(ts, region_hi, side="right"))
        tau = _split_cost(series.traffic_pps[i0:i1], series.apparent_va[i0:i1], min_side)
        if tau is None:
            continue
        boundary = int(ts[i0 + tau - 1])
        out[a] = replace(left, end_ts=max(boundary, left.start_ts))
        out[b] = replace(right, start_ts=min(boundary, right.end_ts))
    return out


def detect_power_factor_decay(
    samples: Sequence[PowerSample],
    window_s: float = 3600,
    slope_per_h: float = -0.05,
    min_run: int = 6,
    min_fill: float = 0.8,
    cadence_s: float = 10.0,
) -> List[RegimeEvent]:
    """Alert when the power-factor trend over a trailing window stays below
    ``slope_per_h`` for ``min_run`` consecutive samples."""
    if not samples:
        return []
    ts = np.array([s.ts_micros for s in samples], dtype=np.int64)
    pf = np.array([derive(s).power_factor for s in samples])
    hours = (ts - ts[0]) / MICROS_PER_HOUR
    starts = _window_starts(ts, int(round(window_s * 1e6)))
    need = max(min_window_samples(window_s, cadence_s, min_fill), 3)
    slopes = np.full(len(ts), np.nan)
    for i, j in enumerate(starts):
        if i - j + 1 < need:
            continue
        h = hours[j : i + 1]
        dh = h - h.mean()
        slopes[i] = np.dot(dh, pf[j : i + 1] - pf[j : i + 1].mean()) / np.dot(dh, dh)

    events = []
    below = slopes < slope_per_h
    i = 0
    while i < len(ts):
        if not below[i]:
            i += 1
            continue
        j = i
        while j + 1 < len(ts) and below[j + 1]:
            j += 1
        if j - i + 1 >= min_run:
            events.append(
                RegimeEvent(
                    kind=EventKind.PF_DECAY_ALERT,
                    start_ts=int(ts[starts[i]]),
                    end_ts=int(ts[j]),
                    mean_rho=None,
                    evidence=j - i + 1,
                    detail={"min_slope_per_h": float(np.min(slopes[i : j + 1]))},
                )
            )
        i = j + 1
    return events


CORRELATION_CSV_HEADER = ["window_end_ts", "rho", "n", "class", "direction"]
EVENTS_CSV_HEADER = ["kind", "start_ts", "end_ts", "mean_rho", "evidence"]
SERIES_CSV_HEADER = ["ts_micros", "traffic_pps", "apparent_va"]


def _fmt(v):
    return "" if v is None else repr(float(v))


def write_correlation_csv(points: Sequence[CorrelationPoint], f) -> None:
    w = csv.writer(f, lineterminator="\n")
    w.writerow(CORRELATION_CSV_HEADER)
    for p in points:
        w.writerow([p.window_end_ts, _fmt(p.rho), p.n_samples, p.cls.value, p.direction.value])


def read_correlation_csv(f, window_s: float = 600) -> List[CorrelationPoint]:
    reader = csv.reader(f)
    header = next(reader, None)
    if header is None:
        return []
    if header != CORRELATION_CSV_HEADER:
        raise ValueError(f"unexpected correlation CSV header {header}")
    window_us = int(round(window_s * 1e6))
    points = []
    for row in reader:
        end, rho, n, cls, direction = row
        rho = float(rho) if rho else None
        points.append(
            CorrelationPoint(int(end), int(end) - window_us, rho, int(n), CorrClass(cls), Direction(direction), rho is None)
        )
    return points


def write_events_csv(events: Sequence[RegimeEvent], f) -> None:
    w = csv.writer(f, lineterminator="\n")
    w.writerow(EVENTS_CSV_HEADER)
    for ev in events:
        w.writerow([ev.kind.value, ev.start_ts, ev.end_ts, _fmt(ev.mean_rho), ev.evidence])


def read_events_csv(f) -> List[RegimeEvent]:
    reader = csv.reader(f)
    header = next(reader, None)
    if header is None:
        return []
    if header != EVENTS_CSV_HEADER:
        raise ValueError(f"unexpected events CSV header {header}")
    return [
        RegimeEvent(EventKind(kind), int(start), int(end), float(rho) if rho else None, int(evidence))
        for kind, start, end, rho, evidence in reader
    ]


def write_series_csv(series: AlignedSeries, f) -> None:
    w = csv.writer(f, lineterminator="\n")
    w.writerow(SERIES_CSV_HEADER)
    for t, x, y in zip(series.ts_micros.tolist(), series.traffic_pps.tolist(), series.apparent_va.tolist()):
        w.writerow([t, repr(x), repr(y)])


def read_series_csv(f, cadence_s: float = 10.0) -> AlignedSeries:
    reader = csv.reader(f)
    header = next(reader, None)
    if header != SERIES_CSV_HEADER:
        raise ValueError(f"unexpected aligned series CSV header {header}")
    rows = list(reader)
    return AlignedSeries(
        [int(r[0]) for r in rows], [float(r[1]) for r in rows], [float(r[2]) for r in rows], cadence_s
    )
