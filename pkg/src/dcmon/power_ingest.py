"""Smart-PDU power log ingestion and power-triangle derivations."""

import csv
import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from dcmon.errors import InsufficientData, MalformedRow, NonMonotonicTimestamp

POWER_CSV_HEADER = ["ts_micros", "active_w", "reactive_var", "phase_deg"]
MICROS_PER_HOUR = 3_600_000_000


@dataclass(frozen=True)
class PowerSample:
    ts_micros: int
    active_w: float
    reactive_var: float
    phase_displacement_deg: float


@dataclass(frozen=True)
class DerivedPower:
    apparent_va: float
    power_factor: float


@dataclass(frozen=True)
class GapReport:
    index: int  # index of the sample that closes the gap
    gap_s: float


def derive(sample: PowerSample) -> DerivedPower:
    """Apparent power and power factor from active and reactive power.

    An unloaded reading (zero apparent power) reports a power factor of 1.0.
    """
    apparent = math.hypot(sample.active_w, sample.reactive_var)
    if apparent == 0.0:
        return DerivedPower(0.0, 1.0)
    return DerivedPower(apparent, min(sample.active_w / apparent, 1.0))


def apparent_power(samples: Sequence[PowerSample]) -> np.ndarray:
    return np.array([derive(s).apparent_va for s in samples], dtype=float)


def parse_power_log(path) -> List[PowerSample]:
    with open(path, newline="", encoding="utf-8") as f:
        return read_power_csv(f, source=str(path))


def read_power_csv(f, source="<stream>") -> List[PowerSample]:
    reader = csv.reader(f)
    header = next(reader, None)
    if header is None:
        return []
    if [h.strip() for h in header] != POWER_CSV_HEADER:
        raise MalformedRow(f"{source}: expected header {','.join(POWER_CSV_HEADER)}", 0)

    samples = []
    prev_ts = None
    for index, row in enumerate(reader, start=1):
        if not row:
            continue
        if len(row) != 4:
            raise MalformedRow(f"{source}: row {index} has {len(row)} fields, expected 4", index)
        try:
            ts = int(row[0])
            active, reactive, phase = (float(v) for v in row[1:])
        except ValueError as exc:
            raise MalformedRow(f"{source}: row {index}: {exc}", index) from exc
        if not all(math.isfinite(v) for v in (active, reactive, phase)):
            raise MalformedRow(f"{source}: row {index}: non-finite value", index)
        if active < 0:
            raise MalformedRow(f"{source}: row {index}: negative active power {active}", index)
        if prev_ts is not None and ts <= prev_ts:
            raise NonMonotonicTimestamp(f"{source}: row {index}: timestamp {ts} does not follow {prev_ts}", index)
        prev_ts = ts
        samples.append(PowerSample(ts, active, reactive, phase))
    return samples


def write_power_csv(samples: Sequence[PowerSample], f) -> None:
    writer = csv.writer(f, lineterminator="\n")
    writer.writerow(POWER_CSV_HEADER)
    for s in samples:
        writer.writerow([s.ts_micros, repr(s.active_w), repr(s.reactive_var), repr(s.phase_displacement_deg)])


def write_power_log(samples: Sequence[PowerSample], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        write_power_csv(samples, f)


def validate_cadence(samples: Sequence[PowerSample], expected_period_s: float = 10.0, tolerance_fraction: float = 0.2):
    """Report every inter-sample gap outside period * (1 +/- tolerance)."""
    if expected_period_s <= 0:
        raise ValueError("expected_period_s must be positive")
    if not 0 <= tolerance_fraction < 1:
        raise ValueError("tolerance_fraction must be in [0, 1)")
    lo = expected_period_s * (1 - tolerance_fraction)
    hi = expected_period_s * (1 + tolerance_fraction)
    reports = []
    for i in range(1, len(samples)):
        gap = (samples[i].ts_micros - samples[i - 1].ts_micros) / 1e6
        if gap < lo or gap > hi:
            reports.append(GapReport(i, gap))
    return reports


def power_factor_trend(samples: Sequence[PowerSample], min_points: int = 3) -> float:
    """Least-squares slope of the power factor, in units per hour."""
    if len(samples) < max(min_points, 2):
        raise InsufficientData(f"need at least {max(min_points, 2)} samples, got {len(samples)}")
    t0 = samples[0].ts_micros
    hours = np.array([(s.ts_micros - t0) / MICROS_PER_HOUR for s in samples])
    pf = np.array([derive(s).power_factor for s in samples])
    dt = hours - hours.mean()
    denom = float(np.dot(dt, dt))
    if denom == 0.0:
        raise InsufficientData("all samples share one timestamp")
    return float(np.dot(dt, pf - pf.mean()) / denom)
