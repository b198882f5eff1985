"""Date-partitioned file store for packet traces, indicator tuples and
power samples, with per-kind retention.

Layout::

    dataset_dir/
      manifest.json
      2024-01-31/trace-<start>-<end>.csv
      2024-01-31/indicators-<start>-<end>.csv
      2024-01-31/power-<start>-<end>.csv

Only one process may write at a time (``.lock``); the manifest is replaced
atomically so readers never observe a half-written one.
"""

import calendar
import hashlib
import io
import json
import os
from dataclasses import asdict, dataclass, replace
from datetime import datetime, timedelta, timezone
from typing import List

import numpy as np
from filelock import FileLock, Timeout

from dcmon.errors import IoFailure, ManifestConflict
from dcmon.indicators import IndicatorTable, read_indicators_csv, write_indicators_csv
from dcmon.power_ingest import read_power_csv, write_power_csv
from dcmon.trace_ingest import read_packets_csv, write_packets_csv

MANIFEST = "manifest.json"
LOCK = ".lock"
KINDS = ("trace", "indicators", "power")
MICROS = 1_000_000
DAY_MICROS = 86_400 * MICROS


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    kind: str
    start_ts: int
    end_ts: int
    records: int
    checksum_sha256: str


@dataclass(frozen=True)
class RetentionPolicy:
    network_trace_days: int = 7
    indicator_months: int = 6
    power_months: int = 6

    def __post_init__(self):
        for name in ("network_trace_days", "indicator_months", "power_months"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        # aggregates must outlive the raw traces; compare with the shortest month
        if self.indicator_months * 28 < self.network_trace_days:
            raise ValueError("indicator retention must be at least as long as trace retention")


@dataclass
class PruneReport:
    removed: List[ManifestEntry]
    kept: int


def _day(ts_micros):
    return datetime.fromtimestamp(ts_micros // MICROS, tz=timezone.utc).strftime("%Y-%m-%d")


def _day_start(ts_micros):
    return ts_micros - ts_micros % DAY_MICROS


def read_manifest(dataset_dir) -> List[ManifestEntry]:
    path = os.path.join(dataset_dir, MANIFEST)
    if not os.path.exists(path):
        return []
    try:
        with open(path) as f:
            return [ManifestEntry(**e) for e in json.load(f)["entries"]]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def _write_manifest(dataset_dir, entries):
    path = os.path.join(dataset_dir, MANIFEST)
    tmp = path + ".tmp"
    entries = sorted(entries, key=lambda e: (e.start_ts, e.kind, e.path))
    with open(tmp, "w") as f:
        json.dump({"entries": [asdict(e) for e in entries]}, f, indent=1)
        f.write("\n")
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def _lock(dataset_dir, timeout):
    return FileLock(os.path.join(dataset_dir, LOCK), timeout=timeout)


def _serialise(kind, part):
    buf = io.StringIO()
    if kind == "trace":
        write_packets_csv(part, buf)
    elif kind == "indicators":
        write_indicators_csv(part, buf)
    else:
        write_power_csv(part, buf)
    return buf.getvalue().encode("utf-8")


def _split_by_day(kind, data):
    """Yield (start_ts, end_ts, records, part) per UTC day."""
    if kind == "trace":
        ts = data["ts_micros"]
        days = _day_start(ts)
        for d in np.unique(days):
            part = data[days == d]
            yield int(part["ts_micros"][0]), int(part["ts_micros"][-1]), len(part), part
    elif kind == "indicators":
        by_day = {}
        for t in data.tuples:
            ts = (data.origin_s + t.second_index) * MICROS
            by_day.setdefault(_day_start(ts), []).append(t)
        for d in sorted(by_day):
            rows = by_day[d]
            secs = [t.second_index for t in rows]
            part = IndicatorTable(data.origin_s, max(secs) + 1, rows)
            yield (data.origin_s + min(secs)) * MICROS, (data.origin_s + max(secs)) * MICROS, len(rows), part
    else:
        by_day = {}
        for s in data:
            by_day.setdefault(_day_start(s.ts_micros), []).append(s)
        for d in sorted(by_day):
            rows = by_day[d]
            yield rows[0].ts_micros, rows[-1].ts_micros, len(rows), rows


def persist(dataset_dir, artifacts: dict, lock_timeout: float = 10.0) -> List[ManifestEntry]:
    """Write artifacts (keys ``trace``, ``indicators``, ``power``) into
    day partitions and return the updated manifest.

    Raises ManifestConflict if any new file overlaps the time span of an
    existing entry of the same kind; nothing is written in that case.
    """
    unknown = set(artifacts) - set(KINDS)
    if unknown:
        raise ValueError(f"unknown artifact kinds {sorted(unknown)}")
    try:
        os.makedirs(dataset_dir, exist_ok=True)
        with _lock(dataset_dir, lock_timeout):
            entries = read_manifest(dataset_dir)
            staged = []
            for kind in KINDS:
                data = artifacts.get(kind)
                if data is None:
                    continue
                for start, end, count, part in _split_by_day(kind, data):
                    rel = os.path.join(_day(start), f"{kind}-{start}-{end}.csv")
                    for e in entries + [s[0] for s in staged]:
                        if e.kind == kind and e.start_ts <= end and start <= e.end_ts:
                            raise ManifestConflict(f"{kind} span [{start}, {end}] overlaps {e.path}")
                    payload = _serialise(kind, part)
                    entry = ManifestEntry(rel, kind, start, end, count, hashlib.sha256(payload).hexdigest())
                    staged.append((entry, payload))
            for entry, payload in staged:
                full = os.path.join(dataset_dir, entry.path)
                os.makedirs(os.path.dirname(full), exist_ok=True)
                with open(full, "wb") as f:
                    f.write(payload)
            entries += [e for e, _ in staged]
            _write_manifest(dataset_dir, entries)
            return read_manifest(dataset_dir)
    except Timeout as exc:
        raise IoFailure(f"{dataset_dir} is locked by another writer") from exc
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load(dataset_dir, kind: str, verify: bool = True):
    """Reassemble every stored record of one kind in time order."""
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}")
    entries = sorted((e for e in read_manifest(dataset_dir) if e.kind == kind), key=lambda e: e.start_ts)
    parts = []
    for e in entries:
        full = os.path.join(dataset_dir, e.path)
        try:
            with open(full, "rb") as f:
                payload = f.read()
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        if verify and hashlib.sha256(payload).hexdigest() != e.checksum_sha256:
            raise IoFailure(f"checksum mismatch for {e.path}")
        text = io.StringIO(payload.decode("utf-8"), newline="")
        if kind == "trace":
            parts.append(read_packets_csv(text))
        elif kind == "indicators":
            parts.append(read_indicators_csv(text))
        else:
            parts.append(read_power_csv(text, source=e.path))

    if kind == "trace":
        return np.concatenate(parts) if parts else read_packets_csv(io.StringIO(""))
    if kind == "power":
        return [s for p in parts for s in p]
    if not parts:
        return IndicatorTable(0, 0, [])
    origin = parts[0].origin_s
    tuples = []
    for p in parts:
        shift = p.origin_s - origin
        tuples += [t if not shift else _shift(t, shift) for t in p.tuples]
    return IndicatorTable(origin, max(t.second_index for t in tuples) + 1, tuples)


def _shift(t, seconds):
    return replace(t, second_index=t.second_index + seconds)


def subtract_months(moment: datetime, months: int) -> datetime:
    total = moment.year * 12 + (moment.month - 1) - months
    year, month = divmod(total, 12)
    month += 1
    day = min(moment.day, calendar.monthrange(year, month)[1])
    return moment.replace(year=year, month=month, day=day)


def retention_cutoffs(policy: RetentionPolicy, now_micros: int) -> dict:
    """Oldest ``end_ts`` each kind may have and still be kept."""
    now = datetime.fromtimestamp(now_micros / MICROS, tz=timezone.utc)
    epoch = datetime(1970, 1, 1, tzinfo=timezone.utc)

    def months_back(months):
        try:
            return (subtract_months(now, months) - epoch) // timedelta(microseconds=1)
        except ValueError:
            # before year 1: nothing can be that old
            return -(2**63)

    return {
        "trace": now_micros - policy.network_trace_days * DAY_MICROS,
        "indicators": months_back(policy.indicator_months),
        "power": months_back(policy.power_months),
    }


def prune(dataset_dir, policy: RetentionPolicy, now_micros: int, lock_timeout: float = 10.0) -> PruneReport:
    """Remove entries whose newest record is older than the policy allows."""
    cutoffs = retention_cutoffs(policy, now_micros)
    try:
        with _lock(dataset_dir, lock_timeout):
            entries = read_manifest(dataset_dir)
            keep = [e for e in entries if e.end_ts >= cutoffs[e.kind]]
            removed = [e for e in entries if e.end_ts < cutoffs[e.kind]]
            if removed:
                # swap the manifest first so a crash leaves orphan files, never dangling entries
                _write_manifest(dataset_dir, keep)
                for e in removed:
                    full = os.path.join(dataset_dir, e.path)
                    if os.path.exists(full):
                        os.remove(full)
                    part_dir = os.path.dirname(full)
                    if os.path.isdir(part_dir) and not os.listdir(part_dir):
                        os.rmdir(part_dir)
            return PruneReport(removed=removed, kept=len(keep))
    except Timeout as exc:
        raise IoFailure(f"{dataset_dir} is locked by another writer") from exc
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
