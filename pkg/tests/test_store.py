import json
import os
from datetime import datetime, timezone

import numpy as np
import pytest
from filelock import FileLock

from conftest import random_packets
from dcmon.errors import IoFailure, ManifestConflict
from dcmon.indicators import Scope, compute_tuples
from dcmon.power_ingest import PowerSample
from dcmon.store import (
    DAY_MICROS,
    LOCK,
    RetentionPolicy,
    load,
    persist,
    prune,
    read_manifest,
    retention_cutoffs,
    subtract_months,
)
from dcmon.trace_ingest import PRIVATE_PROFILE

T0 = 1_700_000_000_000_000  # 2023-11-14
NEVER = RetentionPolicy(10**6, 10**5, 10**5)


def _power(t0, n=30):
    return [PowerSample(t0 + k * 10_000_000, 1630.0 + k / 3, 120.0 - k / 7, 4.2) for k in range(n)]


def _artifacts(rng, t0=T0):
    pk = random_packets(rng, 400, t0=t0, span_us=300_000_000)
    table = compute_tuples(pk, PRIVATE_PROFILE, {Scope.system(), Scope.node("10.0.0.1")})
    return {"trace": pk, "indicators": table, "power": _power(t0)}


def test_round_trip_is_exact(tmp_path, rng):
    art = _artifacts(rng)
    persist(tmp_path, art)
    prune(tmp_path, NEVER, T0)
    assert np.array_equal(load(tmp_path, "trace"), art["trace"])
    assert load(tmp_path, "indicators") == art["indicators"]
    assert load(tmp_path, "power") == art["power"]


def test_manifest_fields(tmp_path, rng):
    entries = persist(tmp_path, _artifacts(rng))
    raw = json.loads((tmp_path / "manifest.json").read_text())
    assert set(raw["entries"][0]) == {"path", "kind", "start_ts", "end_ts", "records", "checksum_sha256"}
    assert {e.kind for e in entries} == {"trace", "indicators", "power"}
    assert all(e.path.startswith("2023-11-14" + os.sep) for e in entries)


def test_two_days_two_partitions(tmp_path, rng):
    persist(tmp_path, {"power": _power(T0)})
    persist(tmp_path, {"power": _power(T0 + DAY_MICROS)})
    parts = sorted(os.path.dirname(e.path) for e in read_manifest(tmp_path))
    assert parts == ["2023-11-14", "2023-11-15"]


def test_batch_spanning_midnight_is_split(tmp_path):
    midnight = T0 - T0 % DAY_MICROS + DAY_MICROS
    entries = persist(tmp_path, {"power": _power(midnight - 100_000_000, 20)})
    assert [e.records for e in entries] == [10, 10]
    assert load(tmp_path, "power") == _power(midnight - 100_000_000, 20)


def test_overlap_conflicts_and_writes_nothing(tmp_path, rng):
    persist(tmp_path, {"power": _power(T0)})
    before = (tmp_path / "manifest.json").read_bytes()
    with pytest.raises(ManifestConflict):
        persist(tmp_path, {"trace": random_packets(rng, 5), "power": _power(T0 + 5_000_000)})
    assert (tmp_path / "manifest.json").read_bytes() == before
    assert not any(n.startswith("trace") for _, _, files in os.walk(tmp_path) for n in files)


def test_checksum_mismatch_detected(tmp_path):
    (entry,) = persist(tmp_path, {"power": _power(T0)})
    with open(tmp_path / entry.path, "a") as f:
        f.write("1800000000000000,1.0,0.0,0.0\n")
    with pytest.raises(IoFailure):
        load(tmp_path, "power")


def test_second_writer_is_locked_out(tmp_path):
    persist(tmp_path, {"power": _power(T0)})
    with FileLock(os.path.join(tmp_path, LOCK)):
        with pytest.raises(IoFailure):
            persist(tmp_path, {"power": _power(T0 + DAY_MICROS)}, lock_timeout=0.05)


def test_prune_everything_with_zero_policy(tmp_path, rng):
    persist(tmp_path, _artifacts(rng))
    report = prune(tmp_path, RetentionPolicy(0, 0, 0), T0 + 1000 * DAY_MICROS)
    assert len(report.removed) == 3 and report.kept == 0
    assert read_manifest(tmp_path) == []
    assert not any(d[0].isdigit() for d in os.listdir(tmp_path))


def test_prune_by_trace_age(tmp_path, rng):
    now = T0 + 20 * DAY_MICROS
    for age in (3, 10):
        persist(tmp_path, {"trace": random_packets(rng, 10, t0=now - age * DAY_MICROS, span_us=1000)})
    report = prune(tmp_path, RetentionPolicy(7, 6, 6), now)
    assert len(report.removed) == 1
    assert report.removed[0].end_ts < now - 10 * DAY_MICROS + DAY_MICROS
    assert len(read_manifest(tmp_path)) == 1


def test_prune_randomised_ages_match_filter_oracle(tmp_path, rng):
    now = T0 + 400 * DAY_MICROS
    policy = RetentionPolicy(7, 2, 4)
    ages = rng.choice(np.arange(0, 300), size=25, replace=False)
    for age in ages:
        t = now - int(age) * DAY_MICROS - int(rng.integers(0, 3600)) * 10**6
        kind = rng.choice(["trace", "power"])
        if kind == "trace":
            persist(tmp_path, {"trace": random_packets(rng, 5, t0=t, span_us=1000)})
        else:
            persist(tmp_path, {"power": _power(t, 3)})
    before = read_manifest(tmp_path)

    now_dt = datetime.fromtimestamp(now / 1e6, tz=timezone.utc)

    def limit(kind):
        if kind == "trace":
            return now_dt.timestamp() - 7 * 86400
        months = {"indicators": 2, "power": 4}[kind]
        return subtract_months(now_dt, months).timestamp()

    expected = {e.path for e in before if e.end_ts / 1e6 >= limit(e.kind)}
    report = prune(tmp_path, policy, now)
    assert {e.path for e in read_manifest(tmp_path)} == expected
    assert {e.path for e in report.removed} == {e.path for e in before} - expected
    for e in report.removed:
        assert not (tmp_path / e.path).exists()
    # idempotent at a fixed reference time
    assert prune(tmp_path, policy, now).removed == []


def test_retention_invariant():
    RetentionPolicy(28, 1, 1)
    with pytest.raises(ValueError):
        RetentionPolicy(29, 1, 1)
    with pytest.raises(ValueError):
        RetentionPolicy(-1, 1, 1)


def test_calendar_month_subtraction():
    d = datetime(2024, 3, 31, 12, tzinfo=timezone.utc)
    assert subtract_months(d, 1) == datetime(2024, 2, 29, 12, tzinfo=timezone.utc)
    assert subtract_months(d, 14) == datetime(2023, 1, 31, 12, tzinfo=timezone.utc)
    cut = retention_cutoffs(RetentionPolicy(7, 6, 6), int(d.timestamp() * 1e6))
    assert cut["trace"] == int(d.timestamp() * 1e6) - 7 * DAY_MICROS
    assert cut["power"] == int(datetime(2023, 9, 30, 12, tzinfo=timezone.utc).timestamp() * 1e6)
