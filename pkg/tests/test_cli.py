import csv
import filecmp
import io
import json
import os

import numpy as np
import pytest

from dcmon import cli, pipeline, synthgen
from dcmon.power_ingest import PowerSample, write_power_log
from dcmon.store import read_manifest
from dcmon.trace_ingest import read_packets_csv

MICROS = 1_000_000


@pytest.fixture(scope="module")
def scenario(tmp_path_factory):
    seg = synthgen.Segment(1800, synthgen.Mode.CPU_AND_NETWORK, 0.9, 10.0, 1630.0, 0.1)
    spec = synthgen.ScenarioSpec(1800, (seg,), seed=7)
    out = tmp_path_factory.mktemp("scenario")
    paths = synthgen.generate(spec).write(out)
    paths["dir"] = str(out)
    return paths


def _run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["merge", "--no-such-flag", "x.pcap"])
    assert info.value.code == 1
    assert "usage:" in capsys.readouterr().err


def test_missing_input_is_usage_error(capsys, tmp_path):
    code, _, err = _run(["correlate", "--indicators", tmp_path / "nope.csv", "--power", tmp_path / "p.csv"], capsys)
    assert code == 1 and "no such file" in err


def test_malformed_data_is_data_error(capsys, tmp_path, scenario):
    bad = tmp_path / "bad.csv"
    bad.write_text("not,a,power,log\n")
    ind = tmp_path / "ind.csv"
    assert _run(["indicators", scenario["dir"], "--out", ind], capsys)[0] == 0
    code, _, err = _run(["correlate", "--indicators", ind, "--power", bad], capsys)
    assert code == 2
    assert "power_ingest: MalformedRow" in err


def test_merge_matches_library(capsys, tmp_path, scenario):
    out = tmp_path / "merged.csv"
    assert _run(["merge", *scenario["pcaps"], "--out", out], capsys)[0] == 0
    with open(out, newline="") as f:
        merged = read_packets_csv(f)
    assert np.array_equal(merged, pipeline.load_stream(scenario["pcaps"]))


def test_stdout_is_default_output(capsys, scenario):
    code, out, _ = _run(["graph", scenario["dir"], "--top-k", "2"], capsys)
    assert code == 0 and out.splitlines()[0] == "scope,score,pinned"


def test_offsets_must_match_inputs(capsys, scenario):
    code, _, err = _run(["merge", *scenario["pcaps"], "--offset-us", "5"], capsys)
    assert code == 1 and "--offset-us" in err


def test_constant_power_warns_and_succeeds(capsys, tmp_path, scenario):
    ind = tmp_path / "ind.csv"
    _run(["indicators", scenario["dir"], "--out", ind], capsys)
    t0 = 1_700_000_000 * MICROS
    flat = tmp_path / "flat.csv"
    write_power_log([PowerSample(t0 + k * 10 * MICROS, 1600.0, 300.0, 10.6) for k in range(1, 181)], flat)
    code, out, err = _run(["correlate", "--indicators", ind, "--power", flat], capsys)
    assert code == 0 and "Undefined" in err
    rows = list(csv.DictReader(io.StringIO(out)))
    assert rows and all(r["class"] == "Undefined" for r in rows)


def test_staged_pipeline_matches_report(capsys, tmp_path, scenario):
    ind, corr, series, events = (tmp_path / n for n in ("ind.csv", "corr.csv", "series.csv", "events.csv"))
    assert _run(["indicators", scenario["dir"], "--out", ind], capsys)[0] == 0
    assert _run(["correlate", "--indicators", ind, "--power", scenario["power"], "--out", corr,
                 "--series-out", series], capsys)[0] == 0
    assert _run(["detect", corr, "--series", series, "--power", scenario["power"], "--out", events], capsys)[0] == 0
    report = tmp_path / "report"
    code, out, _ = _run(["report", scenario["dir"], "--power", scenario["power"], "--out-dir", report], capsys)
    assert code == 0
    assert filecmp.cmp(events, report / "events.csv", shallow=False)
    assert filecmp.cmp(corr, report / "correlation.csv", shallow=False)
    assert out == (report / "events.csv").read_text()
    header = (report / "triptych.csv").read_text().splitlines()[0]
    assert header == "ts_micros,apparent_va_smoothed,traffic_pps_smoothed,rho,class"


def test_report_is_reproducible(capsys, tmp_path, scenario):
    for name in ("a", "b"):
        _run(["report", scenario["dir"], "--power", scenario["power"], "--out-dir", tmp_path / name], capsys)
    for name in os.listdir(tmp_path / "a"):
        assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False)


def test_report_persists_and_prune_removes(capsys, tmp_path, scenario):
    store = tmp_path / "store"
    args = ["--dataset-dir", store, "report", scenario["dir"], "--power", scenario["power"], "--out-dir", tmp_path / "r"]
    assert _run(args, capsys)[0] == 0
    assert {e.kind for e in read_manifest(store)} == {"trace", "indicators", "power"}
    code, out, _ = _run(["--dataset-dir", store, "prune", "--now", "2030-01-01T00:00:00"], capsys)
    assert code == 0 and len(out.splitlines()) == 4
    assert read_manifest(store) == []


def test_prune_requires_dataset_dir(capsys):
    assert _run(["prune"], capsys)[0] == 1


def test_generate_preset_and_seed(capsys, tmp_path):
    code, out, _ = _run(["generate", "--preset", "three-regime", "--seed", "3", "--out-dir", tmp_path], capsys)
    assert code == 0
    paths = json.loads(out)
    assert len(paths["pcaps"]) == 4
    truth = json.loads((tmp_path / "truth.json").read_text())
    assert [s["target_rho"] for s in truth["segments"]] == [0.9, -0.9, 0.9]


def test_generate_needs_one_source(capsys, tmp_path):
    assert _run(["generate", "--out-dir", tmp_path], capsys)[0] == 1


def test_indicators_with_scopes_and_rnci(capsys, tmp_path, scenario):
    out = tmp_path / "ind.csv"
    code, _, _ = _run(["indicators", scenario["dir"], "--scope", "node:10.0.0.1", "--rnci-top-k", "2", "--out", out], capsys)
    assert code == 0
    scopes = {row[1] for row in csv.reader(out.read_text().splitlines()[2:])}
    assert "system" in scopes and "node:10.0.0.1" in scopes
    assert any(s.startswith("couple:") for s in scopes)
    assert _run(["indicators", scenario["dir"], "--scope", "planet:x"], capsys)[0] == 1
