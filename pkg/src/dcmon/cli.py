"""Command-line entry point.

Exit status is 0 on success, 1 on a usage error (bad flags, missing input
files) and 2 when the input data itself is rejected. Results go to stdout
or ``--out``; diagnostics go to stderr.
"""

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import traceback
from dataclasses import replace
from datetime import datetime, timezone

from dcmon import correlation as corr
from dcmon import pipeline, store, synthgen, topology
from dcmon.errors import DcmonError
from dcmon.indicators import Scope, compute_tuples, read_indicators_csv, write_indicators_csv
from dcmon.power_ingest import parse_power_log, validate_cadence
from dcmon.trace_ingest import load_profile, write_packets_csv

log = logging.getLogger("dcmon")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def three_regime_spec(seed: int = 1) -> synthgen.ScenarioSpec:
    """Two and a half hours: +0.9, then -0.9, then +0.9, in equal thirds."""
    plan = [(synthgen.Mode.CPU_AND_NETWORK, 0.9), (synthgen.Mode.CPU_INTENSIVE, -0.9), (synthgen.Mode.CPU_AND_NETWORK, 0.9)]
    segments = tuple(synthgen.Segment(3000, mode, rho, 40.0, 1630.0, 0.1) for mode, rho in plan)
    return synthgen.ScenarioSpec(duration_s=9000, segments=segments, seed=seed)


PRESETS = {"three-regime": three_regime_spec}


def _settings(args) -> pipeline.AnalysisSettings:
    return pipeline.AnalysisSettings(
        window_s=args.window_s,
        cadence_s=args.cadence_s,
        strong=args.strong,
        moderate=args.moderate,
        min_run=getattr(args, "min_run", 5),
        min_alert_run=getattr(args, "min_alert_run", 36),
        decorrelation_band=getattr(args, "band", 0.3),
    )


@contextlib.contextmanager
def _output(path):
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w", newline="") as f:
            yield f


def _check_inputs(*paths):
    for p in paths:
        if p is not None and not os.path.isfile(p):
            raise UsageError(f"no such file: {p}")


def _expand_inputs(paths):
    """A single directory argument stands for the pcaps inside it."""
    if len(paths) == 1 and os.path.isdir(paths[0]):
        found = sorted(os.path.join(paths[0], n) for n in os.listdir(paths[0]) if n.endswith(".pcap"))
        if not found:
            raise UsageError(f"no .pcap files in {paths[0]}")
        return found
    _check_inputs(*paths)
    return list(paths)


def _offsets(args, n):
    if not args.offset_us:
        return None
    if len(args.offset_us) != n:
        raise UsageError(f"--offset-us given {len(args.offset_us)} times for {n} inputs")
    return args.offset_us


def _load_packets(args):
    paths = _expand_inputs(args.inputs)
    return pipeline.load_stream(paths, _offsets(args, len(paths)), args.dedup_window_us)


def _load_power(path, cadence_s):
    samples = parse_power_log(path)
    gaps = validate_cadence(samples, cadence_s)
    if gaps:
        log.warning("power log has %d cadence gaps (largest %.1f s)", len(gaps), max(g.gap_s for g in gaps))
    return samples


def _warn_if_undefined(points):
    if points and all(p.rho is None for p in points):
        log.warning("every window is Undefined: one of the series is constant or too sparse")


def cmd_merge(args):
    packets = _load_packets(args)
    with _output(args.out) as f:
        write_packets_csv(packets, f)
    log.info("merged %d records", len(packets))


def cmd_indicators(args):
    packets = _load_packets(args)
    profile = load_profile(args.profile)
    scopes = {Scope.system()}
    for label in args.scope or ():
        try:
            scopes.add(Scope.parse(label))
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    if args.rnci_top_k:
        report = topology.score_relevance(topology.build_graph(packets), profile, top_k=args.rnci_top_k)
        scopes.update(Scope.node(a) for a, _ in report.ranked_nodes)
        scopes.update(Scope.couple(a, b) for (a, b), _ in report.ranked_couples)
    table = compute_tuples(packets, profile, scopes)
    with _output(args.out) as f:
        write_indicators_csv(table, f)


def cmd_graph(args):
    packets = _load_packets(args)
    graph = topology.build_graph(packets)
    report = topology.score_relevance(graph, load_profile(args.profile), top_k=args.top_k)
    with _output(args.out) as f:
        topology.write_relevance_csv(report, f)
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        with open(os.path.join(args.out_dir, "nodes.csv"), "w", newline="") as f:
            topology.write_nodes_csv(graph, f)
        with open(os.path.join(args.out_dir, "edges.csv"), "w", newline="") as f:
            topology.write_edges_csv(graph, f)
        with open(os.path.join(args.out_dir, "graph.dot"), "w") as f:
            topology.write_dot(graph, f, report)


def cmd_correlate(args):
    _check_inputs(args.indicators, args.power)
    with open(args.indicators, newline="") as f:
        table = read_indicators_csv(f)
    power = _load_power(args.power, args.cadence_s)
    series, points = pipeline.correlate(table, power, _settings(args))
    _warn_if_undefined(points)
    with _output(args.out) as f:
        corr.write_correlation_csv(points, f)
    if args.series_out:
        with open(args.series_out, "w", newline="") as f:
            corr.write_series_csv(series, f)


def cmd_detect(args):
    _check_inputs(args.correlation, args.series, args.power)
    with open(args.correlation, newline="") as f:
        points = corr.read_correlation_csv(f, args.window_s)
    series = None
    if args.series:
        with open(args.series, newline="") as f:
            series = corr.read_series_csv(f, args.cadence_s)
    power = _load_power(args.power, args.cadence_s) if args.power else None
    events = pipeline.detect(points, _settings(args), series, power)
    with _output(args.out) as f:
        corr.write_events_csv(events, f)


def cmd_generate(args):
    if bool(args.config) == bool(args.preset):
        raise UsageError("give exactly one of --config or --preset")
    if args.config:
        _check_inputs(args.config)
        spec, faults = synthgen.load_config(args.config)
        if args.seed is not None:
            spec = replace(spec, seed=args.seed)
    else:
        spec, faults = PRESETS[args.preset](1 if args.seed is None else args.seed), []
    traces = synthgen.generate(spec)
    for fault in faults:
        traces = synthgen.inject(traces, fault)
    paths = traces.write(args.out_dir)
    with _output(args.out) as f:
        json.dump(paths, f, indent=1)
        f.write("\n")


def _parse_now(text):
    if text is None:
        return int(datetime.now(timezone.utc).timestamp() * 1_000_000)
    if text.lstrip("-").isdigit():
        return int(text)
    moment = datetime.fromisoformat(text)
    if moment.tzinfo is None:
        moment = moment.replace(tzinfo=timezone.utc)
    return int(moment.timestamp() * 1_000_000)


def cmd_prune(args):
    if not args.dataset_dir:
        raise UsageError("prune needs --dataset-dir")
    try:
        now = _parse_now(args.now)
        policy = store.RetentionPolicy(args.trace_days, args.indicator_months, args.power_months)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    report = store.prune(args.dataset_dir, policy, now)
    with _output(args.out) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["removed", "kind", "start_ts", "end_ts", "records"])
        for e in report.removed:
            w.writerow([e.path, e.kind, e.start_ts, e.end_ts, e.records])
    log.info("pruned %d entries, kept %d", len(report.removed), report.kept)


def write_triptych(analysis, f):
    """Smoothed power, smoothed traffic and the coefficient on one time axis."""
    w = csv.writer(f, lineterminator="\n")
    w.writerow(["ts_micros", "apparent_va_smoothed", "traffic_pps_smoothed", "rho", "class"])
    sm = analysis.smoothed
    for t, y, x, p in zip(sm.ts_micros.tolist(), sm.apparent_va.tolist(), sm.traffic_pps.tolist(), analysis.points):
        w.writerow([t, repr(y), repr(x), "" if p.rho is None else repr(p.rho), p.cls.value])


def cmd_report(args):
    _check_inputs(args.power)
    packets = _load_packets(args)
    power = _load_power(args.power, args.cadence_s)
    profile = load_profile(args.profile)
    analysis = pipeline.analyze(packets, power, profile, _settings(args))
    _warn_if_undefined(analysis.points)

    os.makedirs(args.out_dir, exist_ok=True)
    outputs = {
        "triptych.csv": lambda f: write_triptych(analysis, f),
        "events.csv": lambda f: corr.write_events_csv(analysis.events, f),
        "correlation.csv": lambda f: corr.write_correlation_csv(analysis.points, f),
        "series.csv": lambda f: corr.write_series_csv(analysis.series, f),
        "indicators.csv": lambda f: write_indicators_csv(analysis.table, f),
    }
    for name, write in outputs.items():
        with open(os.path.join(args.out_dir, name), "w", newline="") as f:
            write(f)
    if args.dataset_dir:
        store.persist(args.dataset_dir, {"trace": packets, "indicators": analysis.table, "power": power})
    with _output(args.out) as f:
        corr.write_events_csv(analysis.events, f)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dcmon", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more diagnostics (repeatable)")
    parser.add_argument("--dataset-dir", help="persistent store directory")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    common = _Parser(add_help=False)
    common.add_argument("--out", help="result file (default stdout)")
    common.add_argument("--profile", help="enclosure profile JSON")
    common.add_argument("--window-s", type=float, default=600)
    common.add_argument("--cadence-s", type=float, default=10)
    common.add_argument("--strong", type=float, default=corr.STRONG)
    common.add_argument("--moderate", type=float, default=corr.MODERATE)
    common.add_argument("--seed", type=int)

    stream = _Parser(add_help=False)
    stream.add_argument("inputs", nargs="+", help="probe pcaps (probe ids follow order), a directory of them, or one merged CSV")
    stream.add_argument("--offset-us", type=int, action="append", help="per-input clock offset, repeat once per input")
    stream.add_argument("--dedup-window-us", type=int, help="drop cross-probe duplicates within this window")

    p = sub.add_parser("merge", parents=[common, stream], help="merge probe captures into one ordered stream")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("indicators", parents=[common, stream], help="per-second indicator tuples")
    p.add_argument("--scope", action="append", help="system, node:IP or couple:IP|IP (repeatable)")
    p.add_argument("--rnci-top-k", type=int, help="also add the top-k relevant nodes and couples as scopes")
    p.set_defaults(func=cmd_indicators)

    p = sub.add_parser("graph", parents=[common, stream], help="communication graph and relevance ranking")
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--out-dir", help="also write nodes.csv, edges.csv and graph.dot here")
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("correlate", parents=[common], help="sliding-window traffic/power correlation")
    p.add_argument("--indicators", required=True)
    p.add_argument("--power", required=True)
    p.add_argument("--series-out", help="also write the aligned series")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("detect", parents=[common], help="regime periods and alerts from a correlation file")
    p.add_argument("correlation")
    p.add_argument("--series", help="aligned series, used to sharpen period boundaries")
    p.add_argument("--power", help="power log, enables power-factor decay alerts")
    p.add_argument("--min-run", type=int, default=5)
    p.add_argument("--min-alert-run", type=int, default=36)
    p.add_argument("--band", type=float, default=0.3)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("generate", parents=[common], help="synthetic traces with planted regimes")
    p.add_argument("--config", help="scenario JSON (segments and optional faults)")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("prune", parents=[common], help="apply retention to the dataset directory")
    p.add_argument("--now", help="reference time, epoch micros or ISO 8601 (default: current time)")
    p.add_argument("--trace-days", type=int, default=7)
    p.add_argument("--indicator-months", type=int, default=6)
    p.add_argument("--power-months", type=int, default=6)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("report", parents=[common, stream], help="end-to-end analysis with plot-ready CSVs")
    p.add_argument("--power", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--min-run", type=int, default=5)
    p.add_argument("--min-alert-run", type=int, default=36)
    p.add_argument("--band", type=float, default=0.3)
    p.set_defaults(func=cmd_report)
    return parser


def _origin(exc) -> str:
    """Name of the innermost package module the exception came from."""
    pkg_dir = os.path.dirname(os.path.abspath(__file__))
    name = "cli"
    for frame in traceback.extract_tb(exc.__traceback__):
        if os.path.dirname(os.path.abspath(frame.filename)) == pkg_dir:
            name = os.path.splitext(os.path.basename(frame.filename))[0]
    return name


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="dcmon: %(levelname)s: %(message)s", stream=sys.stderr, force=True)
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"dcmon {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DcmonError, ValueError, OSError) as exc:
        print(f"dcmon {args.command}: {_origin(exc)}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
