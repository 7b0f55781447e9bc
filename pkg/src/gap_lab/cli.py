"""Single entry point for every workflow in the lab.

Subcommands: keygen, simulate, serve-keys, upload, match, wormhole, profile,
feasibility, report. Batch commands are synchronous and deterministic given
``--seed`` (falling back to the GAP_LAB_SEED environment variable); server
commands run until interrupted or ``--duration`` elapses. Exit codes: 0 ok,
1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

from . import captures as captures_mod
from . import feasibility as feas
from . import keyserver as ks
from . import matcher as matcher_mod
from . import profiler as profiler_mod
from . import simulate as sim_mod
from . import wormhole as wh
from .ble import AirtimeModel, LinkBudget
from .crypto import INTERVALS_PER_DAY, generate_tek, interval_number

log = logging.getLogger("gap_lab.cli")


class _Parser(argparse.ArgumentParser):
    # usage problems exit 1; runtime failures exit 2 (mapped in main)
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("GAP_LAB_SEED")
    return int(env) if env else 0


def _print_config(args) -> None:
    config = {k: v for k, v in sorted(vars(args).items())
              if k != "func" and v is not None}
    print(f"config: {json.dumps(config, default=str)}", file=sys.stderr)


def _parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must be host:port, got {text!r}")
    return host, int(port)


# --- subcommand implementations ---------------------------------------------------

def cmd_keygen(args) -> int:
    import random

    rng = random.Random(_seed(args))
    first_day = interval_number(args.start) - interval_number(args.start) % INTERVALS_PER_DAY
    teks = [
        generate_tek(rng, first_day + d * INTERVALS_PER_DAY, args.risk_level)
        for d in range(args.days)
    ]
    bundle = ks.DiagnosisBundle(
        teks=tuple(teks),
        submitted_at=(first_day + args.days * INTERVALS_PER_DAY) * 600,
    )
    ks.write_bundles([bundle], args.out)
    print(f"wrote {len(teks)} TEKs to {args.out}")
    for tek in teks:
        print(f"  {tek.key.hex()} rolling_start={tek.rolling_start}")
    return 0


def _write_simulation(sim: sim_mod.SimulationResult, out_dir: str) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for station_id, records in sorted(sim.captures.items()):
        path = os.path.join(out_dir, f"{station_id}.captures")
        captures_mod.export_captures(records, path)
        written.append(path)

    bundles = [
        ks.DiagnosisBundle(teks=tuple(teks), submitted_at=sim.scenario.horizon[1])
        for _agent, teks in sorted(sim.diagnosed_teks().items())
    ]
    bundles_path = os.path.join(out_dir, "bundles.json")
    ks.write_bundles(bundles, bundles_path)
    written.append(bundles_path)

    truth = {
        "scenario": sim.scenario.name,
        "seed": sim.scenario.seed,
        "agents": {
            agent.id: {
                "diagnosed": agent.diagnosed,
                "itinerary": [
                    [v.station_id, v.arrive, v.depart] for v in agent.itinerary],
                "teks": [ks.tek_to_json(t) for t in sim.tek_registry[agent.id]],
            }
            for agent in sim.scenario.agents
        },
    }
    truth_path = os.path.join(out_dir, "ground_truth.json")
    with open(truth_path, "w", encoding="utf-8") as fh:
        json.dump(truth, fh, indent=2)
        fh.write("\n")
    written.append(truth_path)
    return written


def cmd_simulate(args) -> int:
    scenario = sim_mod.resolve_scenario(args.scenario)
    if args.seed is not None or os.environ.get("GAP_LAB_SEED"):
        scenario = scenario.with_seed(_seed(args))
    sim = sim_mod.run_scenario(scenario)
    written = _write_simulation(sim, args.out)
    total = sum(len(r) for r in sim.captures.values())
    print(f"scenario {scenario.name!r} seed {scenario.seed}: "
          f"{total} captures across {len(sim.captures)} stations")
    for path in written:
        print(f"  {path}")
    return 0


def cmd_serve_keys(args) -> int:
    signing_key = ks.init_signing_key(args.signing_key)
    server = ks.KeyServer(
        admin_credential=args.admin_token,
        store_path=args.store,
        signing_key=signing_key,
    )
    tcp = ks.serve(_parse_address(args.listen), server)
    host, port = tcp.server_address[:2]
    print(f"key server on {host}:{port}, store {args.store}, "
          f"public key {args.signing_key}.pub")
    try:
        if args.duration is not None:
            time.sleep(args.duration)
        else:
            while True:
                time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        tcp.shutdown()
    return 0


def cmd_upload(args) -> int:
    address = _parse_address(args.server)
    bundles = ks.load_bundles(args.bundle)
    tan = args.tan
    for bundle in bundles:
        if tan is None:
            if args.admin_token is None:
                raise ValueError("need --tan or --admin-token to authorize upload")
            tan = ks.issue_tan_remote(address, args.admin_token)
            print(f"issued TAN {tan}")
        count = ks.upload_remote(address, bundle, tan)
        print(f"uploaded bundle ({count} TEKs) with TAN {tan}")
        tan = None
    return 0


def _load_bundles_for(args) -> list[ks.DiagnosisBundle]:
    if args.bundles:
        return ks.load_bundles(args.bundles)
    if args.server:
        key_pem = None
        if args.server_key:
            with open(args.server_key, "rb") as fh:
                key_pem = fh.read()
        return ks.download_remote(_parse_address(args.server), since=0,
                                  public_key_pem=key_pem)
    raise ValueError("need --bundles FILE or --server ADDR")


def _load_capture_records(path: str) -> list:
    if os.path.isdir(path):
        return list(captures_mod.read_capture_dir(path))
    return captures_mod.read_captures(path)


def cmd_match(args) -> int:
    records = _load_capture_records(args.captures)
    store = matcher_mod.SightingStore.from_capture_records(records)
    teks = ks.bundle_teks(_load_bundles_for(args))
    windows = matcher_mod.match(store, teks, merge_gap_s=args.merge_gap)
    result = matcher_mod.score(windows)
    if args.out:
        matcher_mod.write_windows_csv(windows, args.out)
        print(f"wrote {args.out}")
    print(f"{len(store)} sightings, {len(teks)} TEKs: "
          f"{len(windows)} exposure windows, score {result.score:.2f}, "
          f"high risk {result.high_risk}")
    for w in windows:
        print(f"  {w.tek.key.hex()} {w.day} {w.first_match}..{w.last_match} "
              f"({w.duration_s}s, {w.matched_count} sightings, "
              f"attenuation {w.attenuation_db:.1f} dB)")
    return 0


def cmd_profile(args) -> int:
    records = _load_capture_records(args.captures)
    bundles = _load_bundles_for(args)
    report = profiler_mod.profile_captures(
        bundles, records,
        merge_gap_s=args.merge_gap, min_overlap_s=args.min_overlap)
    paths = profiler_mod.emit_report(report, args.out)
    print(f"profiled {len(report.timelines)} subjects from "
          f"{len(records)} capture records")
    for subject in report.subjects():
        stations = " -> ".join(report.routes[subject])
        print(f"  {subject.id} [{subject.day}]: {stations}")
    for edge in report.edges:
        print(f"  co-location {edge.subject_a.id} ~ {edge.subject_b.id} "
              f"at {sorted(edge.stations)} ({edge.overlap_s}s)")
    for path in paths:
        print(f"  {path}")
    return 0


def cmd_wormhole(args) -> int:
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s %(name)s %(message)s",
        stream=sys.stderr,
    )
    if args.wormhole_cmd == "broker":
        broker = wh.Broker()
        host, port = broker.start(*_parse_address(args.listen))
        print(f"wormhole broker on {host}:{port}")
        try:
            if args.duration is not None:
                time.sleep(args.duration)
            else:
                while True:
                    time.sleep(3600)
        except KeyboardInterrupt:
            pass
        finally:
            broker.stop()
        return 0

    # node
    config = wh.NodeConfig(
        node_id=args.node_id,
        broker=_parse_address(args.broker),
        role=args.role,
        replay_cadence_s=args.cadence,
        replay_window_s=args.window,
    )
    link = wh.BrokerLink(config.broker, config.node_id)
    try:
        if config.sniffs:
            if not args.source:
                raise ValueError("sniffer role needs --source CAPTURE_FILE")
            records = captures_mod.read_captures(args.source)
            frames = (
                (rec.timestamp, wh.encode_advertisement(
                    wh.Advertisement(rec.rpi, rec.aem)))
                for rec in records
            )
            published = 0
            for message in wh.sniff_messages(config.node_id, frames,
                                             config.replay_window_s):
                link.publish(message)
                published += 1
            print(f"{config.node_id}: published {published} messages")
        if config.rebroadcasts:
            if args.expect:
                link.wait_for(args.expect, timeout=args.duration or 30.0)
            elif args.duration:
                time.sleep(args.duration)
            emissions = []
            for message in list(link.received):
                for t, _frame in wh.rebroadcast_frames(
                        message, message.captured_at, config.replay_cadence_s):
                    emissions.append(captures_mod.CaptureRecord(
                        station_id=config.node_id, timestamp=int(t),
                        rpi=message.rpi, aem=message.aem, rssi=-60))
            emissions.sort(key=lambda r: (r.timestamp, r.rpi))
            if args.emit:
                captures_mod.export_captures(emissions, args.emit)
                print(f"{config.node_id}: wrote {len(emissions)} emissions "
                      f"to {args.emit}")
            else:
                print(f"{config.node_id}: computed {len(emissions)} emissions")
    finally:
        link.close()
    return 0


def cmd_feasibility(args) -> int:
    chain = _feasibility_chain(args)
    if args.json:
        print(json.dumps({label: value for label, value in chain}, indent=2))
    else:
        width = max(len(label) for label, _ in chain)
        for label, value in chain:
            print(f"{label.ljust(width)}  {value}")
    return 0


def _feasibility_chain(args) -> list[tuple[str, str]]:
    calc = args.calc
    if calc == "collection-rate":
        return feas.chain_collection(args.count, feas.parse_duration(args.duration))
    if calc == "rpis-per-positive":
        p = feas.EpidemicParams(incidence_per_100k_week=args.incidence)
        return [
            ("incidence per 100k/week", feas.fmt(p.incidence_per_100k_week, 2)),
            ("RPIs per positive", feas.fmt(feas.rpis_per_positive(p), 1)),
        ]
    if calc == "wormhole-devices":
        p = feas.EpidemicParams(incidence_per_100k_week=args.incidence)
        c = feas.CollectionParams(
            unique_rpis_per_min=args.rate,
            avg_rpi_validity_min=args.validity_min,
        )
        return feas.chain_wormhole_devices(p, c)
    if calc == "test-center":
        p = feas.EpidemicParams(
            incidence_per_100k_week=1,
            positive_test_rate=args.positive_rate,
            upload_share=args.upload_share,
        )
        return feas.chain_screening_center(p, args.tests_per_hour)
    if calc == "replay-exposures":
        return feas.chain_replay(args.uploads_per_hour, args.window_min)
    if calc == "targeted-reach":
        return feas.chain_targeted(args.rate, args.hours_per_day, args.days)
    if calc == "coverage":
        return feas.chain_coverage()
    if calc == "airtime":
        model = AirtimeModel(phy_rate=args.phy_rate,
                             inter_frame_space_us=args.ifs_us)
        budget = LinkBudget(rx_fraction=args.rx_fraction)
        return feas.chain_airtime(model, budget)
    raise ValueError(f"unknown calculator {calc!r}")


def cmd_report(args) -> int:
    scenario = sim_mod.resolve_scenario(args.scenario)
    if args.seed is not None or os.environ.get("GAP_LAB_SEED"):
        scenario = scenario.with_seed(_seed(args))
    sim = sim_mod.run_scenario(scenario)
    caps_dir = os.path.join(args.out, "captures")
    _write_simulation(sim, caps_dir)

    bundles = ks.load_bundles(os.path.join(caps_dir, "bundles.json"))
    records = list(captures_mod.read_capture_dir(caps_dir))
    report = profiler_mod.profile_captures(bundles, records)
    report_dir = os.path.join(args.out, "report")
    paths = profiler_mod.emit_report(report, report_dir)

    print(f"scenario {scenario.name!r} seed {scenario.seed}: "
          f"{len(records)} captures, {len(report.timelines)} profiled subjects")
    for subject in report.subjects():
        print(f"  {subject.id} [{subject.day}]: "
              + " -> ".join(report.routes[subject]))
    for path in paths:
        print(f"  {path}")
    return 0


# --- parser construction -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="gap-lab",
        description=__doc__,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
        epilog="GAP_LAB_SEED serves as the fallback for every --seed flag.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("keygen", help="generate daily TEKs into a bundle file")
    p.add_argument("--days", type=int, default=1)
    p.add_argument("--start", type=int, default=sim_mod.DAY_UTC_20200707,
                   help="unix seconds of the first key's day")
    p.add_argument("--risk-level", type=int, default=0)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("simulate", help="run a scenario and write capture logs")
    p.add_argument("--scenario", required=True,
                   help="scenario file or builtin name (fig5, two-site, commuter)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("serve-keys", help="run the diagnosis key server")
    p.add_argument("--listen", default="127.0.0.1:7474")
    p.add_argument("--store", required=True, help="append-only event log path")
    p.add_argument("--signing-key", required=True,
                   help="Ed25519 private key path (created at first boot)")
    p.add_argument("--admin-token", default="hotline",
                   help="credential required to issue TANs")
    p.add_argument("--duration", type=float, default=None,
                   help="serve this many seconds, then exit (default: forever)")
    p.set_defaults(func=cmd_serve_keys)

    p = sub.add_parser("upload", help="upload a diagnosis bundle with a TAN")
    p.add_argument("--server", required=True, help="host:port")
    p.add_argument("--bundle", required=True, help="bundle JSON path")
    p.add_argument("--tan", default=None)
    p.add_argument("--admin-token", default=None,
                   help="issue a fresh TAN with this credential first")
    p.set_defaults(func=cmd_upload)

    p = sub.add_parser("match", help="run the exposure matcher over capture logs")
    p.add_argument("--captures", required=True, help="capture file or directory")
    p.add_argument("--bundles", default=None, help="bundle JSON path")
    p.add_argument("--server", default=None, help="download bundles from host:port")
    p.add_argument("--server-key", default=None,
                   help="server public key PEM for verification")
    p.add_argument("--merge-gap", type=int, default=matcher_mod.MERGE_GAP_S)
    p.add_argument("--out", default=None, help="windows CSV path")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("wormhole", help="relay attack nodes and broker")
    whsub = p.add_subparsers(dest="wormhole_cmd", required=True, metavar="ROLE")
    b = whsub.add_parser("broker", help="fan-out hub for wormhole nodes")
    b.add_argument("--listen", default="127.0.0.1:7575")
    b.add_argument("--duration", type=float, default=None)
    b.set_defaults(func=cmd_wormhole)
    n = whsub.add_parser("node", help="sniffer/rebroadcaster node")
    n.add_argument("--broker", required=True, help="host:port")
    n.add_argument("--node-id", required=True)
    n.add_argument("--role", choices=("sniffer", "rebroadcaster", "both"),
                   default="both")
    n.add_argument("--source", default=None,
                   help="capture log replayed as the local radio (sniffer)")
    n.add_argument("--emit", default=None,
                   help="write rebroadcast emissions to this capture log")
    n.add_argument("--cadence", type=float, default=wh.DEFAULT_CADENCE_S)
    n.add_argument("--window", type=float, default=wh.DEFAULT_REPLAY_WINDOW_S)
    n.add_argument("--expect", type=int, default=None,
                   help="rebroadcaster: wait for this many relayed messages")
    n.add_argument("--duration", type=float, default=None)
    n.set_defaults(func=cmd_wormhole)

    p = sub.add_parser("profile", help="attacker analytics over capture logs")
    p.add_argument("--bundles", default=None)
    p.add_argument("--server", default=None)
    p.add_argument("--server-key", default=None)
    p.add_argument("--captures", required=True)
    p.add_argument("--merge-gap", type=int, default=profiler_mod.MERGE_GAP_S)
    p.add_argument("--min-overlap", type=int, default=profiler_mod.MIN_OVERLAP_S)
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("feasibility", help="attack feasibility calculators")
    fsub = p.add_subparsers(dest="calc", required=True, metavar="CALC")
    f = fsub.add_parser("collection-rate")
    f.add_argument("--count", type=int, required=True)
    f.add_argument("--duration", required=True, help="mm:ss or hh:mm:ss")
    f = fsub.add_parser("rpis-per-positive")
    f.add_argument("--incidence", type=float, required=True)
    f = fsub.add_parser("wormhole-devices")
    f.add_argument("--incidence", type=float, required=True)
    f.add_argument("--rate", type=float, required=True)
    f.add_argument("--validity-min", type=float, default=5)
    f = fsub.add_parser("test-center")
    f.add_argument("--tests-per-hour", type=float, required=True)
    f.add_argument("--positive-rate", type=float, required=True)
    f.add_argument("--upload-share", type=float, required=True)
    f = fsub.add_parser("replay-exposures")
    f.add_argument("--uploads-per-hour", type=float, required=True)
    f.add_argument("--window-min", type=float, default=120)
    f = fsub.add_parser("targeted-reach")
    f.add_argument("--rate", type=float, required=True)
    f.add_argument("--hours-per-day", type=int, default=12)
    f.add_argument("--days", type=int, default=14)
    fsub.add_parser("coverage")
    f = fsub.add_parser("airtime")
    f.add_argument("--phy-rate", type=int, default=1_000_000)
    f.add_argument("--ifs-us", type=int, default=150)
    f.add_argument("--rx-fraction", type=float, default=0.043)
    for name, sp in fsub.choices.items():
        sp.add_argument("--json", action="store_true",
                        help="machine-readable output")
        sp.set_defaults(func=cmd_feasibility)

    p = sub.add_parser("report", help="simulate, profile, and emit all artifacts")
    p.add_argument("--scenario", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _print_config(args)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # runtime errors map to exit code 2
        print(f"gap-lab: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
