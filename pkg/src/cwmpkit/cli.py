"""Command line front door.

One executable, one subcommand per role: emulated client, server, black-box
probe, in-path sensor, collector, the single-host lab, and the load runner.
Serve-style commands hold the foreground until SIGINT/SIGTERM; every one
takes ``--duration`` for scripted runs.

Exit codes: 0 success, 1 runtime failure, 2 bad usage or config.  The probe
is the exception and documents its own: 0 no findings, 2 findings present,
3 authorization not given.
"""

from __future__ import annotations

import argparse
import json
import os
import signal
import sys
import threading
import time

from . import probekit, refacs, report
from .codec import DeviceId
from .transport import TransportError
from .collector import Collector, load_tokens
from .device import default_profile, load_profile
from .honeyclient import ConnectionRequestServer, Honeyclient, HoneyclientShell
from .recordlog import read_log
from .sensor import BatchUploader, SensorConfig, SensorServer
from .topology import Topology, TopologyConfig, TopologyError
from .topology import load_manifest, manifest_path, pid_alive, status as topology_status


def _install_stop(stop: threading.Event) -> dict:
    """Route SIGINT/SIGTERM into ``stop``.  No-op off the main thread."""
    if threading.current_thread() is not threading.main_thread():
        return {}
    previous = {}
    for sig in (signal.SIGINT, signal.SIGTERM):
        previous[sig] = signal.signal(sig, lambda signum, frame: stop.set())
    return previous


def _restore(previous: dict) -> None:
    for sig, handler in previous.items():
        signal.signal(sig, handler)


def _hold(duration: float | None) -> None:
    """Block until a stop signal, or for ``duration`` seconds if given."""
    stop = threading.Event()
    previous = _install_stop(stop)
    try:
        stop.wait(duration)
    except KeyboardInterrupt:
        pass
    finally:
        _restore(previous)


def _tls_pair(args) -> tuple[str, str] | None:
    cert = getattr(args, "tls_cert", "")
    key = getattr(args, "tls_key", "")
    if bool(cert) != bool(key):
        raise SystemExit("--tls-cert and --tls-key go together")
    return (cert, key) if cert else None


def _client_profile(args):
    if args.profile:
        profile = load_profile(args.profile)
    else:
        profile = default_profile()
    if args.acs:
        profile.acs_url = args.acs
    if args.username:
        profile.acs_username = args.username
    if args.password:
        profile.acs_password = args.password
    if args.serial:
        profile.device_id = DeviceId(
            profile.device_id.manufacturer,
            profile.device_id.oui,
            profile.device_id.product_class,
            args.serial,
        )
    if args.tls_mode:
        profile.tls_mode = args.tls_mode
    if args.trust_roots:
        profile.tls_trust_roots = args.trust_roots
    if args.allow_basic:
        profile.allow_basic_over_plain_http = True
    if not profile.acs_url:
        raise SystemExit("no server URL; pass --acs or a profile that names one")
    return profile


def _outcome_line(serial: str, index: int, outcome) -> str:
    state = "ok" if not outcome.error else f"failed: {outcome.error}"
    commands = ", ".join(c.kind for c in outcome.commands) or "none"
    return (
        f"session {index} [{serial}] reason={outcome.reason} {state}; "
        f"served: {commands}"
    )


def cmd_client_run(args) -> int:
    profile = _client_profile(args)
    client = Honeyclient(profile)
    serial = profile.device_id.serial_number
    failures = 0
    for index in range(1, args.sessions + 1):
        reason = "boot" if index == 1 and args.reason == "auto" else (
            "periodic" if args.reason == "auto" else args.reason
        )
        outcome = client.run_session(reason)
        print(_outcome_line(serial, index, outcome))
        if outcome.error:
            failures += 1
            if args.retry_wait and index < args.sessions:
                time.sleep(min(outcome.retry_wait, args.retry_wait_cap))
        if index < args.sessions and args.interval > 0:
            time.sleep(args.interval)
    return 1 if failures else 0


def cmd_client_repl(args) -> int:
    profile = _client_profile(args)
    HoneyclientShell(Honeyclient(profile)).cmdloop()
    return 0


def cmd_client_cr_serve(args) -> int:
    profile = _client_profile(args)
    client = Honeyclient(profile)
    serial = profile.device_id.serial_number
    if args.cr_username:
        profile.cr.username = args.cr_username
    if args.cr_password:
        profile.cr.password = args.cr_password

    def on_trigger():
        outcome = client.run_session("connection-request")
        print(_outcome_line(serial, len(client.outcomes), outcome), flush=True)

    server = ConnectionRequestServer(
        profile.cr, on_trigger, host=args.listen_host, port=args.cr_port
    ).start()
    try:
        print(f"connection request endpoint on {server.url}", flush=True)
        _hold(args.duration)
    finally:
        server.stop()
    return 0


def cmd_acs_serve(args) -> int:
    policy = refacs.load_policy(args.policy)
    if args.registry:
        registry = refacs.load_registry(args.registry)
    else:
        registry, bench_plans = refacs.standard_bench(policy)
    if args.plans:
        plans = refacs.load_plans(args.plans)
    elif args.registry:
        plans = {}
    else:
        plans = bench_plans
    server = refacs.AcsServer(
        policy,
        registry,
        plans,
        host=args.host,
        port=args.port,
        tls=_tls_pair(args),
        transcript_path=args.transcript or None,
    ).start()
    try:
        print(f"policy {policy.name!r} serving on {server.url}", flush=True)
        _hold(args.duration)
    finally:
        server.stop()
    return 0


def cmd_probe(args) -> int:
    target = probekit.ProbeTarget(
        acs_url=args.url,
        username=args.username,
        password=args.password,
        serial=args.serial,
        victim_serial=args.victim_serial,
        timeout=args.timeout,
    )
    probe = probekit.AcsProbe(target, authorized=args.i_am_authorized)
    checks = args.checks.split(",") if args.checks else None
    try:
        findings = probe.run(checks, include_posture=not args.no_posture)
    except probekit.ProbeAuthorizationError as exc:
        print(f"refusing to probe: {exc}", file=sys.stderr)
        return 3
    except TransportError as exc:
        print(f"cannot reach {args.url}: {exc}", file=sys.stderr)
        return 1
    if args.json:
        print(probekit.render_jsonl(findings), end="")
    else:
        print(probekit.render_text(findings))
    matrix = probekit.verdict_matrix(findings)
    if any(v == "positive" for v in matrix.values()):
        return 2
    if any(v == "error" for v in matrix.values()):
        return 1
    return 0


def cmd_sensor_run(args) -> int:
    config = SensorConfig(
        listen_host=args.listen_host,
        listen_port=args.port,
        upstream_url=args.upstream,
        store_path=args.store,
        sensor_id=args.sensor_id,
        redact=not args.no_redact,
        anonymize=args.anonymize,
        guard=not args.no_guard,
        tls_cert=getattr(args, "tls_cert", ""),
        tls_key=getattr(args, "tls_key", ""),
        upstream_tls_mode=args.upstream_tls_mode,
    )
    _tls_pair(args)
    server = SensorServer(config).start()
    uploader = None
    if args.collector:
        if not args.token:
            raise SystemExit("--collector needs --token")
        uploader = BatchUploader(
            args.store,
            args.collector,
            args.token,
            sensor_id=args.sensor_id,
            tls_mode=args.collector_tls_mode,
            trust_roots=args.collector_trust_roots,
        )
    try:
        print(f"relaying {server.listen_url} -> {config.upstream_url}", flush=True)
        if uploader is None:
            _hold(args.duration)
        else:
            deadline = time.monotonic() + args.duration if args.duration else None
            stop = threading.Event()
            previous = _install_stop(stop)
            try:
                while not stop.is_set():
                    if deadline is not None and time.monotonic() >= deadline:
                        break
                    stop.wait(args.upload_every)
                    try:
                        sent = uploader.drain()
                        if sent:
                            print(f"shipped {sent} record(s)", flush=True)
                    except Exception as exc:
                        print(f"upload failed, will retry: {exc}", file=sys.stderr, flush=True)
                try:
                    uploader.drain()
                except Exception as exc:
                    print(f"final upload flush failed: {exc}", file=sys.stderr, flush=True)
            finally:
                _restore(previous)
    finally:
        server.stop()
    return 0


def _print_records(result, as_json: bool) -> int:
    for record in result.records:
        if as_json:
            print(record.to_json().decode("utf-8"))
        else:
            note = f" notes={len(record.notes)}" if record.notes else ""
            time_str = time.strftime("%H:%M:%S", time.localtime(record.timestamp))
            print(
                f"{record.record_id} {time_str} {record.direction:<13} "
                f"{record.command or '(empty)'}{note}"
            )
    if not result.intact:
        print(f"store damaged at byte {result.corrupt_at}: {result.error}", file=sys.stderr)
        return 1
    return 0


def cmd_sensor_export(args) -> int:
    if not os.path.exists(args.store):
        print(f"error: no record store at {args.store}", file=sys.stderr)
        return 2
    return _print_records(read_log(args.store), args.json)


def cmd_collector_serve(args) -> int:
    tokens = load_tokens(args.tokens)
    collector = Collector(
        args.store_dir,
        tokens,
        host=args.host,
        port=args.port,
        tls=_tls_pair(args),
        allow_plain_http=args.allow_plain_http,
    ).start()
    try:
        print(f"collector on {collector.url}, {len(tokens)} token(s)", flush=True)
        _hold(args.duration)
    finally:
        collector.stop()
    return 0


def cmd_collector_export(args) -> int:
    path = os.path.join(args.store_dir, f"{args.sensor}.log")
    if not os.path.exists(path):
        print(f"error: nothing stored for sensor {args.sensor!r}", file=sys.stderr)
        return 2
    return _print_records(read_log(path), args.json)


def cmd_topology_up(args) -> int:
    config = TopologyConfig(
        root_dir=args.root,
        preset=args.preset,
        clients=args.clients,
        with_sensor=not args.no_sensor,
        with_collector=not args.no_collector,
        acs_tls=args.acs_tls,
        inform_interval=args.inform_every,
    )
    topology = Topology(config)
    try:
        manifest = topology.up()
    except TopologyError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    try:
        print(f"lab up in {manifest['root_dir']}")
        for key in ("acs_url", "sensor_url", "collector_url"):
            if manifest[key]:
                print(f"  {key}: {manifest[key]}")
        print(f"  clients: {', '.join(manifest['clients'])}", flush=True)
        _hold(args.duration)
    finally:
        topology.down()
        print("lab down")
    return 0


def cmd_topology_down(args) -> int:
    manifest = load_manifest(args.root)
    if manifest is None:
        print("nothing is up")
        return 0
    pid = int(manifest.get("pid", -1))
    if not pid_alive(pid):
        os.unlink(manifest_path(args.root))
        print(f"removed stale manifest left by pid {pid}")
        return 0
    os.kill(pid, signal.SIGTERM)
    deadline = time.monotonic() + args.timeout
    while time.monotonic() < deadline:
        if load_manifest(args.root) is None:
            print(f"lab owned by pid {pid} shut down")
            return 0
        time.sleep(0.1)
    print(f"pid {pid} did not release the lab within {args.timeout}s", file=sys.stderr)
    return 1


def cmd_topology_status(args) -> int:
    print(json.dumps(topology_status(args.root), indent=2))
    return 0


def cmd_load(args) -> int:
    counts = tuple(int(c) for c in args.clients.split(","))
    transports = tuple(args.transports.split(","))
    tsv_path, png_path, points = report.run_and_report(
        args.out,
        client_counts=counts,
        transports=transports,
        preset=args.preset,
        sessions_per_client=args.sessions,
        progress=lambda text: print(text, flush=True),
    )
    failed = sum(p.failed for p in points)
    for point in points:
        print(
            f"{point.transport:<5} {point.clients:>3} client(s): "
            f"mean {point.mean_ms:.1f} ms, p95 {point.p95_ms:.1f} ms, "
            f"{point.ok}/{point.sessions} ok"
        )
    print(f"table: {tsv_path}")
    print(f"figure: {png_path}")
    return 1 if failed else 0


def _add_client_overrides(parser) -> None:
    parser.add_argument("--profile", default="", help="device profile file")
    parser.add_argument("--acs", default="", help="server URL")
    parser.add_argument("--username", default="", help="server account name")
    parser.add_argument("--password", default="", help="server account password")
    parser.add_argument("--serial", default="", help="override the serial number")
    parser.add_argument(
        "--tls-mode", default="", choices=["", "strict", "cn-exact", "no-verify"]
    )
    parser.add_argument("--trust-roots", default="", help="PEM bundle for TLS verification")
    parser.add_argument(
        "--allow-basic",
        action="store_true",
        help="permit Basic credentials over plain HTTP (off by default)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cwmpkit",
        description="TR-069/CWMP toolkit: emulated client, reference server, "
        "probe suite, in-path sensor, collector, lab, and load runner.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    client = sub.add_parser("client", help="emulated managed device")
    client_sub = client.add_subparsers(dest="subcommand", required=True)

    run = client_sub.add_parser("run", help="run provisioning sessions")
    _add_client_overrides(run)
    run.add_argument("--sessions", type=int, default=1, help="how many sessions")
    run.add_argument("--interval", type=float, default=0.0, help="pause between sessions")
    run.add_argument(
        "--reason",
        default="auto",
        choices=["auto", "boot", "periodic", "scheduled", "value-change", "connection-request"],
        help="auto: boot first, periodic after",
    )
    run.add_argument(
        "--retry-wait",
        action="store_true",
        help="honor the backoff window after a failed session",
    )
    run.add_argument("--retry-wait-cap", type=float, default=30.0)
    run.set_defaults(func=cmd_client_run)

    repl = client_sub.add_parser("repl", help="interactive console")
    _add_client_overrides(repl)
    repl.set_defaults(func=cmd_client_repl)

    cr = client_sub.add_parser("cr-serve", help="listen for connection requests")
    _add_client_overrides(cr)
    cr.add_argument("--listen-host", default="127.0.0.1")
    cr.add_argument("--cr-port", type=int, default=0, help="0 picks a free port")
    cr.add_argument("--cr-username", default="")
    cr.add_argument("--cr-password", default="")
    cr.add_argument("--duration", type=float, default=None, help="exit after this many seconds")
    cr.set_defaults(func=cmd_client_cr_serve)

    acs = sub.add_parser("acs", help="reference auto-configuration server")
    acs_sub = acs.add_subparsers(dest="subcommand", required=True)
    serve = acs_sub.add_parser("serve", help="serve sessions")
    serve.add_argument("--policy", default="secure", help="preset name or policy file")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=0)
    serve.add_argument("--registry", default="", help="device registry file")
    serve.add_argument("--plans", default="", help="command plan file")
    serve.add_argument("--tls-cert", default="")
    serve.add_argument("--tls-key", default="")
    serve.add_argument("--transcript", default="", help="framed transcript log path")
    serve.add_argument("--duration", type=float, default=None)
    serve.set_defaults(func=cmd_acs_serve)

    probe = sub.add_parser(
        "probe",
        help="black-box server checks",
        epilog="exit codes: 0 nothing found, 2 findings, 3 not authorized",
    )
    probe.add_argument("url", help="server URL to probe")
    probe.add_argument("--username", default="", help="enrolled account name")
    probe.add_argument("--password", default="")
    probe.add_argument("--serial", default=probekit.PROBE_SERIAL)
    probe.add_argument(
        "--victim-serial", default="", help="second enrolled serial for impersonation checks"
    )
    probe.add_argument("--checks", default="", help="comma list, e.g. P1,P4")
    probe.add_argument("--json", action="store_true", help="one JSON object per finding")
    probe.add_argument("--no-posture", action="store_true")
    probe.add_argument("--timeout", type=float, default=10.0)
    probe.add_argument(
        "--i-am-authorized",
        action="store_true",
        help="assert you have permission to probe this server",
    )
    probe.set_defaults(func=cmd_probe)

    sensor = sub.add_parser("sensor", help="in-path monitoring relay")
    sensor_sub = sensor.add_subparsers(dest="subcommand", required=True)
    srun = sensor_sub.add_parser("run", help="relay and record")
    srun.add_argument("--listen-host", default="127.0.0.1")
    srun.add_argument("--port", type=int, default=0)
    srun.add_argument("--upstream", required=True, help="server the relay forwards to")
    srun.add_argument("--store", required=True, help="record log path")
    srun.add_argument("--sensor-id", default="sensor")
    srun.add_argument("--no-redact", action="store_true", help="store secrets verbatim")
    srun.add_argument("--anonymize", action="store_true", help="store shapes, not payloads")
    srun.add_argument("--no-guard", action="store_true", help="let URL changes pass unrewritten")
    srun.add_argument("--tls-cert", default="", help="terminate TLS toward clients")
    srun.add_argument("--tls-key", default="")
    srun.add_argument(
        "--upstream-tls-mode", default="no-verify", choices=["strict", "cn-exact", "no-verify"]
    )
    srun.add_argument("--collector", default="", help="collector URL for uploads")
    srun.add_argument("--token", default="", help="bearer token for the collector")
    srun.add_argument("--upload-every", type=float, default=10.0)
    srun.add_argument(
        "--collector-tls-mode", default="strict", choices=["strict", "cn-exact", "no-verify"]
    )
    srun.add_argument("--collector-trust-roots", default="")
    srun.add_argument("--duration", type=float, default=None)
    srun.set_defaults(func=cmd_sensor_run)

    sexport = sensor_sub.add_parser("export", help="dump a record store")
    sexport.add_argument("--store", required=True)
    sexport.add_argument("--json", action="store_true", help="JSON lines instead of summary")
    sexport.set_defaults(func=cmd_sensor_export)

    collector = sub.add_parser("collector", help="upload sink for sensors")
    collector_sub = collector.add_subparsers(dest="subcommand", required=True)
    cserve = collector_sub.add_parser("serve", help="accept uploads")
    cserve.add_argument("--store-dir", required=True)
    cserve.add_argument("--tokens", required=True, help="token table file")
    cserve.add_argument("--host", default="127.0.0.1")
    cserve.add_argument("--port", type=int, default=0)
    cserve.add_argument("--tls-cert", default="")
    cserve.add_argument("--tls-key", default="")
    cserve.add_argument(
        "--allow-plain-http",
        action="store_true",
        help="serve without TLS (testing only)",
    )
    cserve.add_argument("--duration", type=float, default=None)
    cserve.set_defaults(func=cmd_collector_serve)

    cexport = collector_sub.add_parser("export", help="dump one sensor's stored records")
    cexport.add_argument("--store-dir", required=True)
    cexport.add_argument("--sensor", required=True)
    cexport.add_argument("--json", action="store_true")
    cexport.set_defaults(func=cmd_collector_export)

    topology = sub.add_parser("topology", help="single-host lab")
    topology_sub = topology.add_subparsers(dest="subcommand", required=True)
    tup = topology_sub.add_parser("up", help="stand the lab up and hold it")
    tup.add_argument("--root", required=True, help="lab state directory")
    tup.add_argument("--preset", default="secure")
    tup.add_argument("--clients", type=int, default=1)
    tup.add_argument("--no-sensor", action="store_true")
    tup.add_argument("--no-collector", action="store_true")
    tup.add_argument("--acs-tls", action="store_true")
    tup.add_argument(
        "--inform-every", type=float, default=0.0, help="drive a session round every S seconds"
    )
    tup.add_argument("--duration", type=float, default=None)
    tup.set_defaults(func=cmd_topology_up)

    tdown = topology_sub.add_parser("down", help="tear a lab down")
    tdown.add_argument("--root", required=True)
    tdown.add_argument("--timeout", type=float, default=10.0)
    tdown.set_defaults(func=cmd_topology_down)

    tstatus = topology_sub.add_parser("status", help="what the manifest says")
    tstatus.add_argument("--root", required=True)
    tstatus.set_defaults(func=cmd_topology_status)

    load = sub.add_parser("load", help="latency vs client count, table + figure")
    load.add_argument("--out", required=True, help="output directory")
    load.add_argument("--clients", default="1,5,10,20", help="comma list of counts")
    load.add_argument("--sessions", type=int, default=5, help="sessions per client")
    load.add_argument("--transports", default="plain,tls")
    load.add_argument("--preset", default="secure")
    load.set_defaults(func=cmd_load)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
