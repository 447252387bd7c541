"""End-to-end runs of the command line entry points.

Serve-style commands are exercised in a worker thread with --duration so the
test can drive traffic at them from the main thread; signal handling is
skipped off the main thread by design.
"""

import json
import socket
import threading
import time

import pytest

from cwmpkit import cli, refacs
from cwmpkit.codec import DeviceId
from cwmpkit.device import default_profile
from cwmpkit.honeyclient import Honeyclient
from cwmpkit.recordlog import FramedLogWriter, TransactionRecord, read_log
from cwmpkit.topology import load_manifest

PROBE_USER = "user-PRB0000001"
PROBE_PASS = "pw-PRB0000001"


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def bench_server(preset="secure"):
    policy = refacs.load_policy(preset)
    registry, plans = refacs.standard_bench(policy)
    return refacs.AcsServer(policy, registry, plans).start()


def run_cli(argv):
    return cli.main(list(argv))


class CliThread(threading.Thread):
    """Run a blocking CLI command off the main thread, capture its exit code."""

    def __init__(self, argv):
        super().__init__(daemon=True)
        self.argv = list(argv)
        self.code = None

    def run(self):
        self.code = cli.main(self.argv)


def wait_for_port(port, timeout=5.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        try:
            with socket.create_connection(("127.0.0.1", port), timeout=0.2):
                return
        except OSError:
            time.sleep(0.05)
    raise AssertionError(f"nothing listening on {port}")


def sample_records(n=3, sensor_id="cli-test", redacted=True):
    records = []
    for i in range(n):
        records.append(
            TransactionRecord(
                record_id=f"{sensor_id}-{i:08d}",
                timestamp=1700000000.0 + i,
                flow="127.0.0.1->127.0.0.1:7547",
                direction="client-to-acs" if i % 2 == 0 else "acs-to-client",
                command="Inform" if i == 0 else "GetParameterValues",
                events=("2 PERIODIC",) if i == 0 else (),
                http={"method": "POST", "status": 200},
                body=b"<soapenv:Envelope/>",
                notes=("suspicion: demo",) if i == 2 else (),
                redacted=redacted,
            )
        )
    return records


def write_store(path, records):
    writer = FramedLogWriter(str(path))
    for record in records:
        writer.append(record)
    writer.close()


class TestArgumentValidation:
    def test_no_arguments_is_usage_error(self):
        with pytest.raises(SystemExit):
            run_cli([])

    def test_unknown_subcommand_is_usage_error(self):
        with pytest.raises(SystemExit):
            run_cli(["frobnicate"])

    def test_client_run_without_server_url(self, tmp_path):
        from cwmpkit.device import save_profile

        profile = default_profile()
        profile.acs_url = ""
        path = tmp_path / "blank.profile"
        save_profile(profile, str(path))
        with pytest.raises(SystemExit, match="no server URL"):
            run_cli(["client", "run", "--profile", str(path)])

    def test_tls_cert_without_key_rejected(self):
        with pytest.raises(SystemExit, match="go together"):
            run_cli(
                ["acs", "serve", "--tls-cert", "/tmp/x.crt", "--duration", "0.1"]
            )

    def test_bad_policy_file_is_config_error(self, tmp_path):
        bad = tmp_path / "policy.conf"
        bad.write_text("[nothing]\n")
        code = run_cli(["acs", "serve", "--policy", str(bad), "--duration", "0.1"])
        assert code == 2

    def test_sensor_collector_needs_token(self, tmp_path):
        with pytest.raises(SystemExit, match="--token"):
            run_cli(
                [
                    "sensor", "run",
                    "--upstream", "http://127.0.0.1:1/acs",
                    "--store", str(tmp_path / "s.log"),
                    "--collector", "https://127.0.0.1:2",
                    "--duration", "0.1",
                ]
            )


class TestClientRun:
    def test_sessions_against_live_server(self, capsys):
        server = bench_server()
        try:
            code = run_cli(
                [
                    "client", "run",
                    "--acs", server.url,
                    "--username", PROBE_USER,
                    "--password", PROBE_PASS,
                    "--serial", "PRB0000001",
                    "--sessions", "2",
                ]
            )
        finally:
            server.stop()
        out = capsys.readouterr().out
        assert code == 0
        assert "session 1 [PRB0000001] reason=boot ok" in out
        assert "session 2 [PRB0000001] reason=periodic ok" in out

    def test_failed_session_exits_nonzero(self, capsys):
        server = bench_server()
        try:
            code = run_cli(
                [
                    "client", "run",
                    "--acs", server.url,
                    "--username", PROBE_USER,
                    "--password", "wrong",
                    "--serial", "PRB0000001",
                ]
            )
        finally:
            server.stop()
        assert code == 1
        assert "failed" in capsys.readouterr().out

    def test_explicit_reason_carried(self, capsys):
        server = bench_server()
        try:
            code = run_cli(
                [
                    "client", "run",
                    "--acs", server.url,
                    "--username", PROBE_USER,
                    "--password", PROBE_PASS,
                    "--serial", "PRB0000001",
                    "--reason", "value-change",
                ]
            )
        finally:
            server.stop()
        assert code == 0
        assert "reason=value-change" in capsys.readouterr().out


class TestProbeCommand:
    def test_refuses_without_authorization_claim(self, capsys):
        code = run_cli(["probe", "http://127.0.0.1:1/acs"])
        assert code == 3
        assert "refusing" in capsys.readouterr().err

    def test_findings_on_permissive_server(self, capsys):
        server = bench_server("appendixC-P1")
        try:
            code = run_cli(
                [
                    "probe", server.url,
                    "--checks", "P1",
                    "--no-posture",
                    "--i-am-authorized",
                ]
            )
        finally:
            server.stop()
        assert code == 2
        assert "POSITIVE" in capsys.readouterr().out

    def test_clean_on_hardened_server(self, capsys):
        server = bench_server("secure")
        try:
            code = run_cli(
                [
                    "probe", server.url,
                    "--username", PROBE_USER,
                    "--password", PROBE_PASS,
                    "--checks", "P1",
                    "--no-posture",
                    "--i-am-authorized",
                ]
            )
        finally:
            server.stop()
        assert code == 0
        assert "NEGATIVE" in capsys.readouterr().out

    def test_json_output_parses(self, capsys):
        server = bench_server("appendixC-P1")
        try:
            code = run_cli(
                [
                    "probe", server.url,
                    "--checks", "P1",
                    "--no-posture",
                    "--json",
                    "--i-am-authorized",
                ]
            )
        finally:
            server.stop()
        assert code == 2
        lines = [l for l in capsys.readouterr().out.splitlines() if l.strip()]
        assert lines
        for line in lines:
            finding = json.loads(line)
            assert finding["check"]

    def test_unreachable_target_is_connection_error(self, capsys):
        code = run_cli(
            ["probe", "http://127.0.0.1:9/acs", "--checks", "P1",
             "--no-posture", "--i-am-authorized", "--timeout", "0.5"]
        )
        assert code == 1
        assert "ERROR" in capsys.readouterr().out


class TestExportCommands:
    def test_sensor_export_summary(self, tmp_path, capsys):
        store = tmp_path / "sensor.log"
        write_store(store, sample_records())
        code = run_cli(["sensor", "export", "--store", str(store)])
        out = capsys.readouterr().out
        assert code == 0
        assert "cli-test-00000000" in out
        assert "Inform" in out
        assert "notes=1" in out

    def test_sensor_export_json_lines(self, tmp_path, capsys):
        store = tmp_path / "sensor.log"
        write_store(store, sample_records())
        code = run_cli(["sensor", "export", "--store", str(store), "--json"])
        out = capsys.readouterr().out
        assert code == 0
        rows = [json.loads(line) for line in out.splitlines() if line.strip()]
        assert [r["record_id"] for r in rows] == [
            "cli-test-00000000", "cli-test-00000001", "cli-test-00000002"
        ]

    def test_sensor_export_damaged_store(self, tmp_path, capsys):
        store = tmp_path / "sensor.log"
        write_store(store, sample_records())
        with open(store, "ab") as fh:
            fh.write(b"\x00garbage")
        code = run_cli(["sensor", "export", "--store", str(store)])
        captured = capsys.readouterr()
        assert code == 1
        assert "damaged" in captured.err
        assert "cli-test-00000002" in captured.out  # intact prefix still listed

    def test_collector_export_reads_store_dir(self, tmp_path, capsys):
        write_store(tmp_path / "branch.log", sample_records(sensor_id="branch"))
        code = run_cli(
            ["collector", "export", "--store-dir", str(tmp_path), "--sensor", "branch"]
        )
        assert code == 0
        assert "branch-00000001" in capsys.readouterr().out

    def test_missing_store_is_error(self, tmp_path, capsys):
        code = run_cli(["sensor", "export", "--store", str(tmp_path / "nope.log")])
        assert code == 2
        assert "error:" in capsys.readouterr().err


class TestServeCommands:
    def test_acs_serve_accepts_sessions(self):
        port = free_port()
        worker = CliThread(
            ["acs", "serve", "--policy", "secure", "--port", str(port),
             "--duration", "4"]
        )
        worker.start()
        wait_for_port(port)
        profile = default_profile()
        profile.acs_url = f"http://127.0.0.1:{port}/acs"
        profile.acs_username = PROBE_USER
        profile.acs_password = PROBE_PASS
        profile.device_id = DeviceId("cwmpkit-lab", "00040E", "LabGateway", "PRB0000001")
        profile.tls_mode = "no-verify"
        outcome = Honeyclient(profile).run_session("boot")
        worker.join(timeout=10)
        assert outcome.error == ""
        assert worker.code == 0

    def test_sensor_run_relays_and_ships(self, tmp_path):
        upstream = bench_server()
        collector_dir = tmp_path / "collector"
        collector_dir.mkdir()
        tokens = tmp_path / "tokens.conf"
        tokens.write_text("[tokens]\ncli-sensor: tok-cli-1\n")
        collector_port = free_port()
        collector_worker = CliThread(
            ["collector", "serve", "--store-dir", str(collector_dir),
             "--tokens", str(tokens), "--port", str(collector_port),
             "--allow-plain-http", "--duration", "7"]
        )
        collector_worker.start()
        wait_for_port(collector_port)

        sensor_port = free_port()
        store = tmp_path / "sensor.log"
        sensor_worker = CliThread(
            ["sensor", "run",
             "--port", str(sensor_port),
             "--upstream", upstream.url,
             "--store", str(store),
             "--sensor-id", "cli-sensor",
             "--collector", f"http://127.0.0.1:{collector_port}",
             "--token", "tok-cli-1",
             "--collector-tls-mode", "no-verify",
             "--upload-every", "0.3",
             "--duration", "4"]
        )
        sensor_worker.start()
        wait_for_port(sensor_port)

        profile = default_profile()
        profile.acs_url = f"http://127.0.0.1:{sensor_port}/acs"
        profile.acs_username = PROBE_USER
        profile.acs_password = PROBE_PASS
        profile.device_id = DeviceId("cwmpkit-lab", "00040E", "LabGateway", "PRB0000001")
        outcome = Honeyclient(profile).run_session("boot")
        assert outcome.error == ""

        sensor_worker.join(timeout=15)
        collector_worker.join(timeout=15)
        try:
            assert sensor_worker.code == 0
            assert collector_worker.code == 0
            local = read_log(str(store))
            assert local.intact and len(local.records) >= 2
            shipped = read_log(str(collector_dir / "cli-sensor.log"))
            assert shipped.intact
            assert {r.record_id for r in shipped.records} == {
                r.record_id for r in local.records
            }
        finally:
            upstream.stop()


class TestTopologyCli:
    def test_status_down_when_empty(self, tmp_path, capsys):
        code = run_cli(["topology", "status", "--root", str(tmp_path)])
        assert code == 0
        assert json.loads(capsys.readouterr().out)["state"] == "down"

    def test_down_with_nothing_up(self, tmp_path, capsys):
        code = run_cli(["topology", "down", "--root", str(tmp_path)])
        assert code == 0
        assert "nothing" in capsys.readouterr().out

    def test_up_holds_then_cleans(self, tmp_path, capsys):
        root = tmp_path / "lab"
        code = run_cli(
            ["topology", "up", "--root", str(root), "--clients", "1",
             "--no-sensor", "--no-collector", "--duration", "1.0"]
        )
        out = capsys.readouterr().out
        assert code == 0
        assert "lab up" in out
        assert "acs_url" in out
        assert "lab down" in out
        assert load_manifest(str(root)) is None

    def test_down_removes_stale_manifest(self, tmp_path, capsys):
        root = tmp_path / "lab"
        root.mkdir()
        (root / "manifest.json").write_text(
            json.dumps({"pid": 2**22 + 12345, "clients": {}})
        )
        code = run_cli(["topology", "down", "--root", str(root)])
        assert code == 0
        assert "stale" in capsys.readouterr().out
        assert load_manifest(str(root)) is None


class TestLoadCli:
    def test_tiny_run_writes_table_and_figure(self, tmp_path, capsys):
        out_dir = tmp_path / "out"
        code = run_cli(
            ["load", "--out", str(out_dir), "--clients", "1",
             "--sessions", "1", "--transports", "plain"]
        )
        captured = capsys.readouterr().out
        assert code == 0
        assert (out_dir / "load.tsv").exists()
        assert (out_dir / "load.png").read_bytes()[:4] == b"\x89PNG"
        assert "table:" in captured
        assert "plain" in captured
