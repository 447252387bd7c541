"""Client emulation: device behavior across sessions, CR endpoint, console."""

import http.client
import io
import socket
import threading
import time

import pytest

from cwmpkit import codec, digest, refacs
from cwmpkit.device import ConnectionRequestConfig, default_profile
from cwmpkit.honeyclient import (
    ConnectionRequestServer,
    Honeyclient,
    HoneyclientShell,
    Misbehavior,
)


def fresh_client(acs_url, username="user-PRB0000001", password="pw-PRB0000001"):
    profile = default_profile()
    profile.acs_url = acs_url
    profile.acs_username = username
    profile.acs_password = password
    profile.device_id = codec.DeviceId("Acme", "00040E", "Gateway", "PRB0000001")
    profile.allow_basic_over_plain_http = False
    return Honeyclient(profile)


def make_acs(preset="secure", plans=None, registry=None, **kwargs):
    policy = refacs.load_policy(preset)
    policy.cr_after_session = kwargs.pop("cr_after_session", False)
    if registry is None or plans is None:
        registry, bench_plans = refacs.standard_bench(policy)
        plans = plans if plans is not None else bench_plans
    return refacs.AcsServer(policy, registry, plans, **kwargs)


class TestInformConstruction:
    def test_first_contact_bootstraps(self):
        client = fresh_client("http://127.0.0.1:1/acs")
        inform = client.build_inform("boot")
        codes = [e.code for e in inform.events]
        assert codes[0] == "0 BOOTSTRAP"
        assert "1 BOOT" in codes
        assert inform.max_envelopes == 1
        assert inform.device_id.serial_number == "PRB0000001"

    def test_inform_carries_configured_parameters(self):
        client = fresh_client("http://127.0.0.1:1/acs")
        inform = client.build_inform("periodic")
        paths = [p.path for p in inform.parameter_list]
        assert "InternetGatewayDevice.DeviceInfo.SoftwareVersion" in paths
        assert "InternetGatewayDevice.ManagementServer.ConnectionRequestURL" in paths

    def test_retry_count_rides_along(self):
        client = fresh_client("http://127.0.0.1:1/acs")
        client.retry_count = 3
        assert client.build_inform("periodic").retry_count == 3

    def test_bogus_event_toggle(self):
        client = fresh_client("http://127.0.0.1:1/acs")
        inform = client.build_inform("periodic", Misbehavior(bogus_event=True))
        assert "9 BOGUS" in [e.code for e in inform.events]


class TestCommandAnswers:
    def test_get_values(self):
        client = fresh_client("http://x/")
        reply = client.answer(
            codec.RpcEnvelope(
                id="1",
                body=codec.GetParameterValues(
                    names=("InternetGatewayDevice.DeviceInfo.SoftwareVersion",)
                ),
            )
        )
        assert reply.parameter_list[0].value == "29.04.88"

    def test_unknown_path_faults(self):
        client = fresh_client("http://x/")
        reply = client.answer(
            codec.RpcEnvelope(id="1", body=codec.GetParameterValues(names=("No.Such.Param",)))
        )
        assert isinstance(reply, codec.Fault)
        assert reply.code == 9005

    def test_set_nonwritable_faults_with_details(self):
        client = fresh_client("http://x/")
        reply = client.answer(
            codec.RpcEnvelope(
                id="1",
                body=codec.SetParameterValues(
                    parameter_list=(
                        codec.ParameterValue(
                            "InternetGatewayDevice.DeviceInfo.SoftwareVersion", "0.0.0"
                        ),
                    )
                ),
            )
        )
        assert isinstance(reply, codec.Fault)
        assert reply.code == 9003
        assert reply.details and reply.details[0].code == 9008

    def test_set_active_notification_param_queues_value_change(self):
        client = fresh_client("http://x/")
        tree = client.profile.tree
        active = [p for p, n in tree.leaves.items() if n.notification == 2 and n.writable]
        assert active, "profile needs an active writable leaf for this test"
        reply = client.answer(
            codec.RpcEnvelope(
                id="1",
                body=codec.SetParameterValues(
                    parameter_list=(codec.ParameterValue(active[0], "changed-value"),)
                ),
            )
        )
        assert isinstance(reply, codec.SetParameterValuesResponse)
        assert codec.EventEntry("4 VALUE CHANGE") in client.queued_events

    def test_add_then_delete_object(self):
        client = fresh_client("http://x/")
        reply = client.answer(
            codec.RpcEnvelope(
                id="1",
                body=codec.AddObject(
                    object_path="InternetGatewayDevice.Layer3Forwarding.Forwarding."
                ),
            )
        )
        assert isinstance(reply, codec.AddObjectResponse)
        instance = reply.instance_number
        path = f"InternetGatewayDevice.Layer3Forwarding.Forwarding.{instance}."
        reply = client.answer(codec.RpcEnvelope(id="2", body=codec.DeleteObject(object_path=path)))
        assert isinstance(reply, codec.DeleteObjectResponse)

    def test_reboot_queues_cause_events_for_next_session(self):
        client = fresh_client("http://x/")
        client.bootstrapped = True
        reply = client.answer(codec.RpcEnvelope(id="1", body=codec.Reboot(command_key="rb-1")))
        assert isinstance(reply, codec.RebootResponse)
        client._apply_post_session_effects()
        inform = client.build_inform("boot")
        codes = [e.code for e in inform.events]
        assert "M Reboot" in codes
        assert "1 BOOT" in codes
        keyed = [e for e in inform.events if e.code == "M Reboot"]
        assert keyed[0].command_key == "rb-1"

    def test_download_queues_transfer_complete(self):
        client = fresh_client("http://x/")
        reply = client.answer(
            codec.RpcEnvelope(
                id="1",
                body=codec.Download(command_key="fw-1", url="http://files.example/fw.img"),
            )
        )
        assert isinstance(reply, codec.DownloadResponse)
        assert reply.status == 1
        assert client.pending_transfers and client.pending_transfers[0].command_key == "fw-1"
        codes = [e.code for e in client.queued_events]
        assert "7 TRANSFER COMPLETE" in codes
        assert "M Download" in codes

    def test_unsupported_method_faults_9000(self):
        client = fresh_client("http://x/")
        reply = client.answer(
            codec.RpcEnvelope(id="1", body=codec.RawVendor(name="X_Unknown", raw=b"<X_Unknown/>"))
        )
        assert isinstance(reply, codec.Fault)
        assert reply.code == 9000

    def test_get_rpc_methods_lists_client_set(self):
        client = fresh_client("http://x/")
        reply = client.answer(codec.RpcEnvelope(id="1", body=codec.GetRPCMethods()))
        assert "SetParameterValues" in reply.methods
        assert "Inform" not in reply.methods


class TestLiveSessions:
    def test_full_session_applies_server_plan(self):
        with make_acs() as server:
            client = fresh_client(server.url)
            outcome = client.run_session("boot")
            assert outcome.error == ""
            assert outcome.informed
            kinds = [c.kind for c in outcome.commands]
            assert kinds == ["GetParameterValues", "SetParameterValues"]
            # the plan wrote through to the tree
            value = client.profile.tree.leaves[
                "InternetGatewayDevice.DeviceInfo.ProvisioningCode"
            ].value
            assert value == "prov-PRB0000001"

    def test_second_session_is_plain_periodic(self):
        with make_acs() as server:
            client = fresh_client(server.url)
            client.run_session("boot")
            outcome = client.run_session("periodic")
            assert outcome.error == ""
            sessions = server.sessions_for("PRB0000001")
            assert len(sessions) == 2
            second_codes = [e.code for e in sessions[-1].informs[0].events]
            assert second_codes == ["2 PERIODIC"]

    def test_failed_session_bumps_retry_and_keeps_events(self):
        client = fresh_client("http://127.0.0.1:9/acs")  # nothing listens there
        outcome = client.run_session("boot")
        assert outcome.error
        assert client.retry_count == 1
        assert 4.0 <= outcome.retry_wait <= 12.0
        assert not client.bootstrapped
        inform = client.build_inform("periodic")
        assert "0 BOOTSTRAP" in [e.code for e in inform.events]
        assert inform.retry_count == 1

    def test_server_url_rewrite_takes_effect_next_session(self):
        policy_b = refacs.load_policy("secure")
        policy_b.cr_after_session = False
        registry_b, _ = refacs.standard_bench(policy_b)
        with refacs.AcsServer(policy_b, registry_b, {}) as server_b:
            policy_a = refacs.load_policy("secure")
            policy_a.cr_after_session = False
            registry_a, _ = refacs.standard_bench(policy_a)
            plans_a = {
                "own-config": refacs.CommandPlan(
                    "own-config",
                    [
                        refacs.PlanStep(
                            codec.SetParameterValues(
                                parameter_list=(
                                    codec.ParameterValue(
                                        "InternetGatewayDevice.ManagementServer.URL",
                                        server_b.url,
                                    ),
                                ),
                                parameter_key="migrate",
                            )
                        )
                    ],
                )
            }
            with refacs.AcsServer(policy_a, registry_a, plans_a) as server_a:
                client = fresh_client(server_a.url)
                first = client.run_session("boot")
                assert first.error == ""
                assert client.next_acs_url == server_b.url
                second = client.run_session("periodic")
                assert second.error == ""
                assert second.transcript.acs_url == server_b.url
                # a fresh server relationship starts from scratch
                codes = [e.code for e in server_b.sessions_for("PRB0000001")[0].informs[0].events]
                assert "0 BOOTSTRAP" in codes

    def test_transfer_complete_delivered_next_session(self):
        policy = refacs.load_policy("secure")
        policy.cr_after_session = False
        registry, _ = refacs.standard_bench(policy)
        plans = {
            "own-config": refacs.CommandPlan(
                "own-config",
                [
                    refacs.PlanStep(
                        codec.Download(command_key="fw-9", url="http://files.example/fw.img")
                    )
                ],
            )
        }
        with refacs.AcsServer(policy, registry, plans) as server:
            client = fresh_client(server.url)
            client.run_session("boot")
            assert client.pending_transfers
            server.plans = {}  # the firmware push is a one-off
            outcome = client.run_session("periodic")
            assert outcome.error == ""
            assert not client.pending_transfers
            assert not client.queued_events
            sessions = server.sessions_for("PRB0000001")
            codes = [e.code for e in sessions[-1].informs[0].events]
            assert "7 TRANSFER COMPLETE" in codes
            assert "M Download" in codes
            bodies = b"".join(ex.request.body for ex in outcome.transcript.exchanges)
            assert b"TransferComplete" in bodies

    def test_misbehavior_leaves_marks_on_the_wire(self):
        with make_acs() as server:
            client = fresh_client(server.url)
            outcome = client.run_session(
                "boot", Misbehavior(skip_inform=True, wrong_id_echo=True)
            )
            assert outcome.informed
            first_body = outcome.transcript.exchanges[0].request.body
            assert b"GetRPCMethods" in first_body
            sessions = server.sessions_for("PRB0000001")
            assert any("response-id-mismatch" in s.flags for s in sessions)


class TestConnectionRequestServer:
    def make(self, **kwargs):
        config = ConnectionRequestConfig(
            enabled=True, port=0, path="/cr", username="cr-user", password="cr-pass"
        )
        triggered = threading.Event()
        server = ConnectionRequestServer(config, triggered.set, **kwargs)
        server.start()
        return server, triggered

    def _get(self, server, path="/cr", headers=None):
        conn = http.client.HTTPConnection(server.host, server.port, timeout=5)
        conn.request("GET", path, headers=headers or {})
        response = conn.getresponse()
        body = response.read()
        challenge = response.getheader("WWW-Authenticate")
        conn.close()
        return response.status, challenge, body

    def _authorized_header(self, server, challenge_value):
        challenge = digest.parse_challenge(challenge_value)
        return digest.build_authorization("cr-user", "cr-pass", "GET", "/cr", challenge)

    def test_digest_round_trip_triggers(self):
        server, triggered = self.make()
        try:
            status, challenge, _ = self._get(server)
            assert status == 401
            assert challenge.lower().startswith("digest")
            auth = self._authorized_header(server, challenge)
            status, _, body = self._get(server, headers={"Authorization": auth})
            assert status == 200
            assert body == b""  # trigger only; no commands ride along
            assert triggered.wait(2)
            assert server.triggers == 1
        finally:
            server.stop()

    def test_wrong_credentials_rejected(self):
        server, triggered = self.make()
        try:
            _, challenge, _ = self._get(server)
            parsed = digest.parse_challenge(challenge)
            bad = digest.build_authorization("cr-user", "wrong", "GET", "/cr", parsed)
            status, _, _ = self._get(server, headers={"Authorization": bad})
            assert status == 401
            assert not triggered.is_set()
        finally:
            server.stop()

    def test_nonce_single_use(self):
        server, triggered = self.make()
        try:
            _, challenge, _ = self._get(server)
            auth = self._authorized_header(server, challenge)
            first, _, _ = self._get(server, headers={"Authorization": auth})
            second, challenge2, _ = self._get(server, headers={"Authorization": auth})
            assert first == 200
            assert second == 401
            assert "stale=true" in challenge2.lower()
            assert server.triggers == 1
        finally:
            server.stop()

    def test_rate_limited_per_source(self):
        server, _ = self.make(rate_limit=3, rate_window=60.0)
        try:
            statuses = [self._get(server)[0] for _ in range(5)]
        finally:
            server.stop()
        assert statuses[:3] == [401, 401, 401]
        assert statuses[3:] == [503, 503]

    def test_tls_handshake_dropped(self):
        server, _ = self.make()
        try:
            sock = socket.create_connection((server.host, server.port), timeout=5)
            sock.sendall(b"\x16\x03\x01\x00\x05hello")
            sock.settimeout(5)
            data = sock.recv(64)
            sock.close()
            assert data == b""  # closed without an HTTP answer
            deadline = time.monotonic() + 2
            while time.monotonic() < deadline and server.rejected_tls == 0:
                time.sleep(0.02)
            assert server.rejected_tls == 1
            # port still serves plain HTTP afterwards
            status, _, _ = self._get(server)
            assert status == 401
        finally:
            server.stop()

    def test_wrong_path_and_method(self):
        server, _ = self.make()
        try:
            status, _, _ = self._get(server, path="/other")
            assert status == 404
            conn = http.client.HTTPConnection(server.host, server.port, timeout=5)
            conn.request("POST", "/cr", body=b"x")
            response = conn.getresponse()
            response.read()
            conn.close()
            assert response.status == 405
        finally:
            server.stop()


class TestCrToSessionLoop:
    def test_acs_trigger_causes_connection_request_session(self):
        policy = refacs.load_policy("secure")
        registry, plans = refacs.standard_bench(policy)
        with refacs.AcsServer(policy, registry, plans) as acs:
            client = fresh_client(acs.url)
            cr_config = client.profile.cr

            def call_home():
                client.run_session("connection-request")

            with ConnectionRequestServer(cr_config, call_home, port=0) as cr:
                # the device itself owns this read-only leaf
                client.profile.tree.leaves[
                    "InternetGatewayDevice.ManagementServer.ConnectionRequestURL"
                ].value = cr.url
                t0 = time.monotonic()
                outcome = client.run_session("boot")
                assert outcome.error == ""
                assert acs.wait_for_inform(
                    serial="PRB0000001", event="6 CONNECTION REQUEST", since=t0, timeout=10
                ), "no connection-request session arrived"


class TestShell:
    def run_shell(self, client, commands):
        out = io.StringIO()
        shell = HoneyclientShell(client, stdout=out)
        for line in commands:
            shell.onecmd(line)
        return out.getvalue()

    def test_get_set_and_status(self):
        client = fresh_client("http://127.0.0.1:1/acs")
        text = self.run_shell(
            client,
            [
                "get InternetGatewayDevice.DeviceInfo.SoftwareVersion",
                "set InternetGatewayDevice.DeviceInfo.ProvisioningCode shellmade",
                "get InternetGatewayDevice.DeviceInfo.ProvisioningCode",
                "status",
            ],
        )
        assert "29.04.88" in text
        assert "shellmade" in text
        assert "serial: PRB0000001" in text

    def test_events_listing(self):
        client = fresh_client("http://127.0.0.1:1/acs")
        client._queue_event("4 VALUE CHANGE")
        text = self.run_shell(client, ["events"])
        assert "4 VALUE CHANGE" in text

    def test_inform_against_live_server(self):
        with make_acs() as server:
            client = fresh_client(server.url)
            text = self.run_shell(client, ["inform boot", "status"])
        assert "session ok" in text
        assert "GetParameterValues" in text
        assert "sessions run: 1" in text

    def test_inform_reports_failure(self):
        client = fresh_client("http://127.0.0.1:9/acs")
        text = self.run_shell(client, ["inform"])
        assert "session failed" in text
