"""Single-host lab: a client fleet, server, in-path sensor, and collector.

Every component runs as threads inside one process, wired over loopback.
``up()`` builds the stack in dependency order (collector, server, sensor,
clients), writes a manifest describing what is listening where, and
``down()`` tears it all back down and removes the manifest.  The manifest
carries the owning pid so a second lab refuses to stack on a live one and
``down`` from another process knows whom to signal.

Layout under the state directory::

    manifest.json        what is up (ports, serials, pid)
    certs/               TLS material minted for this lab
    collector-store/     one log per sensor
    sensor.log           the sensor's own record store
    acs-transcript.log   server-side session transcripts
"""

from __future__ import annotations

import json
import os
import secrets
import signal
import threading
import time
from dataclasses import dataclass, field

from . import certs, refacs, textconf
from .collector import Collector
from .device import default_profile
from .codec import DeviceId
from .honeyclient import ConnectionRequestServer, Honeyclient, SessionOutcome
from .sensor import BatchUploader, SensorConfig, SensorServer

LAB_SENSOR_ID = "lab-sensor"
CR_USERNAME = "cr-user"
CR_PASSWORD = "cr-pass"

LAB_PLAN = """[plan:lab-config]
gpv InternetGatewayDevice.DeviceInfo.SoftwareVersion
spv InternetGatewayDevice.DeviceInfo.ProvisioningCode=prov-{serial} key=cfg-{serial}
"""


def lab_serial(index: int) -> str:
    return f"LAB{index + 1:07d}"


def lab_fleet(policy: refacs.AcsPolicy, count: int, *, cr_urls: dict[str, str] | None = None):
    """Registry and plans for ``count`` loopback devices.

    Serial-keyed server policies need shared credentials (the serial is the
    identity); credential-keyed ones get one account per device.
    """
    shared = policy.identify_by == "serial"
    registry = refacs.DeviceRegistry()
    for i in range(count):
        serial = lab_serial(i)
        registry.add(
            refacs.DeviceRecord(
                key=serial,
                serial_number=serial,
                username="shared-user" if shared else f"user-{serial}",
                password="shared-pass" if shared else f"pw-{serial}",
                source_ip="127.0.0.1",
                cr_url=(cr_urls or {}).get(serial, ""),
                cr_username=CR_USERNAME,
                cr_password=CR_PASSWORD,
                plan="lab-config",
            )
        )
    plans = refacs.parse_plans(textconf.parse_sections(LAB_PLAN))
    return registry, plans


def lab_client(serial: str, acs_url: str, *, shared_credentials: bool, tls_mode: str = "no-verify"):
    profile = default_profile()
    profile.device_id = DeviceId("cwmpkit-lab", "00040E", "LabGateway", serial)
    profile.acs_url = acs_url
    profile.acs_username = "shared-user" if shared_credentials else f"user-{serial}"
    profile.acs_password = "shared-pass" if shared_credentials else f"pw-{serial}"
    profile.tls_mode = tls_mode
    profile.cr.username = CR_USERNAME
    profile.cr.password = CR_PASSWORD
    return Honeyclient(profile)


@dataclass
class TopologyConfig:
    root_dir: str
    preset: str = "secure"
    clients: int = 1
    with_sensor: bool = True
    with_collector: bool = True
    acs_tls: bool = False
    host: str = "127.0.0.1"
    inform_interval: float = 0.0  # >0 drives a periodic session round


class TopologyError(RuntimeError):
    pass


def manifest_path(root_dir: str) -> str:
    return os.path.join(root_dir, "manifest.json")


def load_manifest(root_dir: str) -> dict | None:
    try:
        with open(manifest_path(root_dir), "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        return None


def pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except OSError:
        return False
    return True


def status(root_dir: str) -> dict:
    """What the manifest claims, annotated with whether the owner is alive."""
    manifest = load_manifest(root_dir)
    if manifest is None:
        return {"state": "down"}
    alive = pid_alive(int(manifest.get("pid", -1)))
    return {"state": "up" if alive else "stale", **manifest}


class Topology:
    def __init__(self, config: TopologyConfig) -> None:
        if config.clients < 1:
            raise ValueError("a lab needs at least one client")
        self.config = config
        self.collector: Collector | None = None
        self.acs: refacs.AcsServer | None = None
        self.sensor: SensorServer | None = None
        self.uploader: BatchUploader | None = None
        self.clients: dict[str, Honeyclient] = {}
        self.cr_servers: dict[str, ConnectionRequestServer] = {}
        self.token = ""
        self._driver: threading.Thread | None = None
        self._stop = threading.Event()
        self._up = False

    # -- lifecycle ------------------------------------------------------------

    def up(self) -> dict:
        cfg = self.config
        existing = load_manifest(cfg.root_dir)
        if existing is not None and pid_alive(int(existing.get("pid", -1))):
            raise TopologyError(
                f"a lab owned by pid {existing['pid']} is already up in {cfg.root_dir}"
            )
        os.makedirs(cfg.root_dir, exist_ok=True)
        cert_dir = os.path.join(cfg.root_dir, "certs")
        os.makedirs(cert_dir, exist_ok=True)

        try:
            if cfg.with_collector:
                material = certs.make_leaf(cfg.host, [cfg.host])
                cert, key = os.path.join(cert_dir, "collector.crt"), os.path.join(
                    cert_dir, "collector.key"
                )
                material.write(cert, key)
                self.token = secrets.token_hex(16)
                self.collector = Collector(
                    os.path.join(cfg.root_dir, "collector-store"),
                    {self.token: LAB_SENSOR_ID},
                    host=cfg.host,
                    tls=(cert, key),
                ).start()

            policy = refacs.load_policy(cfg.preset)
            # connection requests in the lab are fired on demand, not per session
            policy.cr_after_session = False
            shared = policy.identify_by == "serial"
            registry, plans = lab_fleet(policy, cfg.clients)
            acs_tls = None
            if cfg.acs_tls:
                material = certs.make_leaf(cfg.host, [cfg.host])
                cert, key = os.path.join(cert_dir, "acs.crt"), os.path.join(cert_dir, "acs.key")
                material.write(cert, key)
                acs_tls = (cert, key)
            self.acs = refacs.AcsServer(
                policy,
                registry,
                plans,
                host=cfg.host,
                tls=acs_tls,
                transcript_path=os.path.join(cfg.root_dir, "acs-transcript.log"),
            ).start()

            client_target = self.acs.url
            if cfg.with_sensor:
                self.sensor = SensorServer(
                    SensorConfig(
                        listen_host=cfg.host,
                        upstream_url=self.acs.url,
                        store_path=os.path.join(cfg.root_dir, "sensor.log"),
                        sensor_id=LAB_SENSOR_ID,
                    )
                ).start()
                client_target = self.sensor.listen_url
                if self.collector is not None:
                    self.uploader = BatchUploader(
                        self.sensor.config.store_path,
                        self.collector.url,
                        self.token,
                        sensor_id=LAB_SENSOR_ID,
                        tls_mode="no-verify",
                    )

            for i in range(cfg.clients):
                serial = lab_serial(i)
                client = lab_client(serial, client_target, shared_credentials=shared)
                cr = ConnectionRequestServer(
                    client.profile.cr,
                    lambda c=client: c.run_session("connection-request"),
                    host=cfg.host,
                    port=0,
                ).start()
                cr_leaf = client.profile.tree.leaves[
                    "InternetGatewayDevice.ManagementServer.ConnectionRequestURL"
                ]
                cr_leaf.value = cr.url
                record = registry.by_serial(serial)
                record.cr_url = cr.url
                self.clients[serial] = client
                self.cr_servers[serial] = cr
        except Exception:
            self._teardown()
            raise

        self._up = True
        manifest = self._write_manifest()
        if cfg.inform_interval > 0:
            self._driver = threading.Thread(
                target=self._drive, name="topology-driver", daemon=True
            )
            self._driver.start()
        return manifest

    def _write_manifest(self) -> dict:
        cfg = self.config
        manifest = {
            "pid": os.getpid(),
            "created": time.time(),
            "preset": cfg.preset,
            "root_dir": os.path.abspath(cfg.root_dir),
            "acs_url": self.acs.url if self.acs else "",
            "sensor_url": self.sensor.listen_url if self.sensor else "",
            "collector_url": self.collector.url if self.collector else "",
            "collector_token": self.token,
            "clients": {
                serial: {"cr_url": cr.url} for serial, cr in self.cr_servers.items()
            },
        }
        tmp = manifest_path(cfg.root_dir) + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2)
            fh.write("\n")
        os.replace(tmp, manifest_path(cfg.root_dir))
        return manifest

    def _teardown(self) -> None:
        self._stop.set()
        if self._driver is not None:
            self._driver.join(timeout=10)
            self._driver = None
        for cr in self.cr_servers.values():
            cr.stop()
        self.cr_servers.clear()
        if self.sensor is not None:
            self.sensor.stop()
            self.sensor = None
        if self.acs is not None:
            self.acs.stop()
            self.acs = None
        if self.collector is not None:
            self.collector.stop()
            self.collector = None
        self.clients.clear()

    def down(self) -> None:
        self._teardown()
        if self._up:
            try:
                os.unlink(manifest_path(self.config.root_dir))
            except FileNotFoundError:
                pass
            self._up = False

    def __enter__(self) -> "Topology":
        self.up()
        return self

    def __exit__(self, *exc) -> None:
        self.down()

    # -- driving the fleet ------------------------------------------------------

    def run_inform_round(self, reason: str = "periodic") -> list[SessionOutcome]:
        """One session per client, concurrently; returns every outcome."""
        outcomes: list[SessionOutcome] = []
        lock = threading.Lock()

        def one(client: Honeyclient) -> None:
            outcome = client.run_session(reason)
            with lock:
                outcomes.append(outcome)

        threads = [
            threading.Thread(target=one, args=(c,), daemon=True) for c in self.clients.values()
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout=60)
        return outcomes

    def _drive(self) -> None:
        while not self._stop.wait(self.config.inform_interval):
            self.run_inform_round("periodic")

    def trigger(self, serial: str):
        """Fire a connection request at one client, as the server would."""
        cr = self.cr_servers.get(serial)
        if cr is None:
            raise KeyError(f"no such client {serial!r}")
        return refacs.connection_request(cr.url, CR_USERNAME, CR_PASSWORD)

    def flush_uploads(self) -> int:
        """Ship the sensor store to the collector; returns records sent."""
        if self.uploader is None:
            return 0
        return self.uploader.drain()


def run_until_signalled(topology: Topology, *, poll: float = 0.5) -> None:
    """Foreground mode: hold the lab up until SIGTERM/SIGINT arrives."""
    stop = threading.Event()

    def handle(signum, frame):
        stop.set()

    previous = {}
    for sig in (signal.SIGINT, signal.SIGTERM):
        previous[sig] = signal.signal(sig, handle)
    try:
        while not stop.wait(poll):
            pass
    finally:
        for sig, handler in previous.items():
            signal.signal(sig, handler)
