"""Load measurement for the session stack, with delimited and plotted output.

``run_load`` stands up a fresh server per measurement point, drives a fleet
of emulated clients through full provisioning sessions at varying
concurrency over plain HTTP and TLS, and records wall-clock latency per
session.  ``write_tsv`` emits the numbers; ``render_latency_figure`` draws
latency against client count, one line per transport, to a PNG next to the
table.  Figures are rendered headless.
"""

from __future__ import annotations

import os
import statistics
import threading
import time
from dataclasses import dataclass, field

from . import certs, refacs
from .topology import lab_client, lab_fleet, lab_serial

DEFAULT_CLIENT_COUNTS = (1, 5, 10, 20)
TRANSPORTS = ("plain", "tls")


@dataclass
class LoadPoint:
    transport: str
    clients: int
    sessions: int = 0
    ok: int = 0
    failed: int = 0
    latencies: list[float] = field(default_factory=list)  # seconds, ok sessions

    def _ms(self, seconds: float) -> float:
        return seconds * 1000.0

    @property
    def mean_ms(self) -> float:
        return self._ms(statistics.fmean(self.latencies)) if self.latencies else 0.0

    def percentile_ms(self, q: float) -> float:
        if not self.latencies:
            return 0.0
        ordered = sorted(self.latencies)
        if len(ordered) == 1:
            return self._ms(ordered[0])
        pos = q * (len(ordered) - 1)
        low = int(pos)
        frac = pos - low
        high = min(low + 1, len(ordered) - 1)
        return self._ms(ordered[low] + (ordered[high] - ordered[low]) * frac)

    @property
    def p50_ms(self) -> float:
        return self.percentile_ms(0.50)

    @property
    def p95_ms(self) -> float:
        return self.percentile_ms(0.95)


def _measure_point(
    transport: str,
    client_count: int,
    *,
    preset: str,
    sessions_per_client: int,
    host: str,
    cert_dir: str,
) -> LoadPoint:
    policy = refacs.load_policy(preset)
    policy.cr_after_session = False
    shared = policy.identify_by == "serial"
    registry, plans = lab_fleet(policy, client_count)
    tls = None
    if transport == "tls":
        cert = os.path.join(cert_dir, "load-acs.crt")
        key = os.path.join(cert_dir, "load-acs.key")
        if not os.path.exists(cert):
            certs.make_leaf(host, [host]).write(cert, key)
        tls = (cert, key)

    point = LoadPoint(transport=transport, clients=client_count)
    lock = threading.Lock()

    with refacs.AcsServer(policy, registry, plans, host=host, tls=tls) as server:

        def drive(serial: str) -> None:
            client = lab_client(serial, server.url, shared_credentials=shared)
            # the bootstrap session carries one-off events; measure steady state
            client.run_session("boot")
            for _ in range(sessions_per_client):
                started = time.monotonic()
                outcome = client.run_session("periodic")
                elapsed = time.monotonic() - started
                with lock:
                    point.sessions += 1
                    if outcome.error:
                        point.failed += 1
                    else:
                        point.ok += 1
                        point.latencies.append(elapsed)

        threads = [
            threading.Thread(target=drive, args=(lab_serial(i),), daemon=True)
            for i in range(client_count)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout=300)
    return point


def run_load(
    client_counts=DEFAULT_CLIENT_COUNTS,
    *,
    transports=TRANSPORTS,
    preset: str = "secure",
    sessions_per_client: int = 5,
    host: str = "127.0.0.1",
    work_dir: str = ".",
    progress=None,
) -> list[LoadPoint]:
    points: list[LoadPoint] = []
    for transport in transports:
        if transport not in TRANSPORTS:
            raise ValueError(f"transport {transport!r} not one of {TRANSPORTS}")
        for count in client_counts:
            if progress is not None:
                progress(f"{transport}: {count} client(s), {sessions_per_client} sessions each")
            points.append(
                _measure_point(
                    transport,
                    count,
                    preset=preset,
                    sessions_per_client=sessions_per_client,
                    host=host,
                    cert_dir=work_dir,
                )
            )
    return points


TSV_COLUMNS = (
    "transport",
    "clients",
    "sessions",
    "ok",
    "failed",
    "mean_ms",
    "p50_ms",
    "p95_ms",
)


def write_tsv(points: list[LoadPoint], path: str) -> None:
    lines = ["\t".join(TSV_COLUMNS)]
    for p in points:
        lines.append(
            "\t".join(
                [
                    p.transport,
                    str(p.clients),
                    str(p.sessions),
                    str(p.ok),
                    str(p.failed),
                    f"{p.mean_ms:.2f}",
                    f"{p.p50_ms:.2f}",
                    f"{p.p95_ms:.2f}",
                ]
            )
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_tsv(path: str) -> list[LoadPoint]:
    """Rebuild points (without raw latencies) from a written table."""
    points = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != TSV_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {header}")
        for line in fh:
            cells = line.rstrip("\n").split("\t")
            row = dict(zip(TSV_COLUMNS, cells))
            point = LoadPoint(
                transport=row["transport"],
                clients=int(row["clients"]),
                sessions=int(row["sessions"]),
                ok=int(row["ok"]),
                failed=int(row["failed"]),
            )
            # carry the summary through for plotting already-written tables
            point.latencies = [float(row["mean_ms"]) / 1000.0]
            points.append(point)
    return points


def render_latency_figure(points: list[LoadPoint], path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    styles = {"plain": ("o-", "#1f6feb"), "tls": ("s--", "#d1242f")}
    for transport in sorted({p.transport for p in points}):
        series = sorted(
            (p for p in points if p.transport == transport), key=lambda p: p.clients
        )
        marker, color = styles.get(transport, ("^-", "#6e7781"))
        ax.plot(
            [p.clients for p in series],
            [p.mean_ms for p in series],
            marker,
            color=color,
            label=f"{transport} (mean)",
        )
        if any(len(p.latencies) > 1 for p in series):
            ax.plot(
                [p.clients for p in series],
                [p.p95_ms for p in series],
                ":",
                color=color,
                alpha=0.6,
                label=f"{transport} (p95)",
            )
    ax.set_xlabel("concurrent clients")
    ax.set_ylabel("session latency (ms)")
    ax.set_title("Provisioning session latency vs client count")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def run_and_report(
    out_dir: str,
    *,
    client_counts=DEFAULT_CLIENT_COUNTS,
    transports=TRANSPORTS,
    preset: str = "secure",
    sessions_per_client: int = 5,
    host: str = "127.0.0.1",
    progress=None,
) -> tuple[str, str, list[LoadPoint]]:
    """Measure, then leave ``load.tsv`` and ``load.png`` side by side."""
    os.makedirs(out_dir, exist_ok=True)
    points = run_load(
        client_counts,
        transports=transports,
        preset=preset,
        sessions_per_client=sessions_per_client,
        host=host,
        work_dir=out_dir,
        progress=progress,
    )
    tsv_path = os.path.join(out_dir, "load.tsv")
    png_path = os.path.join(out_dir, "load.png")
    write_tsv(points, tsv_path)
    render_latency_figure(points, png_path)
    return tsv_path, png_path, points
