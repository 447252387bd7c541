"""Load measurement: percentile math, table round trip, figure rendering."""

import pytest

from cwmpkit.report import (
    TSV_COLUMNS,
    LoadPoint,
    read_tsv,
    render_latency_figure,
    run_and_report,
    run_load,
    write_tsv,
)


def tenths_point():
    point = LoadPoint(transport="plain", clients=4, sessions=10, ok=10)
    point.latencies = [i / 10 for i in range(1, 11)]  # 0.1s .. 1.0s
    return point


class TestLoadPoint:
    def test_mean(self):
        assert tenths_point().mean_ms == pytest.approx(550.0)

    def test_percentiles_interpolate(self):
        point = tenths_point()
        assert point.p50_ms == pytest.approx(550.0)
        assert point.p95_ms == pytest.approx(955.0)
        assert point.percentile_ms(0.0) == pytest.approx(100.0)
        assert point.percentile_ms(1.0) == pytest.approx(1000.0)

    def test_single_sample(self):
        point = LoadPoint(transport="plain", clients=1)
        point.latencies = [0.25]
        assert point.mean_ms == point.p50_ms == point.p95_ms == pytest.approx(250.0)

    def test_empty_reports_zero(self):
        point = LoadPoint(transport="plain", clients=1)
        assert point.mean_ms == 0.0
        assert point.p95_ms == 0.0


class TestTable:
    def test_round_trip(self, tmp_path):
        path = str(tmp_path / "load.tsv")
        write_tsv([tenths_point()], path)
        lines = open(path).read().splitlines()
        assert lines[0] == "\t".join(TSV_COLUMNS)
        assert lines[1].startswith("plain\t4\t10\t10\t0\t550.00")
        points = read_tsv(path)
        assert len(points) == 1
        assert points[0].clients == 4
        assert points[0].mean_ms == pytest.approx(550.0)

    def test_wrong_columns_rejected(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("who\twhat\n")
        with pytest.raises(ValueError):
            read_tsv(str(path))


class TestFigure:
    def test_png_is_rendered(self, tmp_path):
        tls = LoadPoint(transport="tls", clients=4, sessions=10, ok=10)
        tls.latencies = [x * 1.5 for x in tenths_point().latencies]
        path = str(tmp_path / "fig.png")
        render_latency_figure([tenths_point(), tls], path)
        raw = open(path, "rb").read()
        assert raw[:4] == b"\x89PNG"
        assert len(raw) > 5000


class TestLiveLoad:
    def test_small_plain_run(self, tmp_path):
        points = run_load(
            (1, 2),
            transports=("plain",),
            sessions_per_client=2,
            work_dir=str(tmp_path),
        )
        assert [(p.transport, p.clients) for p in points] == [("plain", 1), ("plain", 2)]
        for point in points:
            assert point.sessions == point.clients * 2
            assert point.failed == 0
            assert point.ok == point.sessions
            assert all(lat > 0 for lat in point.latencies)

    def test_report_leaves_table_and_figure(self, tmp_path):
        tsv_path, png_path, points = run_and_report(
            str(tmp_path / "out"),
            client_counts=(1,),
            transports=("plain", "tls"),
            sessions_per_client=1,
        )
        assert open(png_path, "rb").read()[:4] == b"\x89PNG"
        rows = read_tsv(tsv_path)
        assert [(p.transport, p.clients) for p in rows] == [("plain", 1), ("tls", 1)]
        assert all(p.failed == 0 for p in points)
