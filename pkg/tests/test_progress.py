from __future__ import annotations

import math
import threading

from progress import MetricsWriter, RunStats, format_metrics_line, parse_metrics_line, render_line, run_in_threads


class TestRunInThreads:
    def test_results_keep_job_order(self):
        jobs = [lambda i=i: i * i for i in range(12)]
        assert run_in_threads(jobs, "SQUARES", max_threads=3) == [i * i for i in range(12)]

    def test_concurrency_is_capped(self):
        lock = threading.Lock()
        active = [0]
        peak = [0]
        gate = threading.Event()

        def job() -> None:
            with lock:
                active[0] += 1
                peak[0] = max(peak[0], active[0])
            gate.wait(0.05)
            with lock:
                active[0] -= 1

        run_in_threads([job] * 8, "CAP", max_threads=2)
        assert peak[0] <= 2

    def test_empty(self):
        assert run_in_threads([], "NONE", max_threads=2) == []


class TestMetrics:
    def test_line_round_trip(self):
        line = format_metrics_line(7, {"loss": 0.125, "w_sim": 0.0, "snr": math.inf, "frozen": 1})
        assert line == "step=7 loss=0.125 w_sim=0 snr=inf frozen=1"
        assert parse_metrics_line(line) == {"step": "7", "loss": "0.125", "w_sim": "0", "snr": "inf", "frozen": "1"}

    def test_writer_appends_lines(self, tmp_path):
        path = tmp_path / "m.log"
        with MetricsWriter(path) as mw:
            mw.write(0, {"loss": 1.5})
            mw.write(1, {"loss": 1.0})
        assert path.read_text().splitlines() == ["step=0 loss=1.5", "step=1 loss=1"]

    def test_render_line_shows_metrics(self):
        stats = RunStats("TRAIN", 4)
        stats.record_metrics({"L_rec": 0.5})
        stats.record_unit_done()
        line = render_line(stats.snapshot())
        assert "TRAIN" in line and "(1/4)" in line and "L_rec=0.5000" in line
