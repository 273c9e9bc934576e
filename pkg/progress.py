from __future__ import annotations

import asyncio
from contextlib import contextmanager, suppress
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator, Sequence, TypeVar

from rich.console import Console
from rich.live import Live


T = TypeVar("T")


# -----------------------------
# Logging
# -----------------------------
def setup_logging(log_path: str, console_level: int = logging.ERROR) -> None:
    """
    - Console: quiet (ERROR only) so the Rich progress line stays clean.
    - File: full DEBUG trace.
    """
    root = logging.getLogger()
    root.setLevel(logging.DEBUG)

    fmt = logging.Formatter("%(asctime)s | %(levelname)s | %(name)s | %(message)s")

    ch = logging.StreamHandler()
    ch.setLevel(console_level)
    ch.setFormatter(fmt)

    Path(log_path).parent.mkdir(parents=True, exist_ok=True)
    fh = logging.FileHandler(log_path, mode="w", encoding="utf-8")
    fh.setLevel(logging.DEBUG)
    fh.setFormatter(fmt)

    root.handlers.clear()
    root.addHandler(ch)
    root.addHandler(fh)

    for noisy in ("numba", "matplotlib", "PIL"):
        logging.getLogger(noisy).setLevel(logging.WARNING)


# -----------------------------
# Progress Stats
# -----------------------------
@dataclass
class RunStats:
    task_name: str
    total_units: int

    started_at: float = field(default_factory=time.perf_counter)
    finished: bool = False

    done_units: int = 0
    failed_units: int = 0

    # latest scalar metrics of a training loop (loss terms, weights)
    last_metrics: dict[str, float] = field(default_factory=dict)

    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record_unit_done(self, ok: bool = True) -> None:
        with self._lock:
            self.done_units += 1
            if not ok:
                self.failed_units += 1

    def record_metrics(self, metrics: dict[str, float]) -> None:
        with self._lock:
            self.last_metrics = dict(metrics)

    def snapshot(self) -> dict[str, Any]:
        with self._lock:
            elapsed = max(1e-9, time.perf_counter() - self.started_at)
            pct = (100.0 * self.done_units / self.total_units) if self.total_units else 100.0
            return {
                "task": self.task_name,
                "pct": pct,
                "done": self.done_units,
                "total": self.total_units,
                "failed": self.failed_units,
                "rate": self.done_units / elapsed,
                "elapsed": elapsed,
                "metrics": dict(self.last_metrics),
            }


def render_line(snap: dict[str, Any]) -> str:
    failed = int(snap["failed"])
    fail_color = "green" if failed == 0 else "red"
    parts = [
        f"[bold]{snap['task']}[/]",
        f"{snap['pct']:.1f}% ({snap['done']}/{snap['total']})",
    ]
    metrics = snap.get("metrics") or {}
    if metrics:
        parts.append(" ".join(f"{k}={v:.4f}" for k, v in metrics.items()))
    parts.append(f"[{fail_color}]fail[/{fail_color}]={failed}")
    parts.append(f"it/s={snap['rate']:.2f}")
    parts.append(f"t={snap['elapsed']:.0f}s")
    return " | ".join(parts)


async def progress_reporter(live: Live, stats: RunStats, refresh_s: float = 0.2) -> None:
    while True:
        snap = stats.snapshot()
        live.update(render_line(snap))

        if stats.finished and int(snap["done"]) >= int(snap["total"]):
            break

        await asyncio.sleep(refresh_s)


@contextmanager
def live_progress(stats: RunStats, *, enabled: bool = True) -> Iterator[Live | None]:
    """
    Synchronous training loops push updates themselves via `refresh(live, stats)`.
    """
    if not enabled:
        yield None
        return
    live = Live("", console=Console(stderr=True), refresh_per_second=10, transient=True)
    live.start()
    try:
        yield live
    finally:
        stats.finished = True
        live.stop()


def refresh(live: Live | None, stats: RunStats) -> None:
    if live is not None:
        live.update(render_line(stats.snapshot()))


# -----------------------------
# Threaded fan-out
# -----------------------------
async def _gather_units(
    jobs: Sequence[Callable[[], T]],
    stats: RunStats,
    max_threads: int,
    show_progress: bool,
) -> list[T]:
    sem = asyncio.Semaphore(max(1, max_threads))

    async def _wrap_unit(job: Callable[[], T]) -> T:
        async with sem:
            ok = False
            try:
                out = await asyncio.to_thread(job)
                ok = True
                return out
            finally:
                stats.record_unit_done(ok)

    live: Live | None = None
    reporter: asyncio.Task | None = None
    if show_progress:
        live = Live("", console=Console(stderr=True), refresh_per_second=10, transient=True)
        live.start()
        reporter = asyncio.create_task(progress_reporter(live, stats))
    try:
        # gather keeps submission order, so results are deterministic
        return await asyncio.gather(*(_wrap_unit(j) for j in jobs))
    finally:
        stats.finished = True
        if reporter is not None:
            reporter.cancel()
            with suppress(asyncio.CancelledError):
                await reporter
        if live is not None:
            live.stop()


def run_in_threads(
    jobs: Sequence[Callable[[], T]],
    task_name: str,
    max_threads: int,
    show_progress: bool = False,
) -> list[T]:
    """Run blocking jobs on worker threads (at most `max_threads` at once); results in job order."""
    stats = RunStats(task_name=task_name, total_units=len(jobs))
    if not jobs:
        return []
    return asyncio.run(_gather_units(jobs, stats, max_threads, show_progress))


# -----------------------------
# Metrics lines
# -----------------------------
def format_metrics_line(step: int, values: dict[str, Any]) -> str:
    def fmt(v: Any) -> str:
        if isinstance(v, float):
            if math.isinf(v):
                return "inf" if v > 0 else "-inf"
            return f"{v:.6g}"
        return str(v)

    return " ".join([f"step={step}"] + [f"{k}={fmt(v)}" for k, v in values.items()])


def parse_metrics_line(line: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for tok in line.split():
        k, _, v = tok.partition("=")
        out[k] = v
    return out


class MetricsWriter:
    """Line-oriented `key=value` records, one per step (or per dev evaluation)."""

    def __init__(self, path: str | Path | None, name: str = "metrics") -> None:
        self.log = logging.getLogger(name)
        self.path = Path(path) if path is not None else None
        self._fh = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = self.path.open("w", encoding="utf-8")

    def write(self, step: int, values: dict[str, Any]) -> None:
        line = format_metrics_line(step, values)
        self.log.debug(line)
        if self._fh is not None:
            self._fh.write(line + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self) -> MetricsWriter:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()
