from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any

from openpyxl import Workbook, load_workbook
from openpyxl.styles import Alignment, Font, PatternFill
from openpyxl.utils import get_column_letter
from rich.console import Console
from rich.table import Table

from evalkit import EvalReport, EvalRow


log = logging.getLogger("io_reports")

HEADERS = ["condition", "variant", "seed", "f0_rmse", "cos_sim", "n_utterances"]


def _cell(row: EvalRow, h: str) -> Any:
    return getattr(row, h)


def _fmt(v: Any) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


# -----------------------------
# Plain text
# -----------------------------
def format_table(report: EvalReport) -> str:
    """Aligned plain-text table, one line per row, headed by title, config hash and seed."""
    body = [[_fmt(_cell(r, h)) for h in HEADERS] for r in report.rows]
    widths = [max([len(h)] + [len(line[i]) for line in body]) for i, h in enumerate(HEADERS)]

    def line(values: list[str]) -> str:
        return "  ".join(v.ljust(w) if i < 2 else v.rjust(w) for i, (v, w) in enumerate(zip(values, widths))).rstrip()

    out = [
        f"# {report.title}  config_hash={report.config_hash}  seed={report.seed}",
        line(HEADERS),
        line(["-" * w for w in widths]),
    ]
    out.extend(line(b) for b in body)
    return "\n".join(out) + "\n"


def write_text(report: EvalReport, path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(format_table(report), encoding="utf-8")
    return p


# -----------------------------
# JSON-lines
# -----------------------------
def write_jsonl(report: EvalReport, path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", encoding="utf-8") as fh:
        for rec in report.records():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return p


def read_jsonl(path: str | Path) -> EvalReport:
    rows: list[EvalRow] = []
    title, chash, seed = "", "", 0
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            title, chash = rec["title"], rec["config_hash"]
            rows.append(
                EvalRow(rec["condition"], rec["variant"], rec["f0_rmse"], rec["cos_sim"], rec["n_utterances"], rec["seed"])
            )
    if rows:
        seed = min(r.seed for r in rows)
    return EvalReport(title, rows, chash, seed)


# -----------------------------
# Excel
# -----------------------------
def write_report_xlsx(report: EvalReport, path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)

    wb = Workbook()
    ws = wb.active
    ws.title = report.title[:31] or "report"

    ws.append(HEADERS)
    for col in range(1, len(HEADERS) + 1):
        c = ws.cell(row=1, column=col)
        c.font = Font(bold=True)
        c.fill = PatternFill("solid", fgColor="F2F2F2")
        c.alignment = Alignment(horizontal="center", vertical="center")

    for r in report.rows:
        ws.append([_cell(r, h) for h in HEADERS])

    ws.freeze_panes = "A2"
    ws.auto_filter.ref = f"A1:{get_column_letter(len(HEADERS))}1"

    for i, h in enumerate(HEADERS, start=1):
        col = get_column_letter(i)
        ws.column_dimensions[col].width = 22 if h in {"condition", "variant"} else 14

    metric_cols = [HEADERS.index(h) + 1 for h in ("f0_rmse", "cos_sim")]
    for row in range(2, ws.max_row + 1):
        for cidx in metric_cols:
            cell = ws.cell(row=row, column=cidx)
            if isinstance(cell.value, (int, float)):
                cell.number_format = "0.0000"

    meta = wb.create_sheet("meta")
    meta.append(["key", "value"])
    meta.append(["title", report.title])
    meta.append(["config_hash", report.config_hash])
    meta.append(["seed", report.seed])
    for w in report.warnings:
        meta.append(["warning", w])

    wb.save(p)
    log.info("Wrote %s (%d rows)", str(p), len(report.rows))
    return p


def load_report_xlsx(path: str | Path) -> list[dict[str, Any]]:
    wb = load_workbook(path, read_only=True, data_only=True)
    ws = wb.worksheets[0]
    it = ws.iter_rows(values_only=True)
    header = [str(h) for h in next(it)]
    return [dict(zip(header, row)) for row in it if row is not None]


# -----------------------------
# Console / bundle
# -----------------------------
def print_report(report: EvalReport, console: Console | None = None) -> None:
    table = Table(title=f"{report.title} (config {report.config_hash}, seed {report.seed})")
    for h in HEADERS:
        table.add_column(h, justify="left" if h in {"condition", "variant"} else "right")
    for r in report.rows:
        table.add_row(*[_fmt(_cell(r, h)) for h in HEADERS])
    (console or Console()).print(table)


def write_report(report: EvalReport, out_dir: str | Path, stem: str | None = None) -> dict[str, Path]:
    root = Path(out_dir)
    name = stem or report.title
    return {
        "txt": write_text(report, root / f"{name}.txt"),
        "jsonl": write_jsonl(report, root / f"{name}.jsonl"),
        "xlsx": write_report_xlsx(report, root / f"{name}.xlsx"),
    }
