"""KPI emission: per-node CSV with summary rows, JSON dumps and static SVG
charts."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from html import escape
from pathlib import Path

from .rollout import ConsumerReport
from .scenario import KpiRecord, aggregate

FORMATS = ("csv", "json", "svg")

CSV_COLUMNS = (
    "run", "kind", "scenario", "stack", "phy", "seed", "period_ms", "error",
    "node", "side", "joined_at", "pdr", "goodput", "complete", "dropped", "received", "lost",
    "mean_join_time", "unreachable", "max_goodput", "mean_pdr",
)


class ReportError(ValueError):
    pass


def sig6(x: float | None) -> float | None:
    """Round to the 6 significant digits used in every emitted file."""
    if x is None:
        return None
    return float(f"{x:.6g}")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return f"{x:.6g}"
    return str(x)


def normalise(records: list[KpiRecord]) -> list[KpiRecord]:
    """Round every numeric field to 6 significant digits and recompute the
    summaries from the rounded per-node values, so files round-trip exactly."""
    out = []
    for rec in records:
        reports = [
            ConsumerReport(
                node=r.node,
                pdr=sig6(r.pdr),
                goodput=sig6(r.goodput),
                complete=r.complete,
                received=r.received,
                lost=r.lost,
                joined_at=sig6(r.joined_at),
                dropped=r.dropped,
                side=r.side,
            )
            for r in rec.reports
        ]
        summary = {k: sig6(v) if isinstance(v, float) else v for k, v in aggregate(reports).items()}
        if rec.error:
            summary = dict(mean_join_time=rec.mean_join_time, unreachable=rec.unreachable, max_goodput=rec.max_goodput, mean_pdr=rec.mean_pdr)
        out.append(
            KpiRecord(
                scenario=rec.scenario,
                stack=rec.stack,
                phy=rec.phy,
                seed=rec.seed,
                period_ms=sig6(rec.period_ms),
                reports=reports,
                point=dict(rec.point),
                error=rec.error,
                **summary,
            )
        )
    return out


# -- csv ---------------------------------------------------------------------

def csv_rows(records: list[KpiRecord]) -> list[dict]:
    rows = []
    for i, rec in enumerate(normalise(records)):
        base = {
            "run": i, "scenario": rec.scenario, "stack": rec.stack, "phy": rec.phy,
            "seed": rec.seed, "period_ms": rec.period_ms, "error": rec.error,
        }
        for r in rec.reports:
            rows.append({**base, "kind": "node", **r.row()})
        rows.append({
            **base, "kind": "summary", "mean_join_time": rec.mean_join_time,
            "unreachable": rec.unreachable, "max_goodput": rec.max_goodput, "mean_pdr": rec.mean_pdr,
        })
    return rows


def write_csv(records: list[KpiRecord], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for row in csv_rows(records):
            w.writerow({k: _fmt(row.get(k)) for k in CSV_COLUMNS})
    return path


def _num(s: str, kind=float):
    return None if s == "" else kind(s)


def read_csv(path: str | Path) -> list[KpiRecord]:
    runs: dict[int, KpiRecord] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            i = int(row["run"])
            rec = runs.get(i)
            if rec is None:
                rec = runs[i] = KpiRecord(
                    scenario=row["scenario"], stack=row["stack"], phy=row["phy"],
                    seed=int(row["seed"]), period_ms=_num(row["period_ms"]),
                    mean_join_time=None, unreachable=0, max_goodput=None, mean_pdr=0.0,
                    error=row["error"] or None,
                )
            if row["kind"] == "node":
                rec.reports.append(ConsumerReport(
                    node=int(row["node"]), pdr=float(row["pdr"]), goodput=_num(row["goodput"]),
                    complete=row["complete"] == "1", received=int(row["received"]), lost=int(row["lost"]),
                    joined_at=_num(row["joined_at"]), dropped=row["dropped"] == "1", side=row["side"],
                ))
            else:
                rec.mean_join_time = _num(row["mean_join_time"])
                rec.unreachable = int(row["unreachable"])
                rec.max_goodput = _num(row["max_goodput"])
                rec.mean_pdr = float(row["mean_pdr"])
    return [runs[k] for k in sorted(runs)]


# -- json --------------------------------------------------------------------

def to_json(records: list[KpiRecord]) -> list[dict]:
    out = []
    for rec in normalise(records):
        out.append({
            "scenario": rec.scenario, "stack": rec.stack, "phy": rec.phy, "seed": rec.seed,
            "period_ms": rec.period_ms, "point": rec.point, "error": rec.error,
            "mean_join_time": rec.mean_join_time, "unreachable": rec.unreachable,
            "max_goodput": rec.max_goodput, "mean_pdr": rec.mean_pdr,
            "reports": [r.row() for r in rec.reports],
        })
    return out


def write_json(records: list[KpiRecord], path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(to_json(records), indent=2) + "\n", encoding="utf-8")
    return path


def read_json(path: str | Path) -> list[KpiRecord]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    records = []
    for d in data:
        reports = [ConsumerReport(**r) for r in d.pop("reports")]
        records.append(KpiRecord(reports=reports, **d))
    return records


# -- svg ---------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")
_W, _H, _PAD = 560, 340, 56


def _axis_frame(title: str, ylabel: str, xlabel: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="11">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_W - 20}" y2="{_H - _PAD}" stroke="black"/>',
        f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_PAD}" y2="30" stroke="black"/>',
        f'<text x="{_W / 2}" y="{_H - 14}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="14" y="{_H / 2}" text-anchor="middle" transform="rotate(-90 14 {_H / 2})">{escape(ylabel)}</text>',
    ]


def _yticks(lo: float, hi: float, to_y) -> list[str]:
    out = []
    for k in range(5):
        v = lo + (hi - lo) * k / 4
        y = to_y(v)
        out.append(f'<line x1="{_PAD - 4}" y1="{y:.1f}" x2="{_PAD}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<text x="{_PAD - 6}" y="{y + 4:.1f}" text-anchor="end">{v:.3g}</text>')
    return out


def bar_chart(title: str, ylabel: str, bars: dict[str, float]) -> str:
    hi = max([v for v in bars.values()] + [1e-9]) * 1.1
    to_y = lambda v: _H - _PAD - (v / hi) * (_H - _PAD - 30)
    parts = _axis_frame(title, ylabel, "configuration") + _yticks(0.0, hi, to_y)
    n = max(len(bars), 1)
    slot = (_W - 20 - _PAD) / n
    for i, (label, v) in enumerate(bars.items()):
        x = _PAD + i * slot + slot * 0.15
        y = to_y(v)
        parts.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{slot * 0.7:.1f}" height="{_H - _PAD - y:.1f}" fill="{_PALETTE[i % len(_PALETTE)]}"><title>{escape(label)}: {v:.4g}</title></rect>')
        parts.append(f'<text x="{x + slot * 0.35:.1f}" y="{_H - _PAD + 14}" text-anchor="middle" font-size="9">{escape(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def line_chart(title: str, ylabel: str, series: dict[str, list[tuple[float, float]]]) -> str:
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1.0
    y1 = max(ys + [1e-9]) * 1.1
    to_x = lambda v: _PAD + (v - x0) / (x1 - x0) * (_W - 20 - _PAD)
    to_y = lambda v: _H - _PAD - (v / y1) * (_H - _PAD - 30)
    parts = _axis_frame(title, ylabel, "period (ms)") + _yticks(0.0, y1, to_y)
    for k in range(5):
        v = x0 + (x1 - x0) * k / 4
        parts.append(f'<text x="{to_x(v):.1f}" y="{_H - _PAD + 14}" text-anchor="middle">{v:.0f}</text>')
    for i, (name, pts) in enumerate(sorted(series.items())):
        color = _PALETTE[i % len(_PALETTE)]
        path = " ".join(f"{to_x(x):.1f},{to_y(y):.1f}" for x, y in sorted(pts))
        parts.append(f'<polyline class="series" data-series="{escape(name)}" fill="none" stroke="{color}" stroke-width="2" points="{path}"/>')
        parts.append(f'<text x="{_W - 24}" y="{40 + 14 * i}" text-anchor="end" fill="{color}">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _label(rec: KpiRecord) -> str:
    return f"{rec.stack}/{rec.phy}"


def _mean(values) -> float:
    values = [v for v in values if v is not None]
    return math.fsum(values) / len(values) if values else 0.0


def write_svgs(records: list[KpiRecord], out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    ok = [r for r in records if not r.error]
    groups: dict[str, list[KpiRecord]] = defaultdict(list)
    for r in ok:
        groups[_label(r)].append(r)
    files = []
    join = {k: _mean(r.mean_join_time for r in v) for k, v in groups.items()}
    unreach = {k: _mean(r.unreachable for r in v) for k, v in groups.items()}
    files.append(_write(out_dir / "join_time.svg", bar_chart("Mean mesh join time", "seconds", join)))
    files.append(_write(out_dir / "unreachable.svg", bar_chart("Unreachable consumers", "nodes", unreach)))
    goodput: dict[str, dict[float, list]] = defaultdict(lambda: defaultdict(list))
    pdr: dict[str, dict[float, list]] = defaultdict(lambda: defaultdict(list))
    for r in ok:
        if r.period_ms is None:
            continue
        goodput[r.phy][r.period_ms].append(r.max_goodput)
        pdr[r.phy][r.period_ms].append(r.mean_pdr)
    g_series = {p: [(x, max((v for v in vs if v is not None), default=0.0) / 1e3) for x, vs in d.items()] for p, d in goodput.items()}
    p_series = {p: [(x, _mean(vs)) for x, vs in d.items()] for p, d in pdr.items()}
    files.append(_write(out_dir / "goodput_vs_period.svg", line_chart("Maximum goodput", "kbit/s", g_series)))
    files.append(_write(out_dir / "pdr_vs_period.svg", line_chart("Mean packet delivery rate", "PDR", p_series)))
    return files


def _write(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


# -- entry point -------------------------------------------------------------------

def emit(records: list[KpiRecord], fmt: str, out_dir: str | Path, stem: str = "results") -> list[Path]:
    if not records:
        raise ReportError("no records to emit")
    if fmt not in FORMATS:
        raise ReportError(f"unknown format {fmt!r}; expected one of {', '.join(FORMATS)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        return [write_csv(records, out_dir / f"{stem}.csv")]
    if fmt == "json":
        return [write_json(records, out_dir / f"{stem}.json")]
    return write_svgs(records, out_dir)
