"""Run metrics: CSV schema, time-to-accuracy analysis, footprint report.

The CSV is the only artifact downstream analysis reads, so floats are
written with repr() to round-trip exactly and absent values are empty
cells, never zeros.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

COLUMNS = (
    "scope",
    "round",
    "pull_s",
    "sample_s",
    "train_s",
    "push_s",
    "round_s",
    "test_accuracy",
    "wall_clock_s",
    "pulled_keys",
    "pushed_keys",
)


@dataclass
class MetricsRow:
    scope: str  # "server" or "client_<id>"
    round: int
    pull_s: float | None = None
    sample_s: float | None = None
    train_s: float | None = None
    push_s: float | None = None
    round_s: float | None = None
    test_accuracy: float | None = None
    wall_clock_s: float | None = None
    pulled_keys: int | None = None
    pushed_keys: int | None = None


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics(rows: list, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow([_cell(getattr(r, col)) for col in COLUMNS])


def read_metrics(path: str | Path) -> list:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != COLUMNS:
            raise ValueError(f"unexpected metrics header in {path}")
        for rec in reader:
            vals = dict(zip(COLUMNS, rec))
            rows.append(
                MetricsRow(
                    scope=vals["scope"],
                    round=int(vals["round"]),
                    pull_s=_opt_float(vals["pull_s"]),
                    sample_s=_opt_float(vals["sample_s"]),
                    train_s=_opt_float(vals["train_s"]),
                    push_s=_opt_float(vals["push_s"]),
                    round_s=_opt_float(vals["round_s"]),
                    test_accuracy=_opt_float(vals["test_accuracy"]),
                    wall_clock_s=_opt_float(vals["wall_clock_s"]),
                    pulled_keys=_opt_int(vals["pulled_keys"]),
                    pushed_keys=_opt_int(vals["pushed_keys"]),
                )
            )
    return rows


def _opt_float(s: str):
    return None if s == "" else float(s)


def _opt_int(s: str):
    return None if s == "" else int(s)


def server_curve(rows: list) -> list:
    """(round, wall_clock_s, test_accuracy) for server rows, by round."""
    pts = [
        (r.round, r.wall_clock_s, r.test_accuracy)
        for r in rows
        if r.scope == "server" and r.test_accuracy is not None
    ]
    pts.sort(key=lambda p: p[0])
    return pts


@dataclass
class TtaRun:
    path: str
    peak: float
    tta_s: float | None  # wall-clock seconds to first reach the nominal accuracy


@dataclass
class TtaResult:
    nominal: float
    runs: list
    # speedup of each run relative to the first: tta[first] / tta[run]
    ratios: list


def analyze_tta(paths: list, nominal: float | None = None) -> TtaResult:
    """Time-to-accuracy over server curves.

    The nominal accuracy defaults to the lowest of the runs' peaks minus one
    point, which every run reaches by construction. Passing an explicit
    nominal overrides that; a run that never reaches it gets tta_s None and
    an undefined (None) ratio.
    """
    if not paths:
        raise ValueError("analyze_tta: no metrics files given")
    curves = []
    for p in paths:
        curve = server_curve(read_metrics(p))
        if not curve:
            raise ValueError(f"analyze_tta: no server accuracy rows in {p}")
        curves.append(curve)
    if nominal is None:
        peaks = [max(acc for _r, _w, acc in curve) for curve in curves]
        nominal = min(peaks) - 0.01
    runs = []
    for p, curve in zip(paths, curves):
        tta = None
        for _r, wall, acc in curve:
            if acc >= nominal:
                tta = wall
                break
        runs.append(TtaRun(path=str(p), peak=max(a for _r, _w, a in curve), tta_s=tta))
    base = runs[0].tta_s
    ratios: list = []
    for run in runs:
        if base is None or run.tta_s is None or run.tta_s <= 0:
            ratios.append(None)
        else:
            ratios.append(base / run.tta_s)
    return TtaResult(nominal=nominal, runs=runs, ratios=ratios)


def load_summary(run_dir: str | Path) -> dict:
    with open(Path(run_dir) / "summary.json") as fh:
        return json.load(fh)


def footprint_report(run_dirs: list) -> list:
    """Store occupancy and traffic per finished run directory."""
    out = []
    for d in run_dirs:
        s = load_summary(d)
        out.append(
            {
                "run_dir": str(d),
                "mode": s.get("mode"),
                "retain": s.get("retain"),
                "store_keys_after_pretrain": s.get("store_keys_after_pretrain"),
                "store_bytes_after_pretrain": s.get("store_bytes_after_pretrain"),
                "total_pulled_keys": s.get("total_pulled_keys"),
                "total_pushed_keys": s.get("total_pushed_keys"),
                "peak_test_accuracy": s.get("peak_test_accuracy"),
            }
        )
    return out
