"""Files written and read by the commands.

Layout under an output directory::

    solver.json                         Z, r*, b*, S or (s, q_max, eps), plans, channel
    traces/<plan>/<strategy>/seed-NNNN.csv   one row per round
    traces/<plan>/<strategy>/seed-NNNN.json  sidecar: fingerprint, seed, breach counts
    means.csv                           per-group mean curves aligned on t
    reports/<lemma>.csv|json            bound checks

Floats are written with ``repr`` and JSON keys sorted, so the same
inputs give byte-identical files.
"""
from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Mapping, Sequence

from otafl.bounds import BoundReport
from otafl.errors import ConfigError, FingerprintMismatch
from otafl.trainer import TRACE_COLUMNS, RoundRecord, RunTrace

logger = logging.getLogger(__name__)

SOLVER_FILE = "solver.json"
MEANS_FILE = "means.csv"
TRACES_DIR = "traces"
REPORTS_DIR = "reports"
REPORT_COLUMNS = ("T", "measured", "bound", "margin", "stderr")
MEAN_COLUMNS = ("loss", "grad_norm", "min_grad_norm", "gap", "test_loss", "accuracy")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def _optional_float(raw: str) -> float | None:
    return None if raw == "" else float(raw)


def write_json(path: Path, data: Mapping) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_json(path: Path) -> dict:
    return json.loads(path.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------

def trace_path(out_dir: Path, trace: RunTrace) -> Path:
    return out_dir / TRACES_DIR / trace.label / trace.strategy / f"seed-{trace.seed:04d}.csv"


def write_trace(out_dir: Path, trace: RunTrace) -> Path:
    """CSV with the documented header plus the JSON sidecar next to it."""
    path = trace_path(out_dir, trace)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for record in trace.records:
            row = record.row()
            writer.writerow([_fmt(row[c]) for c in TRACE_COLUMNS])
    write_json(path.with_suffix(".json"), {
        "fingerprint": trace.fingerprint,
        "seed": trace.seed,
        "strategy": trace.strategy,
        "label": trace.label,
        "f_star": trace.f_star,
        "g_breaches": trace.g_breaches,
        "theta_breaches": trace.theta_breaches,
        "local_grad_norms": [list(r.local_grad_norms) for r in trace.records],
    })
    return path


def load_trace(path: Path) -> RunTrace:
    path = Path(path)
    meta = read_json(path.with_suffix(".json"))
    norms = meta.get("local_grad_norms", [])
    f_star = meta.get("f_star")
    records = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
            raise ConfigError(f"{path} does not have the trace header {','.join(TRACE_COLUMNS)}")
        for i, row in enumerate(reader):
            records.append(RoundRecord(
                t=int(row["t"]), loss=float(row["loss"]), grad_norm=float(row["grad_norm"]),
                min_grad_norm=float(row["min_grad_norm"]),
                gap=None if f_star is None else float(row["loss"]) - f_star,
                theta_max=float(row["theta_max"]), eta=float(row["eta"]),
                test_loss=_optional_float(row["test_loss"]),
                accuracy=_optional_float(row["accuracy"]),
                local_grad_norms=tuple(norms[i]) if i < len(norms) else ()))
    return RunTrace(seed=int(meta["seed"]), strategy=meta["strategy"], records=records,
                    fingerprint=meta["fingerprint"], label=meta.get("label", ""), f_star=f_star,
                    g_breaches=int(meta.get("g_breaches", 0)),
                    theta_breaches=int(meta.get("theta_breaches", 0)))


def load_traces(trace_dir: Path, fingerprint: str | None = None) -> dict[str, list[RunTrace]]:
    """Traces under ``trace_dir`` grouped as ``plan/strategy``, seeds in order.

    With ``fingerprint`` given, any trace from another config is refused.
    """
    root = Path(trace_dir)
    if (root / TRACES_DIR).is_dir():
        root = root / TRACES_DIR
    groups: dict[str, list[RunTrace]] = {}
    for path in sorted(root.glob("*/*/seed-*.csv")):
        trace = load_trace(path)
        if fingerprint is not None and trace.fingerprint != fingerprint:
            raise FingerprintMismatch(
                f"{path} was produced by config {trace.fingerprint[:12]}, "
                f"expected {fingerprint[:12]}")
        groups.setdefault(f"{trace.label}/{trace.strategy}", []).append(trace)
    for traces in groups.values():
        traces.sort(key=lambda tr: tr.seed)
    return groups


def write_means(out_dir: Path, groups: Mapping[str, Sequence[RunTrace]]) -> Path:
    """One column per (group, metric) mean and its standard error, aligned on t."""
    path = Path(out_dir) / MEANS_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    header, columns, t = ["t"], [], None
    for group in sorted(groups):
        traces = groups[group]
        for name in MEAN_COLUMNS:
            t, mean, stderr = RunTrace.mean_curve(traces, name)
            header += [f"{group}:{name}", f"{group}:{name}_se"]
            columns += [mean, stderr]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        if t is not None:
            for i, step in enumerate(t):
                writer.writerow([int(step)] + [_fmt(float(col[i])) for col in columns])
    return path


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def write_report(out_dir: Path, name: str, report: BoundReport) -> Path:
    directory = Path(out_dir) / REPORTS_DIR
    directory.mkdir(parents=True, exist_ok=True)
    csv_path = directory / f"{name}.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in report.rows():
            writer.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])
    write_json(directory / f"{name}.json", report.to_dict())
    return csv_path
