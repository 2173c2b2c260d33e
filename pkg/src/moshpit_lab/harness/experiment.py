"""Trial-matrix execution and CSV/JSON reporting."""

from __future__ import annotations

import csv
import io
import json
import subprocess
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..core import FailureModel, GridConfig, Rng
from ..protocols import run_protocol
from .config import ExperimentConfig

CSV_HEADER = ("protocol", "N", "M", "d", "p", "threshold", "mean_rounds", "std_rounds", "trials")
TRIAL_HEADER = ("protocol", "N", "p", "seed", "threshold", "rounds_to", "rounds_executed", "cost_units")


@dataclass(frozen=True)
class ResultRow:
    protocol: str
    N: int
    M: int
    d: int
    p: float
    threshold: float
    mean_rounds: float
    std_rounds: float
    trials: int
    seed_base: int

    def sort_key(self):
        return (self.protocol, self.N, self.p, -self.threshold)


@dataclass(frozen=True)
class TrialRecord:
    protocol: str
    N: int
    p: float
    seed: int
    threshold: float
    rounds_to: int
    rounds_executed: int
    cost_units: float


def trial_rng(seed_base: int, protocol: str, N: int, p: float, seed: int) -> Rng:
    """Independent stream family per (protocol, N, p, seed)."""
    return Rng(seed_base, protocol, int(N), repr(float(p)), int(seed))


def _run_cell(args):
    cfg, protocol, N, p = args
    grid = GridConfig(cfg.M, cfg.d)
    failure = FailureModel(p)
    options = cfg.options.get(protocol, {})
    records = []
    for seed in range(cfg.seeds):
        rng = trial_rng(cfg.seed_base, protocol, N, p, seed)
        report = run_protocol(protocol, N, grid, failure, rng, cap=cfg.cap, thresholds=cfg.thresholds, **options)
        for thr in cfg.thresholds:
            records.append(
                TrialRecord(protocol, N, p, seed, thr, report.rounds_to(thr), report.rounds, report.cost_units)
            )
    return records


def _summarize(cfg: ExperimentConfig, records: list[TrialRecord]) -> list[ResultRow]:
    cells: dict[tuple, list[int]] = {}
    for rec in records:
        cells.setdefault((rec.protocol, rec.N, rec.p, rec.threshold), []).append(rec.rounds_to)
    rows = []
    for (protocol, N, p, thr), rounds in cells.items():
        arr = np.asarray(rounds, dtype=np.float64)
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        rows.append(ResultRow(protocol, N, cfg.M, cfg.d, p, thr, float(arr.mean()), std, arr.size, cfg.seed_base))
    rows.sort(key=ResultRow.sort_key)
    return rows


def run_experiment(cfg: ExperimentConfig) -> tuple[list[ResultRow], list[TrialRecord]]:
    """Run every (protocol, N, p) cell for ``cfg.seeds`` seeds."""
    cfg.validate()
    cells = [(cfg, protocol, N, p) for protocol in cfg.protocols for N in cfg.N for p in cfg.p]
    if cfg.jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            chunks = list(pool.map(_run_cell, cells))
    else:
        chunks = [_run_cell(c) for c in cells]
    records = [rec for chunk in chunks for rec in chunk]
    records.sort(key=lambda r: (r.protocol, r.N, r.p, r.seed, -r.threshold))
    return _summarize(cfg, records), records


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, float):
        return "%.6g" % value
    return str(value)


def rows_to_csv(rows: list[ResultRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in sorted(rows, key=ResultRow.sort_key):
        writer.writerow([_fmt(getattr(row, name)) for name in CSV_HEADER])
    return buf.getvalue()


def records_to_csv(records: list[TrialRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRIAL_HEADER)
    for rec in records:
        writer.writerow([_fmt(getattr(rec, name)) for name in TRIAL_HEADER])
    return buf.getvalue()


def build_id() -> str:
    """``git describe`` of the working tree, or ``"unknown"`` outside git."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True,
            text=True,
            cwd=Path(__file__).resolve().parent,
            timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def write_outputs(cfg: ExperimentConfig, rows: list[ResultRow], records: list[TrialRecord]) -> dict[str, Path]:
    """Write the summary CSV, per-trial CSV and JSON sidecar next to each other."""
    out = Path(cfg.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(rows_to_csv(rows), encoding="utf-8")
        trials = out.with_suffix(".trials.csv")
        trials.write_text(records_to_csv(records), encoding="utf-8")
        sidecar = out.with_suffix(".json")
        meta = {"config": asdict(cfg), "build": build_id(), "csv_header": list(CSV_HEADER)}
        sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write results to {out}: {exc}") from exc
    return {"csv": out, "trials": trials, "json": sidecar}
