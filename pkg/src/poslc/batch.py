"""Batch orchestration: one process per run, one writer for every output file."""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from . import engine
from .config import Scenario
from .engine import ProbeSchedule
from .lottery import ProtocolParams
from .parallel import run_parallel, write_merged_csv


def format_float(x: float) -> str:
    return format(x, ".17g")


def json_line(row: dict) -> str:
    """One JSON object per line with floats at 17 significant digits."""
    parts = []
    for key, val in row.items():
        if isinstance(val, bool) or val is None:
            text = json.dumps(val)
        elif isinstance(val, float):
            text = format_float(val) if math.isfinite(val) else "null"
        elif isinstance(val, int):
            text = str(val)
        else:
            text = json.dumps(val)
        parts.append(f"{json.dumps(key)}: {text}")
    return "{" + ", ".join(parts) + "}"


@dataclass
class RunOutput:
    gridpoint: str
    seed: int
    csv_text: str
    summary: dict


def run_one(gridpoint: str, params: ProtocolParams, probes: ProbeSchedule) -> RunOutput:
    row = {"gridpoint": gridpoint, "seed": params.seed}
    row.update({k: getattr(params, k) for k in ProtocolParams.field_names() if k != "seed"})
    if params.parallel_m > 1:
        res = run_parallel(params, probe_interval=probes.interval)
        first = res.honest_ids[0]
        buf = io.StringIO()
        write_merged_csv(res.merged[first], buf)
        text = buf.getvalue()
        row["committed_rate"] = res.committed_rate()
        row["tmax"] = res.merged[first].tmax
    else:
        trace = engine.run(params, probes)
        text = engine.trace_csv_text(trace)
        row.update(engine.metrics(trace))
        row["safe"] = bool(engine.check_safety(trace))
        row["onset"] = trace.onset
    row["sha256"] = hashlib.sha256(text.encode()).hexdigest()
    return RunOutput(gridpoint, params.seed, text, row)


def _job(args):
    return run_one(*args)


def run_scenario(sc: Scenario, out_dir: str | None = None, seed: int | None = None, jobs: int = 1) -> list[dict]:
    """Run every (gridpoint, replication); write traces and append summary rows in run order."""
    out_dir = out_dir or sc.out_dir
    os.makedirs(out_dir, exist_ok=True)
    tasks = [(label, params, sc.probes) for label, params in sc.runs(seed)]
    summary_path = os.path.join(out_dir, "summary.jsonl")
    rows = []
    if jobs > 1:
        pool = ProcessPoolExecutor(max_workers=jobs)
        results = pool.map(_job, tasks)
    else:
        pool = None
        results = map(_job, tasks)
    try:
        with open(summary_path, "a", encoding="utf-8", newline="\n") as summary:
            for res in results:
                d = os.path.join(out_dir, res.gridpoint)
                os.makedirs(d, exist_ok=True)
                with open(os.path.join(d, f"{res.seed}.csv"), "w", encoding="utf-8", newline="\n") as fh:
                    fh.write(res.csv_text)
                # One write per row keeps each appended line whole.
                summary.write(json_line(res.summary) + "\n")
                summary.flush()
                rows.append(res.summary)
    finally:
        if pool is not None:
            pool.shutdown()
    return rows
