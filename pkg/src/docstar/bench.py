"""Desk-scale comparison of the padded and optimized layouts.

For each corpus shape and layout the harness runs a handful of queries on an
in-process cluster and records, per phase, wall time, bytes on the wire
(client and server-to-server), client round trips, and the number of table
cells each server reads. Results go to a CSV file and a bar chart.
"""

from __future__ import annotations

import csv
import random
import time
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

from .client import Client
from .datamodel import build_structures, share_structures
from .datamodel.build import DeployParams
from .errors import NoAccessOrAbsent
from .field import FieldRng
from .server import ServerNode
from .synth import skewed_corpus
from .transport.loopback import LocalCluster, TrafficMeter

PHASES = ("phase1", "phase2", "phase3")
LAYOUTS = ("padded", "optimized")
FIELDS = (
    "skew", "layout", "phase", "queries", "wall_ms", "bytes", "client_bytes", "server_bytes",
    "elements", "rounds", "scanned_cells",
)


@dataclass
class BenchConfig:
    keywords: int = 500
    hot_files: int = 500
    cold_max: int = 5
    queries: int = 3
    clients: int = 2
    seed: int = 7


def scanned_cells(params: DeployParams, phase: str) -> int:
    """Table cells one server multiplies through in ``phase`` of a single query."""
    b = params.columns
    if phase == "phase1":
        return 2 * b
    if phase == "phase2":
        if params.layout == "padded":
            return b + b * (params.slots + 2)
        return b + 4 * b + 2 * params.x * params.y
    width = 1 + params.ap_width + 1 + params.eta + 1
    return params.gamma * params.records * width + params.gamma * 2 * b


def _queries(corpus, count: int, hot: bool, rng: random.Random) -> list[str]:
    if hot:
        return [corpus.keywords[0]] * count
    return [rng.choice(corpus.keywords[1:] or corpus.keywords) for _ in range(count)]


def bench_layout(corpus, layout: str, keywords: list[str], seed: int) -> dict[str, dict]:
    """Per-phase totals over ``keywords`` for one layout."""
    structures = build_structures(corpus, layout, 0, seed=b"bench-%d" % seed)
    meter = TrafficMeter()
    nodes = [ServerNode(b, rng=FieldRng(seed * 10 + b.server_index))
             for b in share_structures(structures, FieldRng(seed))]
    cluster = LocalCluster(nodes, meter)
    client = Client(corpus.clients[0][0], cluster, rng=FieldRng(seed + 1))
    params = nodes[0].params
    wall: dict[str, float] = defaultdict(float)
    request = cluster.request

    def timed(frames):
        from .transport.loopback import PHASE_OF

        phase = PHASE_OF.get(next(iter(frames.values())).msg_type, "admin")
        start = time.perf_counter()
        try:
            return request(frames)
        finally:
            wall[phase] += time.perf_counter() - start

    cluster.request = timed
    for kw in keywords:
        try:
            client.run_query(kw)
        except NoAccessOrAbsent:
            pass
    out = {}
    for phase in PHASES:
        c2s = meter.bytes.get((phase, "c2s"), 0)
        s2c = meter.bytes.get((phase, "s2c"), 0)
        s2s = meter.bytes.get((phase, "s2s"), 0)
        elements = sum(meter.elements.get((phase, d), 0) for d in ("c2s", "s2c", "s2s"))
        out[phase] = {
            "wall_ms": 1000 * wall[phase] / len(keywords),
            "bytes": (c2s + s2c + s2s) / len(keywords),
            "client_bytes": (c2s + s2c) / len(keywords),
            "server_bytes": s2s / len(keywords),
            "elements": elements / len(keywords),
            "rounds": meter.rounds.get(phase, 0) / len(keywords),
            "scanned_cells": scanned_cells(params, phase),
        }
    return out


def run_bench(config: BenchConfig, skews=("high", "uniform")) -> list[dict]:
    rows = []
    for skew in skews:
        rng = random.Random(config.seed)
        corpus = skewed_corpus(rng, n_keywords=config.keywords, hot_files=config.hot_files,
                               cold_max=config.cold_max, uniform=skew == "uniform", clients=config.clients)
        keywords = _queries(corpus, config.queries, skew == "high", rng)
        for layout in LAYOUTS:
            result = bench_layout(corpus, layout, keywords, config.seed)
            for phase in PHASES:
                rows.append({"skew": skew, "layout": layout, "phase": phase,
                             "queries": len(keywords), **result[phase]})
    return rows


def write_csv(rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (round(v, 3) if isinstance(v, float) else v) for k, v in row.items()})
    return path


def plot(rows: list[dict], path: str | Path) -> Path:
    """Phase 2 bytes, rounds and scanned cells for each layout, one panel per metric."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    skews = sorted({r["skew"] for r in rows})
    metrics = (("bytes", "bytes on the wire"), ("rounds", "client round trips"),
               ("scanned_cells", "cells read per server"), ("wall_ms", "wall time (ms)"))
    fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 3.6))
    width = 0.38
    for ax, (key, label) in zip(axes, metrics):
        for k, layout in enumerate(LAYOUTS):
            values = [next(r[key] for r in rows if r["skew"] == s and r["layout"] == layout
                           and r["phase"] == "phase2") for s in skews]
            ax.bar([i + (k - 0.5) * width for i in range(len(skews))], values, width, label=layout)
        ax.set_xticks(range(len(skews)))
        ax.set_xticklabels([f"skew {s}" for s in skews])
        ax.set_title(f"Phase 2 {label}", fontsize=10)
        if key in ("bytes", "scanned_cells"):
            ax.set_yscale("log")
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def format_table(rows: list[dict]) -> str:
    """Tab-delimited table for the terminal."""
    lines = ["\t".join(FIELDS)]
    for row in rows:
        lines.append("\t".join(
            f"{row[k]:.1f}" if isinstance(row[k], float) else str(row[k]) for k in FIELDS
        ))
    return "\n".join(lines)
