"""Forward-pass timing across engines and sequence lengths."""

from __future__ import annotations

import csv
import gc
import io
import logging
import statistics
import time
import tracemalloc
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import yaml

from .. import rng
from ..engines import BlockPlan, block_mka_forward, fastmka_forward, reference_causal_mha, symbolic_mka_forward
from ..memory import ChunkStore, chunk_store_from_sequence
from ..tensor import dtype_for
from .config import RunConfig
from .workload import synth_model, synth_workload

log = logging.getLogger(__name__)

CSV_HEADER = ["engine", "seq_len", "batch", "wall_ms_median", "tokens_per_s", "peak_bytes", "seed"]


@dataclass
class BenchRecord:
    engine: str
    seq_len: int
    batch: int
    wall_ms_median: Optional[float]
    tokens_per_s: Optional[float]
    peak_bytes: Optional[int]
    seed: int

    @property
    def skipped(self) -> bool:
        return self.wall_ms_median is None

    def row(self) -> list:
        return [
            self.engine,
            self.seq_len,
            self.batch,
            "" if self.wall_ms_median is None else f"{self.wall_ms_median:.4f}",
            "" if self.tokens_per_s is None else f"{self.tokens_per_s:.2f}",
            "" if self.peak_bytes is None else self.peak_bytes,
            self.seed,
        ]


def _history_store(cfg: RunConfig, width: int) -> Optional[ChunkStore]:
    r = cfg.retrieval
    if not r.enabled:
        return None
    rows = r.history_blocks * cfg.block.b_blk
    seed = rng.derive(cfg.seed, 201, width)
    if rows == 0:
        return ChunkStore(width, r.h_bits, seed, r.top_r)
    hist = synth_workload(seed, 2, rows, width)
    return chunk_store_from_sequence(hist[0], hist[1], cfg.block.b_blk, r.h_bits, seed, r.top_r)


def engine_runner(name: str, cfg: RunConfig, seq_len: int) -> Callable[[np.ndarray], np.ndarray]:
    """Closure running engine ``name`` on a ``[batch, seq_len, D]`` input."""
    dtype = dtype_for(cfg.precision)
    dims = cfg.model_dims()
    proj, gp = synth_model(cfg.seed, dims.d_model, dtype)
    mode = cfg.summary_mode()
    policy = cfg.routing_policy()
    b = cfg.block
    if name == "mha":
        return lambda x: reference_causal_mha(x, proj, dims)
    if name == "symbolic_mka":
        store = _history_store(cfg, dims.d_model)
        return lambda x: symbolic_mka_forward(x, proj, gp, dims, mode, store, policy)[0]
    if name == "fastmka":
        store = _history_store(cfg, dims.d_model)
        return lambda x: fastmka_forward(x, proj, gp, dims, mode, store, policy=policy)[0]
    if name == "block_mka_local":
        plan = BlockPlan(seq_len, b.b_blk, b.tau, "local", b.window, pad=True)
        return lambda x: block_mka_forward(x, proj, dims, plan)
    if name == "block_mka_global":
        plan = BlockPlan(seq_len, b.b_blk, b.tau, "global", pad=True)
        store = _history_store(cfg, dims.d_head)
        return lambda x: block_mka_forward(x, proj, dims, plan, store)
    raise ValueError(f"unknown engine {name!r}")


def time_engine(fn: Callable, x: np.ndarray, repeats: int, warmup: int) -> float:
    """Median wall time in milliseconds over ``repeats`` runs after ``warmup`` runs."""
    for _ in range(warmup):
        fn(x)
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(x)
        samples.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(samples)


def peak_bytes(fn: Callable, x: np.ndarray) -> int:
    gc.collect()
    tracemalloc.start()
    try:
        fn(x)
        return tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()


def run_bench(cfg: RunConfig, progress: Optional[Callable[[str], None]] = None) -> list[BenchRecord]:
    """Time every (engine, seq_len) pair sequentially; out-of-memory points are recorded as skipped."""
    records = []
    dtype = dtype_for(cfg.precision)
    for seq_len in cfg.seq_lens:
        x = synth_workload(rng.derive(cfg.seed, 301), cfg.batch, seq_len, cfg.dims.d_model, dtype)
        for name in cfg.engines:
            try:
                fn = engine_runner(name, cfg, seq_len)
                ms = time_engine(fn, x, cfg.repeats, cfg.warmup)
                peak = peak_bytes(fn, x) if cfg.measure_memory else None
                rec = BenchRecord(name, seq_len, cfg.batch, ms, cfg.batch * seq_len / (ms / 1e3), peak, cfg.seed)
            except MemoryError:
                log.warning("out of memory: %s at seq_len=%d, skipped", name, seq_len)
                rec = BenchRecord(name, seq_len, cfg.batch, None, None, None, cfg.seed)
            records.append(rec)
            if progress:
                status = "skipped (out of memory)" if rec.skipped else f"{rec.wall_ms_median:10.2f} ms"
                progress(f"{name:<18} S={seq_len:<6d} {status}")
    return records


def write_csv(records: list[BenchRecord], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow(r.row())


def _lookup(records: list[BenchRecord]) -> dict:
    return {(r.engine, r.seq_len): r.wall_ms_median for r in records if not r.skipped}


def speedup(records: list[BenchRecord], engine: str, baseline: str, seq_len: int) -> Optional[float]:
    t = _lookup(records)
    if (engine, seq_len) in t and (baseline, seq_len) in t:
        return t[(baseline, seq_len)] / t[(engine, seq_len)]
    return None


def doubling_ratios(records: list[BenchRecord], engine: str) -> dict[int, float]:
    """``time(2N) / time(N)`` keyed by ``N`` for every measured doubling."""
    t = _lookup(records)
    return {
        n: t[(engine, 2 * n)] / t[(engine, n)]
        for (e, n) in sorted(t)
        if e == engine and (engine, 2 * n) in t
    }


def _fmt(v: Optional[float], fmt: str = ".2f") -> str:
    return "-" if v is None else format(v, fmt)


def render_report(cfg: RunConfig, records: list[BenchRecord]) -> str:
    engines = list(dict.fromkeys(r.engine for r in records))
    lens = sorted({r.seq_len for r in records})
    t = _lookup(records)
    out = io.StringIO()
    w = out.write
    w("# MKA engine benchmark\n\n")
    w("Forward pass only (no backward), CPU/numpy, wall time is the median of "
      f"{cfg.repeats} runs after {cfg.warmup} warmups. Ratios compare engines on this "
      "machine; they are not comparable to GPU training throughput.\n\n")
    w("## Configuration\n\n```yaml\n")
    w(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    w("```\n\n## Wall time (ms)\n\n")
    w("| seq_len | " + " | ".join(engines) + " |\n")
    w("|---:|" + "---:|" * len(engines) + "\n")
    for n in lens:
        w(f"| {n} | " + " | ".join(_fmt(t.get((e, n))) for e in engines) + " |\n")
    w("\n## Throughput (tokens/s)\n\n")
    w("| seq_len | " + " | ".join(engines) + " |\n")
    w("|---:|" + "---:|" * len(engines) + "\n")
    tps = {(r.engine, r.seq_len): r.tokens_per_s for r in records}
    for n in lens:
        w(f"| {n} | " + " | ".join(_fmt(tps.get((e, n)), ".0f") for e in engines) + " |\n")
    for baseline in ("symbolic_mka", "mha"):
        if baseline not in engines:
            continue
        w(f"\n## Speedup vs {baseline}\n\n")
        w("| engine | " + " | ".join(str(n) for n in lens) + " |\n")
        w("|---|" + "---:|" * len(lens) + "\n")
        for e in engines:
            w(f"| {e} | " + " | ".join(_fmt(speedup(records, e, baseline, n)) for n in lens) + " |\n")
    w("\n## Doubling ratio time(2N)/time(N)\n\n")
    w("About 2 means linear scaling in N, about 4 quadratic.\n\n")
    w("| engine | " + " | ".join(f"{n}->{2 * n}" for n in lens if 2 * n in lens) + " |\n")
    w("|---|" + "---:|" * sum(1 for n in lens if 2 * n in lens) + "\n")
    for e in engines:
        ratios = doubling_ratios(records, e)
        w(f"| {e} | " + " | ".join(_fmt(ratios.get(n)) for n in lens if 2 * n in lens) + " |\n")
    peaks = {(r.engine, r.seq_len): r.peak_bytes for r in records}
    if any(v is not None for v in peaks.values()):
        w("\n## Peak traced allocation (MiB)\n\n")
        w("| seq_len | " + " | ".join(engines) + " |\n")
        w("|---:|" + "---:|" * len(engines) + "\n")
        for n in lens:
            cells = [None if peaks.get((e, n)) is None else peaks[(e, n)] / 2**20 for e in engines]
            w(f"| {n} | " + " | ".join(_fmt(c, ".1f") for c in cells) + " |\n")
    skipped = [r for r in records if r.skipped]
    if skipped:
        w("\nSkipped (out of memory): " + ", ".join(f"{r.engine}@{r.seq_len}" for r in skipped) + "\n")
    return out.getvalue()


def bench(cfg: RunConfig, out_dir: Optional[Path] = None, progress=None) -> tuple[list[BenchRecord], str]:
    records = run_bench(cfg, progress)
    report = render_report(cfg, records)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_csv(records, out_dir / "results.csv")
        (out_dir / "report.md").write_text(report)
    return records, report
