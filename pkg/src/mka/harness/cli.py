"""``mka`` command line: ``verify``, ``bench`` and ``snapshot-store``.

Exit codes: 0 success, 1 property failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import tempfile
from pathlib import Path

from .. import rng
from ..memory import ChunkStore
from .bench import bench, doubling_ratios, speedup
from .config import ConfigError, load_config
from .verify import PROPERTIES, results_json, verify

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mka", description="Memory-keyed attention verification and benchmarks")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run every property suite")
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=["single", "double"])
    p.add_argument("--out", type=Path, default=Path("."), help="directory for verify.json")
    p.add_argument("--only", type=_str_list, help=f"subset of: {', '.join(PROPERTIES)}")

    p = sub.add_parser("bench", help="time engines across sequence lengths")
    p.add_argument("--config", type=Path)
    p.add_argument("--engines", type=_str_list)
    p.add_argument("--seq-lens", type=_int_list)
    p.add_argument("--out", type=Path, default=Path("bench_out"))
    p.add_argument("--seed", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--precision", choices=["single", "double"])

    p = sub.add_parser("snapshot-store", help="round-trip a chunk-store snapshot file")
    p.add_argument("--in", dest="src", type=Path, required=True)
    p.add_argument("--out", dest="dst", type=Path, required=True)
    p.add_argument("--top-r", type=int, default=8)
    p.add_argument("--probes", type=int, default=32, help="random queries compared before/after")
    return parser


def cmd_verify(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed, "precision": args.precision})
    if args.only:
        unknown = set(args.only) - set(PROPERTIES)
        if unknown:
            raise ConfigError(f"unknown properties: {', '.join(sorted(unknown))}")
    results = verify(cfg, args.only, log=print)
    payload = results_json(cfg, results)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "verify.json").write_text(json.dumps(payload, indent=2))
    n_fail = sum(not r.passed for r in results)
    print(f"{len(results) - n_fail}/{len(results)} properties passed")
    return EXIT_OK if n_fail == 0 else EXIT_FAIL


def cmd_bench(args) -> int:
    cfg = load_config(
        args.config,
        {
            "engines": args.engines,
            "seq_lens": args.seq_lens,
            "seed": args.seed,
            "repeats": args.repeats,
            "precision": args.precision,
        },
    )
    records, _ = bench(cfg, args.out, progress=print)
    lens = sorted({r.seq_len for r in records})
    for n in lens:
        ratio = speedup(records, "fastmka", "symbolic_mka", n)
        if ratio is not None:
            print(f"fastmka speedup vs symbolic_mka at S={n}: {ratio:.2f}x")
    for engine in ("mha", "block_mka_local"):
        for n, ratio in doubling_ratios(records, engine).items():
            print(f"{engine} doubling ratio {n}->{2 * n}: {ratio:.2f}")
    print(f"wrote {args.out / 'results.csv'} and {args.out / 'report.md'}")
    return EXIT_OK


def cmd_snapshot(args) -> int:
    try:
        store = ChunkStore.load(args.src, top_r=args.top_r)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load snapshot {args.src}: {exc}") from exc
    store.save(args.dst)
    reloaded = ChunkStore.load(args.dst, top_r=args.top_r)
    with tempfile.TemporaryDirectory() as tmp:
        again = Path(tmp) / "again.bin"
        reloaded.save(again)
        same_bytes = args.src.read_bytes() == args.dst.read_bytes() == again.read_bytes()
    probes = rng.normal(rng.derive(store.seed, 401), (args.probes, store.d))
    same_hits = all(
        [(c.chunk_id, h) for c, h in store.retrieve(q)] == [(c.chunk_id, h) for c, h in reloaded.retrieve(q)]
        for q in probes
    )
    print(f"chunks={len(store)} d={store.d} h_bits={store.h_bits} bytes_identical={same_bytes} retrieval_identical={same_hits}")
    return EXIT_OK if same_bytes and same_hits else EXIT_FAIL


COMMANDS = {"verify": cmd_verify, "bench": cmd_bench, "snapshot-store": cmd_snapshot}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
