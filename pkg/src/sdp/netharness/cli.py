"""Command-line entry point: benchmarks, race suite, handshake costs, trace decoding."""

from __future__ import annotations

import argparse
import os
import random
import sys
import time
from pathlib import Path

from ..errors import ConfigError
from ..keyx import (
    SdpClient,
    SdpServer,
    ToyCA,
    Resolver,
    Variant,
    handshake,
    publish_ticket,
    rtt_count,
    transcript_steps,
)
from ..transport import CostModel
from .race import race_suite
from .sim import EPOCH, LinkModel, ScenarioConfig, run_scenario, write_csv
from .trace import Trace, dump

BENCH_SIZES = (64, 1024, 8192)
BENCH_CONCURRENCY = (1, 10, 50)
# Default software crypto cost: roughly AES-GCM at a few GB/s on one core.
DEFAULT_PER_BYTE_NS = 0.25
DEFAULT_PER_OP_NS = 500


def _on_off(value: str) -> str:
    if value not in ("on", "off", "both"):
        raise argparse.ArgumentTypeError("expected on, off or both")
    return value


def _variant(value: str) -> str:
    try:
        return Variant(value.upper()).value
    except ValueError:
        raise argparse.ArgumentTypeError(f"unknown variant {value!r}") from None


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mtu", type=int, default=1500)
    p.add_argument("--seed", type=int, default=0, help="overridden by SDP_SEED")
    p.add_argument("--variant", type=_variant, default="INIT_FS")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdp", description="SDP transport simulator and tools")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    b = sub.add_parser("bench", help="run unloaded or concurrent RPC benchmarks")
    b.add_argument("mode", choices=("unloaded", "concurrent"))
    _common(b)
    b.add_argument("--offload", type=_on_off, default="both")
    b.add_argument("--out", help="CSV output path (default: stdout)")
    b.add_argument("--loss", type=float, default=0.0)
    b.add_argument("--reorder", type=float, default=0.0)
    b.add_argument("--concurrency", type=int, action="append")
    b.add_argument("--rpc-size", type=int, action="append")
    b.add_argument("--rpcs", type=int, help="RPCs per row")
    b.add_argument("--delay-us", type=float, default=5.0)
    b.add_argument("--bandwidth-gbps", type=float, default=100.0)
    b.add_argument("--crypto-per-byte-ns", type=float, default=DEFAULT_PER_BYTE_NS)
    b.add_argument("--crypto-per-op-ns", type=int, default=DEFAULT_PER_OP_NS)
    b.add_argument("--offload-per-segment-ns", type=int, default=0)
    b.add_argument("--trace", help="write the packet trace of each row (suffixed when several)")

    r = sub.add_parser("race", help="run the multi-queue race scenarios")
    r.add_argument("scenario_dir", nargs="?", help="directory of scenario JSON (default: built-in)")

    h = sub.add_parser("handshake", help="print step sets, round trips and wall-clock cost per variant")
    h.add_argument("--variant", type=_variant, action="append")
    h.add_argument("--iterations", type=int, default=20)
    h.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("trace-dump", help="decode a binary trace into readable lines")
    t.add_argument("path")
    return parser


def _seed(args) -> int:
    env = os.environ.get("SDP_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise SystemExit(f"SDP_SEED must be an integer, got {env!r}")
    return args.seed


def bench_configs(args) -> list[ScenarioConfig]:
    sizes = args.rpc_size or list(BENCH_SIZES)
    if args.mode == "unloaded":
        concurrency = args.concurrency or [1]
    else:
        concurrency = args.concurrency or list(BENCH_CONCURRENCY)
    offload = {"on": [True], "off": [False], "both": [True, False]}[args.offload]
    seed = _seed(args)
    cost = CostModel(args.crypto_per_op_ns, args.crypto_per_byte_ns, args.offload_per_segment_ns)
    out = []
    for size in sizes:
        for conc in concurrency:
            for off in offload:
                rpcs = args.rpcs or (50 if args.mode == "unloaded" else max(200, 4 * conc))
                link = LinkModel(args.delay_us, args.bandwidth_gbps * 1e9, args.loss, args.reorder, seed=seed)
                out.append(ScenarioConfig(name=args.mode, rpc_size=size, rpcs=rpcs, concurrency=conc,
                                          offload=off, variant=args.variant, mtu=args.mtu, seed=seed,
                                          link=link, cost=cost, trace=bool(args.trace)))
    return out


def cmd_bench(args) -> int:
    configs = bench_configs(args)
    rows = []
    for i, cfg in enumerate(configs):
        result = run_scenario(cfg)
        rows.extend(result.rows)
        if args.trace:
            path = Path(args.trace)
            if len(configs) > 1:
                off = "on" if cfg.offload else "off"
                path = path.with_name(f"{path.stem}-{cfg.rpc_size}-{cfg.concurrency}-{off}{path.suffix}")
            result.trace.save(path)
    text = write_csv(rows, args.out)
    if args.out is None:
        sys.stdout.write(text)
    return 0


def cmd_race(args) -> int:
    for report in race_suite(args.scenario_dir):
        for line in report.lines():
            print(line)
    return 0


def cmd_handshake(args) -> int:
    variants = [Variant(v) for v in (args.variant or [v.value for v in Variant])]
    rng = random.Random(f"handshake:{_seed(args)}")
    for v in variants:
        ca = ToyCA(rng.randbytes)
        resolver = Resolver()
        server = SdpServer("server.sdp", ca, entropy=rng.randbytes, now=EPOCH)
        client = SdpClient(ca.public_key, resolver, entropy=rng.randbytes)
        publish_ticket(server, resolver, EPOCH)
        early = b"" if v is Variant.INIT_1RTT else b"request"
        timings = []
        for _ in range(max(1, args.iterations)):
            if v.resumption:
                handshake(client, server, Variant.INIT_1RTT, now=EPOCH)
            t0 = time.perf_counter()
            t = handshake(client, server, v, early_data=early, now=EPOCH)
            timings.append(time.perf_counter() - t0)
        timings.sort()
        median_us = timings[len(timings) // 2] * 1e6
        print(f"{v.value:<10} rtts={rtt_count(v)} steps={len(transcript_steps(v)):<2} "
              f"median_us={median_us:8.1f} executed={','.join(t.steps_executed)}")
    return 0


def cmd_trace_dump(args) -> int:
    path = Path(args.path)
    if not path.exists():
        print(f"sdp trace-dump: no such file: {path}", file=sys.stderr)
        return 1
    for line in dump(Trace.load(path)):
        print(line)
    return 0


COMMANDS = {"bench": cmd_bench, "race": cmd_race, "handshake": cmd_handshake, "trace-dump": cmd_trace_dump}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"sdp: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
