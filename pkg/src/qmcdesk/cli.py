"""Command-line entry point: ``qmcdesk <subcommand>``."""
from __future__ import annotations

import argparse
import json
import math
import signal
import sys
import threading
import time
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .slater import DEFAULT_VARIANT, VARIANTS, fit_exponent, scaling_probe
from .store import KeyMismatchError, Store, StoreError, block_statistics, merge_stores
from .wffile import WavefunctionFileError, canonicalize

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_KEY_MISMATCH = 3
EXIT_COLLAPSE = 4
EXIT_NO_RECORDS = 5


def _fail(code: int, msg: str) -> int:
    print(f"qmcdesk: {msg}", file=sys.stderr)
    return code


# -- init / report / merge / probe -------------------------------------------
def cmd_init(args) -> int:
    try:
        wf_text = canonicalize(Path(args.wavefunction).read_text())
    except OSError as exc:
        return _fail(EXIT_CONFIG, f"cannot read {args.wavefunction}: {exc}")
    except WavefunctionFileError as exc:
        return _fail(EXIT_CONFIG, f"{args.wavefunction}: {exc}")
    try:
        store = Store.create(args.store, wf_text, args.mode, args.tau, args.precision)
    except KeyMismatchError as exc:
        return _fail(EXIT_KEY_MISMATCH, str(exc))
    except (StoreError, ValueError) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    print(f"store {store.path} key {store.key_hex} mode {store.mode} tau {store.tau:g} precision {store.precision}")
    return EXIT_OK


def _fmt_err(stats) -> str:
    return "undefined" if math.isnan(stats.error) else f"{stats.error:.6e}"


def report_text(store: Store, level: str = "summary") -> str:
    recs = store.records()
    stats = block_statistics(recs)
    lines = [f"store {store.path}", f"key {store.key_hex} mode {store.mode} tau {store.tau:g} "
             f"precision {store.precision}"]
    if not recs:
        lines.append("0 blocks")
        return "\n".join(lines)
    steps = sum(r["steps"] for r in recs)
    truncated = sum(bool(r.get("truncated")) for r in recs)
    clamped = sum(r.get("clamped", 0) for r in recs)
    acc = sum(r.get("accepted", 0) for r in recs)
    prop = sum(r.get("proposed", 0) for r in recs)
    lines += [
        f"{stats.n_blocks} blocks ({truncated} truncated), {steps} steps",
        f"energy {stats.energy:.12g} +/- {_fmt_err(stats)}",
        f"variance {stats.variance:.6e}",
        f"acceptance {acc / prop:.6f}" if prop else "acceptance n/a",
        f"clamped weights {clamped}",
    ]
    if level in ("blocks", "full"):
        lines.append("record_id\tsteps\ttruncated\tenergy\tsum_w")
        for r in recs:
            e = r["sum_we"] / r["sum_w"]
            lines.append(f"{r['record_id']}\t{r['steps']}\t{int(bool(r.get('truncated')))}\t{e:.12g}\t{r['sum_w']:.6g}")
    if level == "full":
        runs = store.runs()
        lines.append(f"{len(runs)} runs")
        for run in runs:
            lines.append(json.dumps(run, sort_keys=True))
        counters = {}
        for r in recs:
            for k, v in r.get("counters", {}).items():
                counters[k] = counters.get(k, 0) + v
        for k in sorted(counters):
            lines.append(f"counter {k} {counters[k]}")
        ck = store.load_walkers()
        lines.append(f"checkpoint walkers {0 if ck is None else len(ck[0])}")
    return "\n".join(lines)


def cmd_report(args) -> int:
    try:
        store = Store.open(args.store)
    except (OSError, StoreError) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    print(report_text(store, args.level))
    return EXIT_OK


def cmd_merge(args) -> int:
    try:
        out = merge_stores(args.a, args.b, args.out)
    except KeyMismatchError as exc:
        return _fail(EXIT_KEY_MISMATCH, str(exc))
    except (OSError, StoreError) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    print(f"merged into {out.path}: {len(out.records())} blocks, key {out.key_hex}")
    return EXIT_OK


def cmd_probe(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")]
    if len(sizes) < 2 or min(sizes) < 1:
        return _fail(EXIT_CONFIG, "need at least two positive sizes")
    rows = scaling_probe(sizes, family=args.family, variant=args.variant, seed=args.seed)
    print("N\tn_basis\tmean_nnz\tmultiply_adds\tinversion_flops")
    for r in rows:
        print(f"{r['N']}\t{r['n_basis']}\t{r['mean_nnz']:.3f}\t{r['multiply_adds']}\t{r['inversion_flops']}")
    ns = [r["N"] for r in rows]
    print(f"# product exponent {fit_exponent(ns, [r['multiply_adds'] for r in rows]):.4f}")
    print(f"# inversion exponent {fit_exponent(ns, [r['inversion_flops'] for r in rows]):.4f}")
    return EXIT_OK


# -- run ---------------------------------------------------------------------
def build_config(args) -> RunConfig:
    cfg = load_config(args.config, args.set or [])
    for name in ("store", "mode", "tau", "precision", "walkers", "steps", "wall_seconds", "target_error",
                 "max_blocks", "forwarders", "seed", "variant"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    if args.workers is not None:
        cfg.workers_per_forwarder = args.workers
    return cfg.validate()


def cmd_run(args) -> int:
    from .runtime.manager import run_local

    try:
        cfg = build_config(args)
        # mode, tau and precision default to the store's when not given explicitly
        store = Store.open(cfg.store)
    except (ConfigError, OSError, StoreError) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    explicit = set(_explicit_keys(args))
    for name in ("mode", "tau", "precision"):
        if name not in explicit:
            setattr(cfg, name, getattr(store, name))
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    try:
        out = run_local(cfg, stop_event=stop, verbose=args.verbose)
    except KeyMismatchError as exc:
        return _fail(EXIT_KEY_MISMATCH, str(exc))
    print(out.text())
    if out.exit_code == EXIT_COLLAPSE:
        print("population collapse detected", file=sys.stderr)
    elif out.exit_code == EXIT_NO_RECORDS:
        print("no block records were produced", file=sys.stderr)
    return out.exit_code


def _explicit_keys(args):
    keys = [n for n in ("mode", "tau", "precision") if getattr(args, n, None) is not None]
    keys += [item.split("=", 1)[0].strip() for item in (args.set or []) if "=" in item]
    if args.config:
        for raw in Path(args.config).read_text().splitlines():
            line = raw.split("#", 1)[0]
            if "=" in line:
                keys.append(line.split("=", 1)[0].strip())
    return keys


# -- single-role processes -----------------------------------------------------
def cmd_serve(args) -> int:
    from .runtime.server import DataServer

    try:
        store = Store.open(args.store)
    except (OSError, StoreError) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    params = json.loads(Path(args.params).read_text()) if args.params else {}
    run_id = args.run_id or time.strftime("%Y%m%dT%H%M%S")
    srv = DataServer(store, args.bind, run_id, params, log_dir=args.log_dir, n_kept=args.n_kept,
                     shutdown_grace=args.shutdown_grace, shutdown_timeout=args.shutdown_timeout)
    return srv.run()


def cmd_forward(args) -> int:
    from .runtime.forwarder import Forwarder

    lo, hi = (float(x) for x in args.idle_flush.split(","))
    fwd = Forwarder(args.node_id, args.server, args.listen,
                    parents=[p for p in (args.parents or "").split(",") if p],
                    workers=args.workers, log_dir=args.log_dir, network_timeout=args.network_timeout,
                    rpc_timeout=args.rpc_timeout, restart_workers=args.restart_workers,
                    max_restarts=args.max_restarts, n_kept=args.n_kept,
                    combine_interval=args.combine_interval, idle_flush=(lo, hi))
    return fwd.run()


def cmd_work(args) -> int:
    from .runtime.worker import run_worker

    return run_worker(args.input, args.worker_id, restart=args.restart, first_block=args.first_block,
                      log_dir=args.log_dir)


# -- parser --------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qmcdesk", description="Desk-scale quantum Monte Carlo engine.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", help="validate a wavefunction file and create a results store")
    s.add_argument("wavefunction")
    s.add_argument("store")
    s.add_argument("--mode", choices=("vmc", "dmc"), default="dmc")
    s.add_argument("--tau", type=float, default=0.01)
    s.add_argument("--precision", choices=("mixed", "double"), default="mixed")
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("run", help="run server, forwarders and workers on this host until a stop condition")
    s.add_argument("store", nargs="?")
    s.add_argument("--config", help="key=value config file")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    s.add_argument("--mode", choices=("vmc", "dmc"))
    s.add_argument("--tau", type=float)
    s.add_argument("--precision", choices=("mixed", "double"))
    s.add_argument("--walkers", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--wall-seconds", dest="wall_seconds", type=float)
    s.add_argument("--target-error", dest="target_error", type=float)
    s.add_argument("--max-blocks", dest="max_blocks", type=int)
    s.add_argument("--forwarders", type=int)
    s.add_argument("--workers", type=int, help="workers per forwarder")
    s.add_argument("--seed", type=int)
    s.add_argument("--variant", choices=VARIANTS)
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("report", help="print results held in a store")
    s.add_argument("store")
    s.add_argument("--level", choices=("summary", "blocks", "full"), default="summary")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("merge", help="merge two stores with the same critical key")
    s.add_argument("a")
    s.add_argument("b")
    s.add_argument("out")
    s.set_defaults(func=cmd_merge)

    s = sub.add_parser("probe", help="operation counts of the determinant kernels along a system family")
    s.add_argument("--sizes", default="64,128,256,512")
    s.add_argument("--variant", choices=VARIANTS, default=DEFAULT_VARIANT)
    s.add_argument("--family", choices=("chain", "dense"), default="chain")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("serve", help="run the data server only")
    s.add_argument("--store", required=True)
    s.add_argument("--bind", default="0.0.0.0:7600")
    s.add_argument("--run-id")
    s.add_argument("--params", help="JSON file with sampling parameters")
    s.add_argument("--log-dir")
    s.add_argument("--n-kept", type=int, default=1000)
    s.add_argument("--shutdown-grace", type=float, default=10.0)
    s.add_argument("--shutdown-timeout", type=float, default=60.0)
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("forward", help="run one forwarder and its workers")
    s.add_argument("--node-id", type=int, required=True)
    s.add_argument("--server", required=True)
    s.add_argument("--listen", required=True)
    s.add_argument("--parents", help="comma-separated ancestor endpoints, nearest first")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--log-dir")
    s.add_argument("--network-timeout", type=float, default=60.0)
    s.add_argument("--rpc-timeout", type=float, default=10.0)
    s.add_argument("--restart-workers", action="store_true")
    s.add_argument("--max-restarts", type=int, default=3)
    s.add_argument("--n-kept", type=int, default=1000)
    s.add_argument("--combine-interval", type=float, default=0.5)
    s.add_argument("--idle-flush", default="5,15", help="min,max seconds between idle walker flushes")
    s.set_defaults(func=cmd_forward)

    s = sub.add_parser("work", help="run one worker (frames on stdout)")
    s.add_argument("--input", required=True)
    s.add_argument("--worker-id", type=int, required=True)
    s.add_argument("--restart", type=int, default=0)
    s.add_argument("--first-block", type=int, default=1)
    s.add_argument("--log-dir")
    s.set_defaults(func=cmd_work)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except KeyMismatchError as exc:
        return _fail(EXIT_KEY_MISMATCH, str(exc))


if __name__ == "__main__":
    sys.exit(main())
