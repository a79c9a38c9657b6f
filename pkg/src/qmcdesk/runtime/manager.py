"""Manager: launches server, forwarder tree and workers on this host and decides when to stop."""
from __future__ import annotations

import json
import math
import os
import secrets
import signal
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from ..config import RunConfig
from ..store import KeyMismatchError, Store, StoreError, block_statistics
from .forwarder import ancestors
from .net import free_port, rpc
from .wire import MsgType

EXIT_OK = 0
EXIT_KEY_MISMATCH = 3
EXIT_COLLAPSE = 4
EXIT_NO_RECORDS = 5


@dataclass
class StopConditions:
    wall_seconds: float | None = None
    target_error: float | None = None
    max_blocks: int | None = None


def manager_loop(store_path, cond: StopConditions, poll_interval: float = 5.0, stop_event=None,
                 run_id: str | None = None, max_failures: int = 5, alive=None, on_poll=None,
                 clock=time.monotonic) -> str:
    """Poll the store until a stop condition fires; returns the reason.

    ``max_blocks`` counts blocks of ``run_id`` only (all blocks if None); the
    error-bar target applies to the running average over the whole store.
    """
    stop_event = stop_event or threading.Event()
    t0 = clock()
    failures = 0
    backoff = poll_interval
    while True:
        if stop_event.wait(0 if clock() - t0 == 0 else min(backoff, poll_interval * 4)):
            return "signal"
        if cond.wall_seconds is not None and clock() - t0 >= cond.wall_seconds:
            return "wall_seconds"
        if alive is not None and not alive():
            return "process_exit"
        try:
            recs = Store.open(store_path).records()
            failures = 0
            backoff = poll_interval
        except (OSError, StoreError):
            failures += 1
            if failures >= max_failures:
                return "store_unreadable"
            backoff = poll_interval * (2 ** failures)
            continue
        mine = recs if run_id is None else [r for r in recs if r.get("run_id") == run_id]
        stats = block_statistics(recs)
        if on_poll is not None:
            on_poll(stats, len(mine))
        if cond.max_blocks is not None and len(mine) >= cond.max_blocks:
            return "max_blocks"
        if cond.target_error is not None and stats.n_blocks >= 2 and stats.error <= cond.target_error:
            return "target_error"
        if cond.wall_seconds is not None and clock() - t0 >= cond.wall_seconds:
            return "wall_seconds"


@dataclass
class RunOutcome:
    exit_code: int
    reason: str
    run_id: str
    energy: float = math.nan
    error: float = math.nan
    blocks: int = 0
    run_blocks: int = 0
    cpu_seconds: float = 0.0
    wall_seconds: float = 0.0
    forwarder_cpu_seconds: float = 0.0
    terminated: int = 0
    log_dir: str = ""
    server_summary: dict = field(default_factory=dict)

    def text(self) -> str:
        err = "undefined" if math.isnan(self.error) else f"{self.error:.3e}"
        return (f"run {self.run_id}: stop={self.reason} exit={self.exit_code}\n"
                f"energy {self.energy:.10g} +/- {err} over {self.blocks} blocks ({self.run_blocks} this run)\n"
                f"t_cpu {self.cpu_seconds:.3f} s  t_wall {self.wall_seconds:.3f} s  "
                f"forwarder_cpu {self.forwarder_cpu_seconds:.3f} s  terminated {self.terminated}")


def _spawn(args, log_path: Path) -> subprocess.Popen:
    err = open(log_path, "ab")
    return subprocess.Popen([sys.executable, "-m", "qmcdesk", *args], stdin=subprocess.DEVNULL,
                            stdout=err, stderr=err, start_new_session=True)


def _killpg(p: subprocess.Popen, sig=signal.SIGKILL) -> None:
    try:
        os.killpg(p.pid, sig)
    except (ProcessLookupError, PermissionError):
        pass


def run_local(cfg: RunConfig, stop_event: threading.Event | None = None, verbose: bool = False,
              on_started=None) -> RunOutcome:
    cfg.validate()
    store = Store.open(cfg.store)
    if (store.mode, store.tau, store.precision) != (cfg.mode, cfg.tau, cfg.precision):
        raise KeyMismatchError(
            f"store {store.key_hex} was initialised for mode={store.mode} tau={store.tau:g} "
            f"precision={store.precision}; config asks mode={cfg.mode} tau={cfg.tau:g} precision={cfg.precision}")
    run_id = time.strftime("%Y%m%dT%H%M%S") + "-" + secrets.token_hex(3)
    log_dir = Path(cfg.log_dir) if cfg.log_dir else store.path / "logs" / run_id
    log_dir.mkdir(parents=True, exist_ok=True)
    stop_event = stop_event or threading.Event()

    per_worker = None
    if cfg.max_blocks is not None:
        per_worker = -(-cfg.max_blocks // cfg.total_workers)
    params = {"walkers": cfg.walkers, "steps": cfg.steps, "warmup_steps": cfg.warmup_steps,
              "window": cfg.window, "variant": cfg.variant, "k_block": cfg.k_block, "seed": cfg.seed,
              "workers_per_node": cfg.workers_per_forwarder, "max_blocks_per_worker": per_worker}
    params_path = log_dir / "params.json"
    params_path.write_text(json.dumps(params, sort_keys=True))

    host = cfg.host
    server_ep = f"{host}:{cfg.server_port or free_port(host)}"
    node_eps = [f"{host}:{free_port(host)}" for _ in range(cfg.forwarders)]
    t_start = time.perf_counter()
    started = time.time()
    server = _spawn(["serve", "--store", str(store.path), "--bind", server_ep, "--run-id", run_id,
                     "--params", str(params_path), "--log-dir", str(log_dir), "--n-kept", str(cfg.n_kept),
                     "--shutdown-grace", str(cfg.shutdown_grace), "--shutdown-timeout", str(cfg.shutdown_timeout)],
                    log_dir / "server.err")
    procs = {"server": server.pid, "forwarders": {}}
    for _ in range(200):
        try:
            rpc(server_ep, MsgType.PING, 0, {}, timeout=1.0)
            break
        except (OSError, EOFError, ValueError):
            if server.poll() is not None:
                break
            time.sleep(0.05)
    forwarders = []
    for nid in range(cfg.forwarders):
        parents = ",".join(node_eps[a] for a in ancestors(nid))
        args = ["forward", "--node-id", str(nid), "--server", server_ep, "--listen", node_eps[nid],
                "--workers", str(cfg.workers_per_forwarder), "--log-dir", str(log_dir),
                "--network-timeout", str(cfg.network_timeout), "--rpc-timeout", str(cfg.rpc_timeout),
                "--n-kept", str(cfg.n_kept), "--combine-interval", str(cfg.combine_interval),
                "--idle-flush", f"{cfg.idle_flush_min},{cfg.idle_flush_max}",
                "--max-restarts", str(cfg.max_restarts)]
        if parents:
            args += ["--parents", parents]
        if cfg.restart_workers:
            args.append("--restart-workers")
        p = _spawn(args, log_dir / f"forwarder-{nid}.err")
        forwarders.append(p)
        procs["forwarders"][nid] = p.pid
    (log_dir / "pids.json").write_text(json.dumps(procs))
    if on_started is not None:
        on_started(log_dir, procs)

    def progress(stats, n):
        if verbose:
            print(f"[{time.perf_counter() - t_start:8.1f} s] blocks={n} E={stats.energy:.8g} "
                  f"err={stats.error:.3g}", file=sys.stderr, flush=True)

    reason = manager_loop(store.path, StopConditions(cfg.wall_seconds, cfg.target_error, cfg.max_blocks),
                          cfg.poll_interval, stop_event, run_id, cfg.max_poll_failures,
                          alive=lambda: server.poll() is None, on_poll=progress)
    if server.poll() is None:
        server.send_signal(signal.SIGTERM)
    try:
        server.wait(cfg.shutdown_timeout + 30)
    except subprocess.TimeoutExpired:
        _killpg(server)
        server.wait()
    t_deadline = time.monotonic() + 30
    for p in forwarders:
        try:
            p.wait(max(0.1, t_deadline - time.monotonic()))
        except subprocess.TimeoutExpired:
            _killpg(p)
            p.wait()
    wall = time.perf_counter() - t_start

    summary_path = store.path / f"server-{run_id}.json"
    summ = json.loads(summary_path.read_text()) if summary_path.exists() else {}
    recs = Store.open(store.path).records()
    mine = [r for r in recs if r.get("run_id") == run_id]
    stats = block_statistics(recs)
    term = summ.get("terminated", {})
    out = RunOutcome(
        exit_code=EXIT_OK, reason=reason, run_id=run_id, energy=stats.energy, error=stats.error,
        blocks=stats.n_blocks, run_blocks=len(mine), cpu_seconds=sum(r["cpu_seconds"] for r in mine),
        wall_seconds=wall, forwarder_cpu_seconds=sum(t.get("cpu_seconds", 0.0) for t in term.values()),
        terminated=len(term), log_dir=str(log_dir), server_summary=summ,
    )
    collapsed = sum(t.get("collapsed", 0) for t in term.values())
    collapsed += sum("collapse" in f.read_text() for f in log_dir.glob("worker-*.log"))
    if collapsed:
        out.exit_code = EXIT_COLLAPSE
    elif not mine:
        out.exit_code = EXIT_NO_RECORDS
    store.record_run({"run_id": run_id, "started": started, "workers": cfg.total_workers,
                      "forwarders": cfg.forwarders, "cpu_seconds": out.cpu_seconds, "wall_seconds": wall,
                      "forwarder_cpu_seconds": out.forwarder_cpu_seconds, "blocks": len(mine),
                      "reason": reason, "exit_code": out.exit_code})
    return out
