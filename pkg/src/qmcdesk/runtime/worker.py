"""Worker process: compute blocks forever, stream them to the forwarder on stdout.

Control arrives as signals (SIGTERM, SIGUSR2, SIGINT) or as a Stop frame /
end-of-file on stdin.  Either way the current block is cut at the next step
boundary and flushed as a truncated block, then the process exits.
"""
from __future__ import annotations

import json
import os
import signal
import sys
import threading
import time
from pathlib import Path

import numpy as np

from ..sampler import PopulationCollapse, Sampler, SamplerParams
from ..store import critical_key, key_hex, make_record_id
from ..wavefunction import TrialWavefunction
from ..wffile import parse_wavefunction
from .pool import entries_from_arrays, entries_to_wire
from .wire import MsgType, read_frame, write_frame

EXIT_KEY_MISMATCH = 3
EXIT_COLLAPSE = 4
STOP_SIGNALS = (signal.SIGTERM, signal.SIGUSR2, signal.SIGINT)


def worker_seed(run_seed: int, worker_id: int, restart: int = 0):
    base = (int(run_seed) ^ int(worker_id)) & 0xFFFFFFFFFFFFFFFF
    return base if restart == 0 else np.random.SeedSequence([base, int(restart)])


def block_record(res, key: int, run_id: str, node_id: int, worker_id: int, block: int) -> dict:
    return {
        "record_id": make_record_id(run_id, node_id, worker_id, block),
        "v": 1,
        "key": key_hex(key),
        "run_id": run_id,
        "node_id": node_id,
        "worker_id": worker_id,
        "block": block,
        "mode": res.mode,
        "tau": res.tau,
        "steps": res.steps,
        "walkers": res.walkers,
        "sum_w": res.sum_w,
        "sum_we": res.sum_we,
        "sum_we2": res.sum_we2,
        "accepted": res.accepted,
        "proposed": res.proposed,
        "clamped": res.clamped,
        "node_rejections": res.node_rejections,
        "e_trial": res.e_trial,
        "truncated": res.truncated,
        "cpu_seconds": res.cpu_seconds,
        "wall_seconds": res.wall_seconds,
        "time": time.time(),
        "counters": res.counters,
    }


class WorkerLog:
    def __init__(self, log_dir, worker_id: int):
        self.fh = None
        if log_dir:
            Path(log_dir).mkdir(parents=True, exist_ok=True)
            self.fh = open(Path(log_dir) / f"worker-{worker_id}.log", "a", buffering=1)

    def write(self, line: str) -> None:
        if self.fh:
            self.fh.write(f"{time.time():.6f} {line}\n")


def run_worker(input_path, worker_id: int, restart: int = 0, first_block: int = 1, log_dir=None,
               out=None, inp=None) -> int:
    bundle = json.loads(Path(input_path).read_text())
    params = bundle["params"]
    key = int(bundle["key"], 16)
    log = WorkerLog(log_dir, worker_id)
    log.write(f"start pid={os.getpid()} restart={restart} first_block={first_block}")
    if critical_key(bundle["wf_text"], params["mode"], params["tau"], params["precision"]) != key:
        log.write("exit key-mismatch")
        return EXIT_KEY_MISMATCH

    stop = threading.Event()
    for sig in STOP_SIGNALS:
        signal.signal(sig, lambda *_: stop.set())

    if out is None:
        # frames own the real stdout; stray prints go to stderr
        out = os.fdopen(os.dup(1), "wb")
        os.dup2(2, 1)
    if inp is None:
        # unbuffered: a buffered reader blocked in a daemon thread aborts interpreter shutdown
        inp = open(sys.stdin.fileno(), "rb", buffering=0, closefd=False)

    def watch_input():
        try:
            while True:
                if read_frame(inp).msg_type == MsgType.STOP:
                    stop.set()
        except Exception:
            stop.set()  # parent gone

    threading.Thread(target=watch_input, daemon=True).start()

    spec = parse_wavefunction(bundle["wf_text"])
    wf = TrialWavefunction(spec, precision=params["precision"], variant=params.get("variant", "blocked"),
                           k_block=params.get("k_block") or 128)
    sp = SamplerParams(mode=params["mode"], tau=params["tau"], steps=params["steps"], walkers=params["walkers"],
                       window=params.get("window", 10))
    start = None
    if bundle.get("walkers"):
        start = np.array([R for _, R in bundle["walkers"]], dtype=np.float64)
        rng = np.random.default_rng(worker_seed(params["seed"], worker_id, restart))
        start = start[rng.permutation(len(start))]
    node_id = int(bundle["node_id"])
    run_id = bundle["run_id"]
    max_blocks = params.get("max_blocks_per_worker")
    try:
        sampler = Sampler(wf, sp, worker_seed(params["seed"], worker_id, restart), start,
                          params.get("warmup_steps", 0), stop.is_set)
        block = first_block
        produced = 0
        while not stop.is_set() and (not max_blocks or produced < max_blocks):
            res = sampler.run_block(stop.is_set)
            if res.steps == 0:
                break
            rec = block_record(res, key, run_id, node_id, worker_id, block)
            try:
                write_frame(out, MsgType.RESULT_BATCH, key, {"records": [rec], "origin": node_id})
                write_frame(out, MsgType.WALKER_LIST, key,
                            {"entries": entries_to_wire(entries_from_arrays(res.final_R, res.final_E)),
                             "origin": node_id})
            except (BrokenPipeError, OSError):
                log.write("exit parent-gone")
                return 0
            log.write(f"sent {rec['record_id']} steps={res.steps} truncated={int(res.truncated)}")
            block += 1
            produced += 1
        while not stop.is_set():
            stop.wait(0.5)
    except PopulationCollapse as exc:
        log.write(f"collapse {exc}")
        return EXIT_COLLAPSE
    log.write("exit stop")
    return 0
