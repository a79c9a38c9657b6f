"""Forwarder: per-host relay in the binary tree of nodes.

Node ``i`` has parent ``(i - 1) // 2``.  Results from local workers and from
child forwarders are combined into one ResultBatch and sent to the first
reachable ancestor, the server being the last resort.  A child's batch is
acknowledged only once the upstream acknowledged it, so an ack means the
records reached the store; duplicates caused by retries are dropped there.
"""
from __future__ import annotations

import json
import os
import random
import signal
import subprocess
import sys
import tempfile
import threading
import time
from pathlib import Path

import numpy as np

from ..store import critical_key
from .net import FrameServer, Unreachable, Upstream, rpc
from .pool import DEFAULT_N_KEPT, entries_from_wire, entries_to_wire, merge_walker_pool
from .wire import MsgType, read_frame, write_frame

EXIT_KEY_MISMATCH = 3
EXIT_UNREACHABLE = 6
SCRATCH_ENV = "QMCDESK_SCRATCH"


def parent_of(node_id: int) -> int | None:
    return None if node_id == 0 else (node_id - 1) // 2


def ancestors(node_id: int) -> list[int]:
    out = []
    while node_id > 0:
        node_id = (node_id - 1) // 2
        out.append(node_id)
    return out


def scratch_root() -> Path:
    env = os.environ.get(SCRATCH_ENV)
    if env:
        return Path(env)
    shm = Path("/dev/shm")
    return shm if shm.is_dir() and os.access(shm, os.W_OK) else Path(tempfile.gettempdir())


class _Pending:
    __slots__ = ("records", "done", "ok")

    def __init__(self, records, done=None):
        self.records = records
        self.done = done
        self.ok = False


class Forwarder:
    def __init__(self, node_id: int, server: str, listen: str, parents=(), workers: int = 1,
                 log_dir=None, network_timeout: float = 60.0, rpc_timeout: float = 10.0,
                 restart_workers: bool = False, max_restarts: int = 3, n_kept: int = DEFAULT_N_KEPT,
                 combine_interval: float = 0.5, idle_flush=(5.0, 15.0), worker_stop_timeout: float = 60.0):
        self.node_id = node_id
        self.server = server
        self.listen = listen
        self.parents = list(parents)
        self.n_workers = workers
        self.log_dir = Path(log_dir) if log_dir else None
        self.network_timeout = network_timeout
        self.rpc_timeout = rpc_timeout
        self.restart_workers = restart_workers
        self.max_restarts = max_restarts
        self.n_kept = n_kept
        self.combine_interval = combine_interval
        self.idle_flush = idle_flush
        self.worker_stop_timeout = worker_stop_timeout

        self.key = 0
        self.bundle = None
        self.input_path = None
        self._cv = threading.Condition()
        self._queue: list[_Pending] = []
        self._inflight = 0
        self._pool = []
        self._pool_lock = threading.Lock()
        self._children: set[int] = set()
        self._stopped_children: set[int] = set()
        self._procs: dict[int, subprocess.Popen] = {}
        self._supervisors: list[threading.Thread] = []
        self.stopping = threading.Event()
        self.shutdown = threading.Event()
        self.fatal = None
        self.worker_cpu = 0.0
        self.records_forwarded = 0
        self.frames_sent = 0
        self.collapsed = 0
        self.rng = np.random.default_rng(node_id)
        self._log = None
        if self.log_dir:
            self.log_dir.mkdir(parents=True, exist_ok=True)
            self._log = open(self.log_dir / f"forwarder-{node_id}.log", "a", buffering=1)

    def log(self, line: str) -> None:
        if self._log:
            self._log.write(f"{time.time():.6f} {line}\n")

    # -- inbound frames from children --------------------------------------
    def handle(self, frame):
        body = frame.body
        mt = frame.msg_type
        if mt == MsgType.PING:
            if "hello" in body:
                with self._cv:
                    self._children.add(int(body["hello"]))
                self.log(f"child {body['hello']} registered")
            return MsgType.PING, {"node_id": self.node_id}
        if mt == MsgType.STOP:
            self._on_stop(body.get("from"))
            return MsgType.PING, {"node_id": self.node_id}
        if self.bundle is None:
            return MsgType.PING, {"accepted": 0, "error": "not ready"}
        if frame.key != self.key:
            self.log(f"rejected frame type {int(mt)} with key {frame.key:08x}")
            return MsgType.PING, {"accepted": 0, "rejected": len(body.get("records", [])), "error": "key mismatch"}
        if mt == MsgType.RESULT_BATCH:
            done = threading.Event()
            item = self._enqueue(body.get("records", []), done)
            if done.wait(self.rpc_timeout * 0.8) and item.ok:
                return MsgType.PING, {"accepted": len(item.records)}
            return MsgType.PING, {"accepted": 0, "error": "upstream not reachable"}
        if mt == MsgType.WALKER_LIST:
            self._merge_pool(entries_from_wire(body.get("entries", [])))
            return MsgType.PING, {"accepted": len(body.get("entries", []))}
        return MsgType.PING, {"error": f"unexpected message type {int(mt)}"}

    def _on_stop(self, origin) -> None:
        if origin == "server":
            self.log("stop from server")
            self.stopping.set()
            return
        with self._cv:
            self._stopped_children.add(int(origin))
            done = self._children <= self._stopped_children
        self.log(f"stop from child {origin}")
        if done:
            self.stopping.set()

    # -- results queue --------------------------------------------------------
    def _enqueue(self, records, done=None) -> _Pending:
        item = _Pending(list(records), done)
        with self._cv:
            self._queue.append(item)
            self._cv.notify_all()
        return item

    def _sender(self) -> None:
        up = Upstream(self.parents + [self.server], self.key, self.rpc_timeout, self.network_timeout)
        while True:
            with self._cv:
                while not self._queue and not self.shutdown.is_set():
                    self._cv.wait(0.5)
                if not self._queue and self.shutdown.is_set():
                    return
            if not self.stopping.is_set():
                time.sleep(self.combine_interval)  # let more blocks arrive
            with self._cv:
                batch, self._queue = self._queue, []
                self._inflight = len(batch)
            records = [r for item in batch for r in item.records]
            try:
                reply = up.call(MsgType.RESULT_BATCH, {"records": records, "origin": self.node_id},
                                accept=lambda f: f.body.get("error") in (None, "key mismatch")
                                and f.msg_type == MsgType.PING)
                ok = reply.body.get("error") is None
                if not ok:
                    self.log(f"upstream rejected {len(records)} records: {reply.body['error']}")
            except Unreachable as exc:
                self.log(f"giving up: {exc}")
                self.fatal = EXIT_UNREACHABLE
                for item in batch:
                    if item.done:
                        item.done.set()
                with self._cv:
                    self._inflight = 0
                    self._cv.notify_all()
                self.stopping.set()
                self.shutdown.set()
                return
            self.frames_sent += 1
            self.records_forwarded += len(records)
            self.log(f"frame records={len(records)} via={up.last_endpoint}")
            for item in batch:
                item.ok = ok
                if item.done:
                    item.done.set()
            with self._cv:
                self._inflight = 0
                self._cv.notify_all()

    def _drain(self, timeout: float) -> bool:
        t_end = time.monotonic() + timeout
        with self._cv:
            while self._queue or self._inflight:
                left = t_end - time.monotonic()
                if left <= 0 or self.fatal:
                    return False
                self._cv.wait(min(left, 0.5))
        return True

    # -- walker pool ------------------------------------------------------------
    def _merge_pool(self, entries) -> None:
        with self._pool_lock:
            self._pool = merge_walker_pool(self._pool, entries, self.rng, self.n_kept)

    def _flush_pool(self, up: Upstream) -> None:
        with self._pool_lock:
            pool, self._pool = self._pool, []
        if not pool:
            return
        try:
            up.call(MsgType.WALKER_LIST, {"entries": entries_to_wire(pool), "origin": self.node_id},
                    network_timeout=self.rpc_timeout)
            self.log(f"walker pool flushed entries={len(pool)}")
        except Unreachable:
            self._merge_pool(pool)

    def _idle_flusher(self, up: Upstream) -> None:
        lo, hi = self.idle_flush
        while not self.stopping.wait(random.uniform(lo, hi)):
            self._flush_pool(up)

    # -- workers ---------------------------------------------------------------
    def _supervise(self, local: int) -> None:
        wpn = self.bundle["params"]["workers_per_node"]
        wid = self.node_id * wpn + local
        restarts = 0
        next_block = 1
        while True:
            cmd = [sys.executable, "-m", "qmcdesk", "work", "--input", str(self.input_path),
                   "--worker-id", str(wid), "--restart", str(restarts), "--first-block", str(next_block)]
            if self.log_dir:
                cmd += ["--log-dir", str(self.log_dir)]
            p = subprocess.Popen(cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
            self._procs[local] = p
            self.log(f"worker {wid} pid={p.pid} restart={restarts}")
            while True:
                try:
                    frame = read_frame(p.stdout)
                except (EOFError, ValueError, OSError):
                    break
                if frame.msg_type == MsgType.RESULT_BATCH:
                    recs = frame.body.get("records", [])
                    with self._cv:
                        for r in recs:
                            next_block = max(next_block, int(r["block"]) + 1)
                            self.worker_cpu += float(r.get("cpu_seconds", 0.0))
                    self._enqueue(recs)
                elif frame.msg_type == MsgType.WALKER_LIST:
                    self._merge_pool(entries_from_wire(frame.body.get("entries", [])))
            rc = p.wait()
            self.log(f"worker {wid} exited rc={rc}")
            if rc == 4:
                self.collapsed += 1
                return
            if self.stopping.is_set() or rc == 0 or not self.restart_workers or restarts >= self.max_restarts:
                return
            restarts += 1

    def _stop_workers(self) -> None:
        for p in self._procs.values():
            if p.poll() is None:
                try:
                    p.send_signal(signal.SIGTERM)
                except OSError:
                    pass
        t_end = time.monotonic() + self.worker_stop_timeout
        for t in self._supervisors:
            t.join(max(0.0, t_end - time.monotonic()))
        for p in self._procs.values():
            if p.poll() is None:
                p.kill()
        for t in self._supervisors:
            t.join(5.0)

    # -- main -----------------------------------------------------------------
    def fetch_bundle(self) -> int:
        up = Upstream([self.server], 0, self.rpc_timeout, self.network_timeout)
        try:
            reply = up.call(MsgType.INPUT_REQUEST, {"node_id": self.node_id, "endpoint": self.listen,
                                                    "parent": parent_of(self.node_id), "pid": os.getpid()})
        except Unreachable as exc:
            self.log(f"no input bundle: {exc}")
            return EXIT_UNREACHABLE
        finally:
            up.close()
        if reply.msg_type == MsgType.STOP:
            self.log("server is shutting down; not joining")
            return 0
        b = reply.body
        p = b["params"]
        local = critical_key(b["wf_text"], p["mode"], p["tau"], p["precision"])
        if not (local == reply.key == int(b["key"], 16)):
            self.log(f"input bundle corrupted: recomputed key {local:08x}, frame key {reply.key:08x}")
            return EXIT_KEY_MISMATCH
        self.key = local
        self.bundle = b
        d = scratch_root() / f"qmcdesk-{b['run_id']}-node{self.node_id}"
        d.mkdir(parents=True, exist_ok=True)
        self.input_path = d / "input.json"
        body = dict(b, node_id=self.node_id)
        tmp = d / "input.json.tmp"
        tmp.write_text(json.dumps(body))
        os.replace(tmp, self.input_path)
        self.log(f"bundle key={local:08x} scratch={d}")
        return -1

    def run(self) -> int:
        for sig in (signal.SIGTERM, signal.SIGINT):
            signal.signal(sig, lambda *_: self.stopping.set())
        listener = FrameServer(self.listen, self.handle, lambda: self.key)
        threading.Thread(target=listener.serve_forever, kwargs={"poll_interval": 0.2}, daemon=True).start()
        rc = self.fetch_bundle()
        if rc >= 0:
            listener.shutdown()
            return rc
        if self.parents:
            for _ in range(20):
                try:
                    rpc(self.parents[0], MsgType.PING, self.key, {"hello": self.node_id}, timeout=self.rpc_timeout)
                    break
                except (OSError, EOFError, ValueError):
                    time.sleep(0.5)
            else:
                self.log("parent not reachable for registration")
        sender = threading.Thread(target=self._sender, daemon=True)
        sender.start()
        flush_up = Upstream(self.parents + [self.server], self.key, self.rpc_timeout, self.network_timeout)
        threading.Thread(target=self._idle_flusher, args=(flush_up,), daemon=True).start()
        for local in range(self.n_workers):
            t = threading.Thread(target=self._supervise, args=(local,), daemon=True)
            t.start()
            self._supervisors.append(t)

        while not self.stopping.wait(0.5):
            pass
        self.log("shutting down")
        self._stop_workers()
        drained = self._drain(self.network_timeout)
        self._flush_pool(flush_up)
        self.shutdown.set()
        with self._cv:
            self._cv.notify_all()
        sender.join(5.0)
        if self.parents:
            try:
                rpc(self.parents[0], MsgType.STOP, self.key, {"from": self.node_id}, timeout=self.rpc_timeout)
            except (OSError, EOFError, ValueError):
                self.log("parent gone at shutdown")
        cpu = time.process_time()
        note = {"node_id": self.node_id, "cpu_seconds": cpu, "worker_cpu_seconds": self.worker_cpu,
                "records_forwarded": self.records_forwarded, "frames_sent": self.frames_sent,
                "collapsed": self.collapsed, "drained": drained}
        try:
            Upstream([self.server], self.key, self.rpc_timeout, self.rpc_timeout * 2).call(MsgType.TERMINATED, note)
        except Unreachable:
            self.log("server unreachable for terminated notice")
        self.log(f"terminated cpu={cpu:.3f} worker_cpu={self.worker_cpu:.3f}")
        listener.shutdown()
        return self.fatal or 0
