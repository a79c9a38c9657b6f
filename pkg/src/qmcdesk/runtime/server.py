"""Data server: serves input bundles, ingests results into the store.

Ingestion is serialized through one lock and one store writer.  Results are
acknowledged after they are on disk.  On SIGTERM (or a Stop frame) the
server asks the leaves of the forwarder tree to stop; the stop then walks
up the tree.  The server exits once every registered node has sent its
Terminated notice, or after ``shutdown_timeout``.
"""
from __future__ import annotations

import json
import signal
import threading
import time
from pathlib import Path

import numpy as np

from ..store import Store, key_hex
from .net import FrameServer, rpc
from .pool import DEFAULT_N_KEPT, WalkerPoolEntry, entries_from_wire, merge_walker_pool
from .wire import MsgType


class DataServer:
    def __init__(self, store: Store, bind: str, run_id: str, params: dict, log_dir=None,
                 n_kept: int = DEFAULT_N_KEPT, shutdown_grace: float = 10.0, shutdown_timeout: float = 60.0,
                 idle_seconds: float = 0.5, rpc_timeout: float = 5.0, checkpoint_interval: float = 10.0):
        self.store = store
        self.bind = bind
        self.run_id = run_id
        self.params = dict(params)
        self.log_dir = Path(log_dir) if log_dir else None
        self.n_kept = n_kept
        self.shutdown_grace = shutdown_grace
        self.shutdown_timeout = shutdown_timeout
        self.idle_seconds = idle_seconds
        self.rpc_timeout = rpc_timeout
        self.checkpoint_interval = checkpoint_interval
        self.writer = f"server-{run_id}"

        self._lock = threading.Lock()
        self._ck_lock = threading.Lock()
        self._ids = store.record_ids()
        self.nodes: dict[int, dict] = {}
        self.terminated: dict[int, dict] = {}
        self.accepted = 0
        self.duplicates = 0
        self.rejected_frames = 0
        self.rejected_records = 0
        self.walker_lists = 0
        self.frames = 0
        self.stop_requested = threading.Event()
        self.done = threading.Event()
        self._last_activity = time.monotonic()
        self._pool_dirty = False
        self._last_checkpoint = time.monotonic()
        self.rng = np.random.default_rng()
        ck = store.load_walkers()
        self.start_walkers = [] if ck is None else ck[0]
        self._pool = []
        if ck is not None:
            self._pool = sorted((WalkerPoolEntry(tuple(R), float(E)) for R, E in ck[0]), key=lambda e: e.E)
        self._log = None
        if self.log_dir:
            self.log_dir.mkdir(parents=True, exist_ok=True)
            self._log = open(self.log_dir / "server.log", "a", buffering=1)
        self.log(f"start key={store.key_hex} records={len(self._ids)} checkpoint={len(self.start_walkers)}")

    def log(self, line: str) -> None:
        if self._log:
            self._log.write(f"{time.time():.6f} {line}\n")

    # -- frames ---------------------------------------------------------------
    def bundle(self, node_id: int) -> dict:
        return {
            "run_id": self.run_id,
            "key": self.store.key_hex,
            "wf_text": self.store.wf_text,
            "params": dict(self.params, mode=self.store.mode, tau=self.store.tau, precision=self.store.precision),
            "walkers": [[e, list(R)] for R, e in self.start_walkers],
        }

    def handle(self, frame):
        self._last_activity = time.monotonic()
        body = frame.body
        mt = frame.msg_type
        with self._lock:
            self.frames += 1
        if mt == MsgType.INPUT_REQUEST:
            nid = int(body["node_id"])
            if self.stop_requested.is_set():
                return MsgType.STOP, {"from": "server"}
            with self._lock:
                self.nodes[nid] = {"endpoint": body.get("endpoint"), "parent": body.get("parent"),
                                   "pid": body.get("pid"), "joined": time.time()}
            self.log(f"node {nid} registered endpoint={body.get('endpoint')}")
            return MsgType.INPUT_BUNDLE, self.bundle(nid)
        if mt == MsgType.PING:
            return MsgType.PING, {"stopping": self.stop_requested.is_set()}
        if mt == MsgType.STOP:
            self.request_stop("stop frame")
            return MsgType.PING, {"stopping": True}
        if mt == MsgType.TERMINATED:
            nid = int(body["node_id"])
            with self._lock:
                self.terminated[nid] = dict(body, time=time.time())
            self.log(f"node {nid} terminated cpu={body.get('cpu_seconds')}")
            return MsgType.PING, {}
        if mt in (MsgType.RESULT_BATCH, MsgType.WALKER_LIST) and frame.key != self.store.key:
            n = len(body.get("records", body.get("entries", [])))
            with self._lock:
                self.rejected_frames += 1
                self.rejected_records += n
            self.log(f"rejected frame key={key_hex(frame.key)} items={n}")
            return MsgType.PING, {"accepted": 0, "rejected": n, "error": "key mismatch"}
        if mt == MsgType.RESULT_BATCH:
            return MsgType.PING, self.ingest(body.get("records", []))
        if mt == MsgType.WALKER_LIST:
            entries = entries_from_wire(body.get("entries", []))
            with self._lock:
                self._pool = merge_walker_pool(self._pool, entries, self.rng, self.n_kept)
                self._pool_dirty = True
                self.walker_lists += 1
            return MsgType.PING, {"accepted": len(entries)}
        return MsgType.PING, {"error": f"unexpected message type {int(mt)}"}

    def ingest(self, records) -> dict:
        fresh, dup, bad = [], 0, 0
        batch_ids = set()
        with self._lock:
            for r in records:
                try:
                    self.store.check_record(r)
                except Exception:
                    bad += 1
                    continue
                if r["record_id"] in self._ids or r["record_id"] in batch_ids:
                    dup += 1
                    continue
                batch_ids.add(r["record_id"])
                fresh.append(r)
            self.store.append_many(fresh, writer=self.writer, sync=True)
            self._ids.update(r["record_id"] for r in fresh)
            self.accepted += len(fresh)
            self.duplicates += dup
            self.rejected_records += bad
        return {"accepted": len(fresh), "duplicates": dup, "rejected": bad}

    # -- lifecycle ------------------------------------------------------------
    def request_stop(self, why: str) -> None:
        if not self.stop_requested.is_set():
            self.log(f"stop requested: {why}")
            self.stop_requested.set()

    def _checkpointer(self) -> None:
        # prefer quiet moments, but never let a busy server go without a checkpoint
        while not self.done.wait(0.25):
            now = time.monotonic()
            if self._pool_dirty and (now - self._last_activity > self.idle_seconds
                                     or now - self._last_checkpoint > self.checkpoint_interval):
                self.checkpoint()

    def checkpoint(self) -> None:
        with self._ck_lock:
            with self._lock:
                if not self._pool_dirty:
                    return
                entries = [(e.R, e.E) for e in self._pool]
                self._pool_dirty = False
            self.store.checkpoint_walkers(entries)
            self._last_checkpoint = time.monotonic()
        self.log(f"checkpoint entries={len(entries)}")

    def _send_stop(self, nodes) -> None:
        for nid in nodes:
            ep = self.nodes[nid]["endpoint"]
            try:
                rpc(ep, MsgType.STOP, self.store.key, {"from": "server"}, timeout=self.rpc_timeout)
                self.log(f"stop sent to node {nid}")
            except (OSError, EOFError, ValueError):
                self.log(f"stop to node {nid} failed")

    def _all_terminated(self) -> bool:
        with self._lock:
            return set(self.nodes) <= set(self.terminated)

    def _wait_terminated(self, until: float) -> bool:
        while time.monotonic() < until:
            if self._all_terminated():
                return True
            time.sleep(0.1)
        return self._all_terminated()

    def shutdown_protocol(self) -> bool:
        t0 = time.monotonic()
        with self._lock:
            nodes = dict(self.nodes)
        parents = {v["parent"] for v in nodes.values()}
        leaves = sorted(n for n in nodes if n not in parents)
        self.log(f"shutdown: leaves={leaves}")
        self._send_stop(leaves)
        if self._wait_terminated(t0 + self.shutdown_grace):
            return True
        with self._lock:
            rest = sorted(set(self.nodes) - set(self.terminated))
        self.log(f"shutdown: second stop round to {rest}")
        self._send_stop(rest)
        ok = self._wait_terminated(t0 + self.shutdown_timeout)
        if not ok:
            self.log("shutdown: timeout with missing nodes "
                     f"{sorted(set(self.nodes) - set(self.terminated))}")
        return ok

    def summary(self) -> dict:
        with self._lock:
            return {
                "run_id": self.run_id,
                "key": self.store.key_hex,
                "nodes": sorted(self.nodes),
                "terminated": {str(k): v for k, v in sorted(self.terminated.items())},
                "accepted": self.accepted,
                "duplicates": self.duplicates,
                "rejected_frames": self.rejected_frames,
                "rejected_records": self.rejected_records,
                "walker_lists": self.walker_lists,
                "frames": self.frames,
                "start_walkers": len(self.start_walkers),
                "pool_size": len(self._pool),
            }

    def run(self) -> int:
        for sig in (signal.SIGTERM, signal.SIGINT):
            signal.signal(sig, lambda *_: self.request_stop("signal"))
        srv = FrameServer(self.bind, self.handle, lambda: self.store.key)
        threading.Thread(target=srv.serve_forever, kwargs={"poll_interval": 0.2}, daemon=True).start()
        threading.Thread(target=self._checkpointer, daemon=True).start()
        self.log(f"listening on {self.bind}")
        while not self.stop_requested.wait(0.2):
            pass
        clean = self.shutdown_protocol()
        self._pool_dirty = self._pool_dirty or bool(self._pool)
        self.checkpoint()
        self.done.set()
        srv.shutdown()
        srv.server_close()
        summ = dict(self.summary(), clean=clean)
        (self.store.path / f"server-{self.run_id}.json").write_text(json.dumps(summ, indent=1, sort_keys=True))
        self.store.close()
        self.log("exit")
        return 0
