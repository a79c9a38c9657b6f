"""Results store: critical-data key, append-only block records, checkpoints.

Directory layout (format version 1)::

    META                 key=value lines: format, key, mode, tau, precision
    critical.wf          canonical wavefunction text (the hashed critical data)
    records/<writer>.log one JSON object per line, sorted keys; one file per writer
    walkers.ckpt         latest walker checkpoint (JSON), replaced atomically
    runs.log             one JSON summary per finished run (CPU/wall times)

A record line is only valid when it ends with a newline and parses; a torn
tail left by a crash is skipped on read and sealed before the next append.
Records are deduplicated by ``record_id`` at read time, so a store is merged
by taking the union of its segments.
"""
from __future__ import annotations

import json
import math
import os
import re
import socket
import time
import zlib
from dataclasses import dataclass
from pathlib import Path

from .wffile import canonicalize, fmt

FORMAT = "qmcdesk-store 1"
RECORD_VERSION = 1
PRECISIONS = ("mixed", "double")


class StoreError(RuntimeError):
    pass


class KeyMismatchError(StoreError):
    pass


def crc32(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


def run_block_text(mode: str, tau: float, precision: str) -> str:
    return f"[run]\nmode {mode}\nprecision {precision}\ntau {fmt(tau)}\n"


def critical_bytes(wf_text: str, mode: str, tau: float, precision: str) -> bytes:
    return (canonicalize(wf_text) + run_block_text(mode, tau, precision)).encode()


def critical_key(wf_text: str, mode: str, tau: float, precision: str = "mixed") -> int:
    """CRC-32 of the canonical wavefunction text followed by the run-critical block.

    Walker count, block length and topology are deliberately not part of it.
    """
    return crc32(critical_bytes(wf_text, mode, tau, precision))


def key_hex(key: int) -> str:
    return f"{key & 0xFFFFFFFF:08x}"


def make_record_id(run_id: str, node_id: int, worker_id: int, block: int) -> str:
    return f"{run_id}:{node_id}:{worker_id}:{block}"


@dataclass
class Averages:
    energy: float
    error: float
    n_blocks: int
    sum_w: float
    variance: float
    steps: int

    @property
    def error_defined(self) -> bool:
        return self.n_blocks >= 2


def block_statistics(records) -> Averages:
    """Weighted mean of block means and the weighted standard error over blocks."""
    recs = list(records)
    n = len(recs)
    if n == 0:
        return Averages(math.nan, math.nan, 0, 0.0, math.nan, 0)
    W = sum(r["sum_w"] for r in recs)
    E = sum(r["sum_we"] for r in recs) / W
    var = sum(r["sum_we2"] for r in recs) / W - E * E
    steps = sum(r["steps"] for r in recs)
    if n < 2:
        return Averages(E, math.nan, 1, W, var, steps)
    s2 = sum(r["sum_w"] * (r["sum_we"] / r["sum_w"] - E) ** 2 for r in recs) / W / (n - 1)
    return Averages(E, math.sqrt(s2), n, W, var, steps)


def _safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", name) or "main"


def default_writer() -> str:
    return _safe_name(f"{socket.gethostname()}-{os.getpid()}")


class Store:
    def __init__(self, path, meta: dict):
        self.path = Path(path)
        self.meta = meta
        self.key = int(meta["key"], 16)
        self._fds: dict[str, int] = {}

    # -- creation -------------------------------------------------------
    @classmethod
    def create(cls, path, wf_text: str, mode: str, tau: float, precision: str = "mixed") -> "Store":
        """Create a store, or reopen an existing one holding the same critical data."""
        if precision not in PRECISIONS:
            raise StoreError(f"unknown precision {precision!r}")
        path = Path(path)
        canon = canonicalize(wf_text)
        key = crc32((canon + run_block_text(mode, tau, precision)).encode())
        if (path / "META").exists():
            st = cls.open(path)
            if st.key != key:
                raise KeyMismatchError(
                    f"store {path} holds key {st.key_hex}, new critical data gives {key_hex(key)}")
            return st
        path.mkdir(parents=True, exist_ok=True)
        (path / "records").mkdir(exist_ok=True)
        (path / "critical.wf").write_text(canon)
        meta = {"format": FORMAT, "key": key_hex(key), "mode": mode, "tau": fmt(tau), "precision": precision}
        tmp = path / "META.tmp"
        tmp.write_text("".join(f"{k}={v}\n" for k, v in meta.items()))
        os.replace(tmp, path / "META")
        return cls(path, meta)

    @classmethod
    def open(cls, path) -> "Store":
        path = Path(path)
        try:
            text = (path / "META").read_text()
        except FileNotFoundError:
            raise StoreError(f"{path} is not a store (no META)") from None
        meta = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        if meta.get("format") != FORMAT:
            raise StoreError(f"{path}: unsupported store format {meta.get('format')!r}")
        st = cls(path, meta)
        canon = (path / "critical.wf").read_text()
        if crc32((canon + run_block_text(st.mode, st.tau, st.precision)).encode()) != st.key:
            raise StoreError(f"{path}: critical.wf does not match the recorded key")
        return st

    @property
    def key_hex(self) -> str:
        return key_hex(self.key)

    @property
    def mode(self) -> str:
        return self.meta["mode"]

    @property
    def tau(self) -> float:
        return float(self.meta["tau"])

    @property
    def precision(self) -> str:
        return self.meta["precision"]

    @property
    def wf_text(self) -> str:
        return (self.path / "critical.wf").read_text()

    # -- records --------------------------------------------------------
    def _segment_fd(self, writer: str) -> int:
        writer = _safe_name(writer)
        fd = self._fds.get(writer)
        if fd is None:
            seg = self.path / "records" / f"{writer}.log"
            fd = os.open(seg, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)
            size = os.fstat(fd).st_size
            if size:
                with open(seg, "rb") as fh:
                    fh.seek(size - 1)
                    if fh.read(1) != b"\n":
                        os.write(fd, b"\n")  # seal a torn tail so it stays unparsable
            self._fds[writer] = fd
        return fd

    def check_record(self, record: dict) -> None:
        if int(record.get("key", "0"), 16) != self.key:
            raise KeyMismatchError(f"record key {record.get('key')} does not match store key {self.key_hex}")
        if record.get("steps", 0) < 1:
            raise StoreError("record has no steps")
        if not record.get("sum_w", 0) > 0:
            raise StoreError("record has no weight")

    def append_block(self, record: dict, writer: str = "main", sync: bool = False) -> None:
        """Append one record as a single write on an O_APPEND descriptor."""
        self.check_record(record)
        line = json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n"
        fd = self._segment_fd(writer)
        os.write(fd, line.encode())
        if sync:
            os.fsync(fd)

    def append_many(self, records, writer: str = "main", sync: bool = True) -> int:
        for r in records:
            self.check_record(r)
        data = "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in records)
        if data:
            fd = self._segment_fd(writer)
            os.write(fd, data.encode())
            if sync:
                os.fsync(fd)
        return len(records)

    def segments(self):
        return sorted((self.path / "records").glob("*.log"))

    def records(self) -> list[dict]:
        """Valid records of all segments, first occurrence of each record_id, sorted by id."""
        seen = {}
        for seg in self.segments():
            data = seg.read_bytes()
            for raw in data.split(b"\n")[:-1]:
                try:
                    rec = json.loads(raw)
                except ValueError:
                    continue
                if not isinstance(rec, dict) or "record_id" not in rec:
                    continue
                if int(rec.get("key", "0"), 16) != self.key:
                    continue
                seen.setdefault(rec["record_id"], rec)
        return [seen[k] for k in sorted(seen)]

    def record_ids(self) -> set[str]:
        return {r["record_id"] for r in self.records()}

    def running_average(self) -> Averages:
        return block_statistics(self.records())

    def close(self) -> None:
        for fd in self._fds.values():
            os.close(fd)
        self._fds.clear()

    # -- checkpoints ----------------------------------------------------
    def stage_checkpoint(self, entries) -> Path:
        """Write the checkpoint to a temporary file; ``commit_checkpoint`` makes it current."""
        body = {
            "format": 1,
            "key": self.key_hex,
            "time": time.time(),
            "entries": [[float(e), [float(x) for x in R]] for R, e in entries],
        }
        tmp = self.path / f"walkers.ckpt.tmp.{os.getpid()}"
        with open(tmp, "w") as fh:
            json.dump(body, fh, separators=(",", ":"))
            fh.flush()
            os.fsync(fh.fileno())
        return tmp

    def commit_checkpoint(self, tmp: Path) -> None:
        os.replace(tmp, self.path / "walkers.ckpt")

    def checkpoint_walkers(self, entries) -> None:
        """``entries`` is a sequence of (flat R, E_L) pairs."""
        self.commit_checkpoint(self.stage_checkpoint(entries))

    def load_walkers(self):
        """Latest complete checkpoint as (list of (R, E_L), timestamp), or None for a fresh start."""
        try:
            body = json.loads((self.path / "walkers.ckpt").read_text())
        except (FileNotFoundError, ValueError):
            return None
        if body.get("key") != self.key_hex:
            raise KeyMismatchError("checkpoint key does not match store key")
        return [(R, e) for e, R in body["entries"]], body["time"]

    # -- run summaries --------------------------------------------------
    def record_run(self, summary: dict) -> None:
        with open(self.path / "runs.log", "a") as fh:
            fh.write(json.dumps(summary, sort_keys=True) + "\n")

    def runs(self) -> list[dict]:
        try:
            lines = (self.path / "runs.log").read_text().splitlines()
        except FileNotFoundError:
            return []
        out = []
        for line in lines:
            try:
                out.append(json.loads(line))
            except ValueError:
                pass
        return out


def merge_stores(a, b, out) -> Store:
    """Union of the records of stores ``a`` and ``b`` written to ``out``.

    ``out`` may be ``a`` itself or a fresh path.  The more recent checkpoint wins.
    """
    sa = a if isinstance(a, Store) else Store.open(a)
    sb = b if isinstance(b, Store) else Store.open(b)
    if sa.key != sb.key:
        raise KeyMismatchError(f"refusing to merge stores with keys {sa.key_hex} and {sb.key_hex}")
    sout = Store.create(out, sa.wf_text, sa.mode, sa.tau, sa.precision)
    have = sout.record_ids()
    new = {}
    for st in (sa, sb):
        for r in st.records():
            if r["record_id"] not in have:
                new.setdefault(r["record_id"], r)
    if new:
        sout.append_many([new[k] for k in sorted(new)], writer=f"merge-{int(time.time() * 1e6)}")
    current = sout.load_walkers()
    ckpts = [c for c in (sa.load_walkers(), sb.load_walkers()) if c is not None]
    if ckpts:
        newest = max(ckpts, key=lambda c: c[1])
        if current is None or newest[1] > current[1]:
            sout.checkpoint_walkers(newest[0])
    for st in (sa, sb):
        for run in st.runs():
            if run not in sout.runs():
                sout.record_run(run)
    sout.close()
    return sout

