"""Fixed-size walker pools stratified in local energy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_N_KEPT = 1000


@dataclass(frozen=True)
class WalkerPoolEntry:
    R: tuple
    E: float


def kept_indices(n_kept: int, n_incoming: int, eta: float) -> list[int]:
    """1-based indices floor(eta + i (N_kept + N) / N_kept), i = 1..N_kept."""
    L = n_kept + n_incoming
    # exact integer evaluation: floor(eta + q + r / n_kept) with i*L = q*n_kept + r
    out = []
    for i in range(1, n_kept + 1):
        q, r = divmod(i * L, n_kept)
        out.append(q + int(eta + r / n_kept))
    return out


def merge_walker_pool(pool, incoming, rng: np.random.Generator, n_kept: int = DEFAULT_N_KEPT):
    """Merge ``incoming`` into the sorted ``pool``; returns a sorted list of at most ``n_kept``.

    When the combined list is short it is kept whole; otherwise the stratified
    index rule selects exactly ``n_kept`` entries.
    """
    combined = sorted(list(pool) + list(incoming), key=lambda e: e.E)
    if len(combined) <= n_kept:
        return combined
    eta = float(rng.uniform())
    # the index rule is defined relative to a full pool of n_kept entries
    idx = kept_indices(n_kept, len(combined) - n_kept, eta)
    return [combined[i - 1] for i in idx]


def entries_from_arrays(R, E) -> list[WalkerPoolEntry]:
    R = np.asarray(R, dtype=np.float64)
    R = R.reshape(len(R), -1)
    return [WalkerPoolEntry(tuple(float(x) for x in r), float(e)) for r, e in zip(R, E)]


def entries_to_wire(entries) -> list:
    return [[e.E, list(e.R)] for e in entries]


def entries_from_wire(items) -> list[WalkerPoolEntry]:
    return [WalkerPoolEntry(tuple(float(x) for x in R), float(E)) for E, R in items]


def speedup(cpu_n: float, wall_n: float, cpu_1: float, wall_1: float) -> float:
    """(t_CPU(N) / t_Wall(N)) / (t_CPU(1) / t_Wall(1))."""
    return (cpu_n / wall_n) / (cpu_1 / wall_1)


def speedup_report(runs) -> list[dict]:
    """Rows {workers, t_cpu, t_wall, speedup} relative to the run with fewest workers."""
    runs = [r for r in runs if r.get("wall_seconds", 0) > 0 and r.get("cpu_seconds", 0) > 0]
    if not runs:
        return []
    base = min(runs, key=lambda r: (r["workers"], r.get("started", 0)))
    return [
        {
            "workers": r["workers"],
            "t_cpu": r["cpu_seconds"],
            "t_wall": r["wall_seconds"],
            "speedup": speedup(r["cpu_seconds"], r["wall_seconds"], base["cpu_seconds"], base["wall_seconds"]),
        }
        for r in sorted(runs, key=lambda r: (r["workers"], r.get("started", 0)))
    ]
