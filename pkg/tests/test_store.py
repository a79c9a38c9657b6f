import json
import math

import numpy as np
import pytest

from oracles import crc32_bitwise, weighted_block_stats
from qmcdesk.store import (
    KeyMismatchError,
    Store,
    StoreError,
    block_statistics,
    critical_key,
    crc32,
    key_hex,
    make_record_id,
    merge_stores,
)
from qmcdesk.systems import harmonic_oscillator, hydrogen_atom
from qmcdesk.wffile import dump_wavefunction

H_TEXT = dump_wavefunction(hydrogen_atom())


def make_records(store, run_id, n, rng, worker=0):
    out = []
    for b in range(1, n + 1):
        w = float(rng.uniform(50, 150))
        e = float(rng.normal(-0.5, 0.01))
        out.append({"record_id": make_record_id(run_id, 0, worker, b), "key": store.key_hex, "run_id": run_id,
                    "steps": 100, "walkers": 10, "sum_w": w, "sum_we": w * e, "sum_we2": w * (e * e + 1e-3),
                    "cpu_seconds": 0.1, "truncated": False})
    return out


@pytest.fixture
def store(tmp_path):
    return Store.create(tmp_path / "s", H_TEXT, "dmc", 0.005)


def test_crc_check_value():
    assert crc32(b"123456789") == 0xCBF43926
    rng = np.random.default_rng(0)
    for n in (0, 1, 7, 100, 1000):
        data = rng.integers(0, 256, size=n, dtype=np.uint8).tobytes()
        assert crc32(data) == crc32_bitwise(data)


def test_critical_key_covers_critical_data_only():
    k = critical_key(H_TEXT, "dmc", 0.005)
    assert critical_key("# comment\n" + H_TEXT, "dmc", 0.005) == k
    assert critical_key(H_TEXT, "vmc", 0.005) != k
    assert critical_key(H_TEXT, "dmc", 0.0050001) != k
    assert critical_key(H_TEXT, "dmc", 0.005, "double") != k
    assert critical_key(dump_wavefunction(harmonic_oscillator()), "dmc", 0.005) != k
    assert len(key_hex(k)) == 8


def test_create_is_idempotent_and_refuses_other_data(tmp_path, store):
    again = Store.create(store.path, H_TEXT, "dmc", 0.005)
    assert again.key == store.key
    with pytest.raises(KeyMismatchError):
        Store.create(store.path, H_TEXT, "dmc", 0.01)


def test_open_detects_tampered_critical_data(store):
    (store.path / "critical.wf").write_text(H_TEXT.replace("up 1", "up  1").replace("H 1", "H 2"))
    with pytest.raises(StoreError):
        Store.open(store.path)
    with pytest.raises(StoreError):
        Store.open(store.path / "nope")


def test_append_and_read_back(store):
    rng = np.random.default_rng(1)
    recs = make_records(store, "r1", 5, rng)
    store.append_many(recs[:3])
    for r in recs[3:]:
        store.append_block(r, writer="other", sync=True)
    got = store.records()
    assert [r["record_id"] for r in got] == sorted(r["record_id"] for r in recs)
    assert len(store.segments()) == 2


def test_invalid_records_refused(store):
    rec = make_records(store, "r", 1, np.random.default_rng(0))[0]
    with pytest.raises(KeyMismatchError):
        store.append_block(dict(rec, key="deadbeef"))
    with pytest.raises(StoreError):
        store.append_block(dict(rec, steps=0))
    with pytest.raises(StoreError):
        store.append_block(dict(rec, sum_w=0.0))


def test_torn_tail_is_ignored_and_sealed(store):
    rng = np.random.default_rng(2)
    recs = make_records(store, "r", 4, rng)
    store.append_many(recs[:2], writer="w")
    store.close()
    seg = store.path / "records" / "w.log"
    with open(seg, "ab") as fh:
        fh.write(json.dumps(recs[2]).encode()[:40])  # crash mid-write
    assert len(Store.open(store.path).records()) == 2
    again = Store.open(store.path)
    again.append_many(recs[3:], writer="w")
    ids = [r["record_id"] for r in again.records()]
    assert ids == sorted([recs[0]["record_id"], recs[1]["record_id"], recs[3]["record_id"]])


def test_duplicates_and_foreign_keys_are_dropped_on_read(store):
    rec = make_records(store, "r", 1, np.random.default_rng(3))[0]
    store.append_block(rec, writer="a")
    store.append_block(rec, writer="b")
    with open(store.path / "records" / "c.log", "a") as fh:
        fh.write(json.dumps(dict(rec, record_id="x", key="00000000")) + "\n")
    assert len(store.records()) == 1


def test_block_statistics_matches_independent_script(store):
    rng = np.random.default_rng(4)
    recs = make_records(store, "r", 50, rng)
    store.append_many(recs)
    avg = store.running_average()
    E, err = weighted_block_stats(recs)
    assert abs(avg.energy - E) <= 1e-12 * abs(E)
    assert abs(avg.error - err) <= 1e-12 * err
    assert avg.n_blocks == 50 and avg.steps == 5000


def test_single_block_error_undefined(store):
    recs = make_records(store, "r", 1, np.random.default_rng(5))
    st = block_statistics(recs)
    assert st.n_blocks == 1 and math.isnan(st.error) and not st.error_defined
    assert math.isnan(block_statistics([]).energy)


def test_checkpoint_roundtrip(store):
    assert store.load_walkers() is None
    entries = [((0.1, 0.2, 0.3), -0.4), ((1.0, 2.0, 3.0), -0.6)]
    store.checkpoint_walkers(entries)
    got, t = store.load_walkers()
    assert [(tuple(R), e) for R, e in got] == entries
    assert not list(store.path.glob("walkers.ckpt.tmp.*"))


def test_staged_checkpoint_is_invisible_until_committed(store):
    store.checkpoint_walkers([((0.0, 0.0, 0.0), -1.0)])
    tmp = store.stage_checkpoint([((9.0, 9.0, 9.0), -2.0)])
    # a crash here leaves the previous checkpoint current
    assert store.load_walkers()[0][0][1] == -1.0
    store.commit_checkpoint(tmp)
    assert store.load_walkers()[0][0][1] == -2.0


def _ids(st):
    return [r["record_id"] for r in st.records()]


def test_merge_identity_idempotence_union(tmp_path):
    rng = np.random.default_rng(6)
    a = Store.create(tmp_path / "a", H_TEXT, "dmc", 0.005)
    b = Store.create(tmp_path / "b", H_TEXT, "dmc", 0.005)
    empty = Store.create(tmp_path / "e", H_TEXT, "dmc", 0.005)
    ra = make_records(a, "ra", 6, rng)
    rb = make_records(b, "rb", 4, rng)
    a.append_many(ra)
    b.append_many(rb + ra[:2])  # overlap
    ident = merge_stores(a.path, empty.path, tmp_path / "i")
    assert _ids(ident) == _ids(a)
    assert ident.records() == a.records()
    idem = merge_stores(a.path, a.path, tmp_path / "aa")
    assert _ids(idem) == _ids(a)
    u1 = merge_stores(a.path, b.path, tmp_path / "ab")
    u2 = merge_stores(b.path, a.path, tmp_path / "ba")
    assert _ids(u1) == _ids(u2) == sorted({r["record_id"] for r in ra + rb})
    assert u1.running_average().energy == pytest.approx(u2.running_average().energy, rel=1e-14)
    # merging into an existing store twice adds nothing the second time
    merge_stores(a.path, b.path, tmp_path / "ab")
    assert len(Store.open(tmp_path / "ab").records()) == 10
    lines = sum(len(p.read_text().splitlines()) for p in Store.open(tmp_path / "ab").segments())
    assert lines == 10


def test_merge_refuses_key_mismatch(tmp_path):
    a = Store.create(tmp_path / "a", H_TEXT, "dmc", 0.005)
    b = Store.create(tmp_path / "b", H_TEXT, "dmc", 0.01)
    with pytest.raises(KeyMismatchError):
        merge_stores(a.path, b.path, tmp_path / "o")


def test_merge_keeps_newest_checkpoint(tmp_path):
    a = Store.create(tmp_path / "a", H_TEXT, "dmc", 0.005)
    b = Store.create(tmp_path / "b", H_TEXT, "dmc", 0.005)
    a.checkpoint_walkers([((0.0, 0.0, 0.0), -1.0)])
    b.checkpoint_walkers([((0.0, 0.0, 0.0), -2.0)])
    out = merge_stores(a.path, b.path, tmp_path / "o")
    assert out.load_walkers()[0][0][1] == -2.0


def test_runs_log(store):
    store.record_run({"run_id": "x", "workers": 1})
    store.record_run({"run_id": "y", "workers": 2})
    assert [r["run_id"] for r in store.runs()] == ["x", "y"]
