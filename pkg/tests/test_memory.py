import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chunklm.memory import FusionParams, MemoryEntry, MemoryStore, fuse, init_fusion, mean_retrieved
from chunklm.numerics import grad_check

from conftest import leaf, probe_sum


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def filled(n, d, seed=0, **kw):
    r = np.random.default_rng(seed)
    mem = MemoryStore(d, capacity=max(n, 1), **kw)
    keys = r.standard_normal((n, d))
    for i, k in enumerate(keys):
        mem.add(k, k, seq_id=i % 3, chunk_index=i)
    return mem, keys


def test_store_into_empty():
    mem = MemoryStore(3, capacity=4)
    mem.store(MemoryEntry(unit([1, 0, 0]), np.ones(3), 0, 0))
    assert len(mem) == 1


def test_ring_evicts_oldest():
    mem = MemoryStore(2, capacity=2)
    for i in range(3):
        mem.add([1.0, i + 1.0], [float(i), 0.0], 0, i)
    assert len(mem) == 2
    assert [e.chunk_index for e in mem.entries()] == [1, 2]


def test_self_retrieval_similarity_one():
    mem, keys = filled(20, 5)
    hits = mem.query_exact(keys[7], k=1, with_scores=True)
    (e, s), = hits
    assert e.chunk_index == 7
    assert abs(s - 1.0) < 1e-6


def test_empty_store():
    assert MemoryStore(3).query_exact(np.ones(3), k=2) == []
    assert MemoryStore(3, index="approx").query_approx(np.ones(3), k=2) == []


def test_single_entry():
    mem = MemoryStore(3)
    e = MemoryEntry(unit([1, 2, 3]).astype(np.float32), np.arange(3, dtype=np.float32), 4, 2)
    mem.store(e)
    (got,) = mem.query_exact(e.key, k=1)
    np.testing.assert_array_equal(got.key, e.key)
    np.testing.assert_array_equal(got.value, e.value)
    assert (got.seq_id, got.chunk_index) == (4, 2)


def test_query_matches_sort_oracle():
    mem, keys = filled(100, 8, seed=3)
    r = np.random.default_rng(9)
    for _ in range(20):
        q = r.standard_normal(8)
        stored = np.array([e.key for e in mem.entries()], dtype=np.float64)
        sims = stored @ unit(q)
        oracle = sorted(range(100), key=lambda i: -sims[i])[:5]
        got = [e.chunk_index for e in mem.query_exact(q, k=5)]
        assert got == oracle


def test_ties_broken_by_provenance():
    mem = MemoryStore(2, capacity=8)
    for seq, idx in [(2, 0), (1, 5), (1, 3)]:
        mem.add([1.0, 0.0], [0.0, 0.0], seq, idx)
    got = [(e.seq_id, e.chunk_index) for e in mem.query_exact([1.0, 0.0], k=3)]
    assert got == [(1, 3), (1, 5), (2, 0)]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 60), st.integers(0, 5), st.integers(0, 60), st.integers(0, 1000))
def test_anti_leak(n, seq, chunk, seed):
    mem, _ = filled(n, 4, seed=seed)
    for mode in ("exact", "approx"):
        fn = mem.query_exact if mode == "exact" else mem.query_approx
        q = np.random.default_rng(seed + 1).standard_normal(4)
        for e in fn(q, k=n, seq_id=seq % 3, chunk_index=chunk):
            assert not (e.seq_id == seq % 3 and e.chunk_index >= chunk)


def test_provenance_filter():
    mem, _ = filled(30, 4)
    hits = mem.query_exact(np.ones(4), k=30, filter=lambda s, c: s == 1)
    assert hits and all(e.seq_id == 1 for e in hits)


def test_exhaustive_probe_equals_exact():
    mem, _ = filled(500, 6, seed=5, index="approx", n_list=16, n_probe=4)
    r = np.random.default_rng(1)
    for _ in range(50):
        q = r.standard_normal(6)
        a = [(e.seq_id, e.chunk_index) for e in mem.query_exact(q, k=4)]
        b = [(e.seq_id, e.chunk_index) for e in mem.query_approx(q, k=4, n_probe=16)]
        assert a == b


def test_single_cluster_equals_exact():
    mem, _ = filled(80, 5, seed=2, index="approx", n_list=1, n_probe=1)
    r = np.random.default_rng(2)
    for _ in range(20):
        q = r.standard_normal(5)
        a = [e.chunk_index for e in mem.query_exact(q, k=3)]
        b = [e.chunk_index for e in mem.query_approx(q, k=3)]
        assert a == b


def test_approx_index_tracks_evictions():
    mem = MemoryStore(4, capacity=50, index="approx", n_list=4, n_probe=4, rebuild_threshold=10)
    r = np.random.default_rng(0)
    for i in range(200):
        mem.add(r.standard_normal(4), np.zeros(4), 0, i)
        if i % 17 == 0:
            q = r.standard_normal(4)
            a = [e.chunk_index for e in mem.query_exact(q, k=3)]
            b = [e.chunk_index for e in mem.query_approx(q, k=3)]
            assert a == b


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        MemoryStore(3).add(np.ones(4), np.ones(4), 0, 0)


def test_snapshot_round_trip(tmp_path):
    mem, _ = filled(37, 6, seed=4, index="approx", n_list=4, n_probe=2)
    for i in range(5):  # wrap the ring
        mem.add(np.ones(6) * (i + 1), np.full(6, i), 9, 100 + i)
    mem.save(tmp_path / "snap")
    back = MemoryStore.load(tmp_path / "snap")
    assert len(back) == len(mem)
    for a, b in zip(mem.entries(), back.entries()):
        assert a.key.tobytes() == b.key.tobytes()
        assert a.value.tobytes() == b.value.tobytes()
        assert (a.seq_id, a.chunk_index) == (b.seq_id, b.chunk_index)
    q = np.random.default_rng(0).standard_normal(6)
    assert [e.chunk_index for e in mem.query_exact(q, k=5)] == [e.chunk_index for e in back.query_exact(q, k=5)]


def test_concurrent_readers_and_writer():
    mem, _ = filled(64, 4)
    errors = []

    def reader():
        r = np.random.default_rng()
        try:
            for _ in range(200):
                hits = mem.query_exact(r.standard_normal(4), k=3)
                assert len(hits) == 3
        except Exception as e:  # pragma: no cover - surfaced below
            errors.append(e)

    def writer():
        r = np.random.default_rng(1)
        for i in range(300):
            mem.add(r.standard_normal(4), np.zeros(4), 5, 1000 + i)

    threads = [threading.Thread(target=reader) for _ in range(4)] + [threading.Thread(target=writer)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert len(mem) == 64


# ---------------------------------------------------------------- fusion


def test_fuse_zero_weights(rng):
    p = FusionParams(leaf(np.zeros((6, 3))))
    out = fuse(leaf(rng.standard_normal((2, 3))), rng.standard_normal((2, 3)), p)
    assert np.all(out.data == 0.0)


def test_mean_of_one_is_itself(rng):
    v = rng.standard_normal(4)
    np.testing.assert_array_equal(mean_retrieved([v], 4), v)
    np.testing.assert_array_equal(mean_retrieved([], 4), np.zeros(4))


def test_fuse_identity_block(rng):
    d = 3
    p = FusionParams(leaf(np.vstack([np.eye(d), np.zeros((d, d))])))
    c = rng.standard_normal((2, d))
    out = fuse(leaf(c), [[rng.standard_normal(d)], []], p)
    np.testing.assert_allclose(out.data, np.tanh(c), rtol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 20))
def test_fuse_in_open_interval(seed, scale):
    r = np.random.default_rng(seed)
    p = init_fusion(4, r)
    p.W_fuse.data *= scale
    out = fuse(leaf(r.standard_normal((3, 4))), r.standard_normal((3, 4)), p).data
    assert np.all(np.abs(out) <= 1.0)
    assert np.all(np.abs(out[np.abs(out) < 1.0]) < 1.0)


def test_fuse_gradcheck(rng):
    p = init_fusion(3, rng)
    c = leaf(rng.standard_normal((2, 3)))
    rbar = rng.standard_normal((2, 3))
    assert grad_check(lambda: probe_sum(fuse(c, rbar, p)), [c, p.W_fuse], probes=24) < 1e-6
