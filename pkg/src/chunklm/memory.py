"""External chunk memory: a bounded key/value store with exact and IVF search,
and the tanh fusion of retrieved values into the chunk embedding."""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.cluster.vq import kmeans2

from .numerics import ops
from .numerics.tensor import Tensor


@dataclass
class MemoryEntry:
    key: np.ndarray
    value: np.ndarray
    seq_id: int
    chunk_index: int


class RWLock:
    """Many readers or one writer."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False

    @contextmanager
    def read(self):
        with self._cond:
            while self._writer:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if self._readers == 0:
                    self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            while self._writer or self._readers:
                self._cond.wait()
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


def _normalize(v):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


class MemoryStore:
    """FIFO ring of at most ``capacity`` entries, keys L2-normalized (cosine search).

    Keys and values are held as float32. ``index`` is "exact" or "approx"; the
    approximate index is an inverted file over a k-means coarse quantizer that
    is rebuilt after ``rebuild_threshold`` inserts.
    """

    def __init__(self, d_mem, capacity=4096, index="exact", n_list=64, n_probe=8, rebuild_threshold=1024, seed=0):
        if index not in ("exact", "approx"):
            raise ValueError(f"index mode must be 'exact' or 'approx', got {index!r}")
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.d_mem = int(d_mem)
        self.capacity = int(capacity)
        self.index = index
        self.n_list = int(n_list)
        self.n_probe = int(n_probe)
        self.rebuild_threshold = int(rebuild_threshold)
        self.seed = seed
        self.keys = np.zeros((capacity, d_mem), dtype=np.float32)
        self.values = np.zeros((capacity, d_mem), dtype=np.float32)
        self.seq_ids = np.zeros(capacity, dtype=np.int64)
        self.chunk_idx = np.zeros(capacity, dtype=np.int64)
        self.count = 0
        self._head = 0  # next slot to write
        self.lock = RWLock()
        self._centroids = None
        self._assign = np.full(capacity, -1, dtype=np.int64)
        self._lists: dict[int, set] = {}
        self._since_build = 0

    def __len__(self):
        return self.count

    # ------------------------------------------------------------------ writes

    def store(self, entry: MemoryEntry) -> None:
        self.add(entry.key, entry.value, entry.seq_id, entry.chunk_index, normalize_key=False)

    def add(self, key, value, seq_id, chunk_index, normalize_key=True) -> None:
        key = np.asarray(key, dtype=np.float64).reshape(-1)
        value = np.asarray(value).reshape(-1)
        if key.size != self.d_mem or value.size != self.d_mem:
            raise ValueError(f"entry dimension {key.size}/{value.size} != d_mem {self.d_mem}")
        if normalize_key:
            key = _normalize(key)
        with self.lock.write():
            slot = self._head
            if self.count == self.capacity:
                self._unlist(slot)
            else:
                self.count += 1
            self.keys[slot] = key
            self.values[slot] = value
            self.seq_ids[slot] = seq_id
            self.chunk_idx[slot] = chunk_index
            self._head = (slot + 1) % self.capacity
            if self._centroids is not None:
                self._list_slot(slot)
                self._since_build += 1

    def _slots(self):
        """Occupied slots, oldest first."""
        if self.count < self.capacity:
            return np.arange(self.count)
        return (np.arange(self.capacity) + self._head) % self.capacity

    def entries(self):
        return [self._entry(s) for s in self._slots()]

    def _entry(self, s):
        return MemoryEntry(self.keys[s].copy(), self.values[s].copy(), int(self.seq_ids[s]), int(self.chunk_idx[s]))

    # ------------------------------------------------------------------ IVF

    def build_index(self) -> None:
        with self.lock.write():
            self._build()

    def _build(self):
        slots = self._slots()
        self._lists = {}
        self._assign[:] = -1
        if slots.size == 0:
            self._centroids = None
            return
        n_list = min(self.n_list, slots.size)
        data = self.keys[slots].astype(np.float64)
        if n_list == 1:
            centroids = data.mean(axis=0, keepdims=True)
        else:
            centroids, _ = kmeans2(data, n_list, iter=20, minit="++", seed=self.seed, missing="warn")
        self._centroids = centroids
        for s in slots:
            self._list_slot(int(s))
        self._since_build = 0

    def _nearest_lists(self, v, n):
        d2 = ((self._centroids - v[None, :]) ** 2).sum(axis=1)
        return np.argsort(d2, kind="stable")[:n]

    def _list_slot(self, slot):
        lid = int(self._nearest_lists(self.keys[slot].astype(np.float64), 1)[0])
        self._assign[slot] = lid
        self._lists.setdefault(lid, set()).add(slot)

    def _unlist(self, slot):
        lid = int(self._assign[slot])
        if lid >= 0:
            self._lists[lid].discard(slot)
            self._assign[slot] = -1

    # ------------------------------------------------------------------ reads

    def _admissible(self, slots, seq_id, chunk_index, filter):
        ok = np.ones(slots.size, dtype=bool)
        if seq_id is not None and chunk_index is not None:
            ok &= ~((self.seq_ids[slots] == seq_id) & (self.chunk_idx[slots] >= chunk_index))
        if filter is not None:
            ok &= np.asarray(filter(self.seq_ids[slots], self.chunk_idx[slots]), dtype=bool)
        return slots[ok]

    def _rank(self, slots, q, k):
        if slots.size == 0:
            return slots, np.zeros(0)
        sims = self.keys[slots].astype(np.float64) @ _normalize(q)
        order = np.lexsort((self.chunk_idx[slots], self.seq_ids[slots], -sims))[:k]
        return slots[order], sims[order]

    def _search_exact(self, q, k, seq_id, chunk_index, filter):
        slots = self._admissible(self._slots(), seq_id, chunk_index, filter)
        return self._rank(slots, q, k)

    def _search_approx(self, q, k, seq_id, chunk_index, filter, n_probe):
        if self._centroids is None or self._since_build > self.rebuild_threshold:
            self._build()
        if self._centroids is None:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        probe = self._nearest_lists(_normalize(q), n_probe)
        cand = sorted(set().union(*(self._lists.get(int(l), set()) for l in probe)))
        slots = self._admissible(np.asarray(cand, dtype=np.int64), seq_id, chunk_index, filter)
        return self._rank(slots, q, k)

    def query_exact(self, q, k=1, seq_id=None, chunk_index=None, filter=None, with_scores=False):
        """Top-k by cosine similarity, descending; ties broken by (seq_id, chunk_index).

        When ``seq_id``/``chunk_index`` are given, entries from the same sequence
        at or after that chunk are never returned.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        with self.lock.read():
            slots, sims = self._search_exact(np.asarray(q, dtype=np.float64), k, seq_id, chunk_index, filter)
            hits = [self._entry(s) for s in slots]
        return list(zip(hits, sims.tolist())) if with_scores else hits

    def query_approx(self, q, k=1, seq_id=None, chunk_index=None, filter=None, n_probe=None, with_scores=False):
        """IVF search: probe the ``n_probe`` nearest lists, then re-rank exactly."""
        if k < 1:
            raise ValueError("k must be >= 1")
        n_probe = self.n_probe if n_probe is None else n_probe
        q = np.asarray(q, dtype=np.float64)
        if self._centroids is None or self._since_build > self.rebuild_threshold:
            with self.lock.write():
                self._build()
        with self.lock.read():
            slots, sims = self._search_approx(q, k, seq_id, chunk_index, filter, n_probe)
            hits = [self._entry(s) for s in slots]
        return list(zip(hits, sims.tolist())) if with_scores else hits

    def query(self, q, k=1, **kw):
        if self.index == "approx":
            return self.query_approx(q, k, **kw)
        return self.query_exact(q, k, **kw)

    # ------------------------------------------------------------------ persistence

    def save(self, path) -> None:
        """Directory with manifest.txt and data.bin (float32 keys, float32 values, int64 provenance, all LE)."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        slots = self._slots()
        manifest = [
            "format chunklm-memory 1",
            f"d_mem {self.d_mem}",
            f"capacity {self.capacity}",
            f"count {self.count}",
            f"index {self.index}",
            f"n_list {self.n_list}",
            f"n_probe {self.n_probe}",
            f"rebuild_threshold {self.rebuild_threshold}",
            f"seed {self.seed}",
        ]
        (path / "manifest.txt").write_text("\n".join(manifest) + "\n")
        with open(path / "data.bin", "wb") as fh:
            fh.write(self.keys[slots].astype("<f4").tobytes())
            fh.write(self.values[slots].astype("<f4").tobytes())
            prov = np.stack([self.seq_ids[slots], self.chunk_idx[slots]], axis=1)
            fh.write(prov.astype("<i8").tobytes())

    @classmethod
    def load(cls, path) -> "MemoryStore":
        path = Path(path)
        meta = dict(line.split(" ", 1) for line in (path / "manifest.txt").read_text().splitlines() if line)
        d, count = int(meta["d_mem"]), int(meta["count"])
        mem = cls(
            d,
            capacity=int(meta["capacity"]),
            index=meta["index"],
            n_list=int(meta["n_list"]),
            n_probe=int(meta["n_probe"]),
            rebuild_threshold=int(meta["rebuild_threshold"]),
            seed=int(meta["seed"]),
        )
        raw = (path / "data.bin").read_bytes()
        nf = count * d * 4
        keys = np.frombuffer(raw[:nf], dtype="<f4").reshape(count, d)
        values = np.frombuffer(raw[nf : 2 * nf], dtype="<f4").reshape(count, d)
        prov = np.frombuffer(raw[2 * nf :], dtype="<i8").reshape(count, 2)
        for i in range(count):
            mem.add(keys[i], values[i], int(prov[i, 0]), int(prov[i, 1]), normalize_key=False)
        return mem


# ---------------------------------------------------------------------- fusion


@dataclass
class FusionParams:
    W_fuse: Tensor  # [2*d_mem, d_mem]

    def tensors(self):
        return {"W_fuse": self.W_fuse}


def init_fusion(d_mem, rng, dtype=np.float64) -> FusionParams:
    w = rng.normal(0.0, 1.0 / np.sqrt(2 * d_mem), size=(2 * d_mem, d_mem)).astype(dtype)
    return FusionParams(Tensor(w, requires_grad=True))


def mean_retrieved(values, d_mem, dtype=np.float64) -> np.ndarray:
    """Average of the retrieved value vectors; zeros when nothing came back."""
    if len(values) == 0:
        return np.zeros(d_mem, dtype=dtype)
    return np.mean([np.asarray(v, dtype=dtype) for v in values], axis=0)


def fuse(c_m: Tensor, retrieved, p: FusionParams) -> Tensor:
    """tanh([c_m, rbar] @ W_fuse).

    ``retrieved`` is either a [B, d_mem] array of already-averaged values or a
    list (one per row) of retrieved value vectors. Retrieved values enter as
    constants.
    """
    d_mem = c_m.shape[-1]
    if isinstance(retrieved, (list, tuple)):
        rbar = np.stack([mean_retrieved(vals, d_mem, c_m.dtype) for vals in retrieved])
    else:
        rbar = np.asarray(retrieved, dtype=c_m.dtype).reshape(c_m.shape)
    return ops.tanh(ops.matmul(ops.concat([c_m, Tensor(rbar, op="const")], axis=-1), p.W_fuse))
