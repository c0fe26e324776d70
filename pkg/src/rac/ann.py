"""Exact and HNSW k-nearest-neighbor indexes with recall and timing tools.

Both index kinds serve k-NN over a write-once key store. Cosine is
implemented as L2 over unit-normalized vectors (the orderings are
monotone-equivalent), so a single squared-L2 search kernel covers both
metrics. Keys are held in float32 canonically (what serialization writes)
and promoted once to float64 for distance evaluation, which makes
save/load round-trips answer queries bit-identically.

The HNSW build is single-threaded and deterministic under its seed; built
indexes are immutable and safe for concurrent read-only queries (each
query allocates its own visited set).
"""

from __future__ import annotations

import heapq
import math
import struct
import time
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ValidationError

INDEX_MAGIC = b"RACIDX1\n"
METRICS = ("l2", "cosine")


def _check_metric(metric: str):
    if metric not in METRICS:
        raise ValidationError(f"metric must be one of {METRICS}, got {metric!r}")


@dataclass
class Neighbors:
    """Query result: record ids with ascending distances."""

    ids: np.ndarray  # (m,) int64 payload ids
    distances: np.ndarray  # (m,) float64, sorted ascending

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.distances = np.asarray(self.distances, dtype=np.float64)
        if self.ids.shape != self.distances.shape or self.ids.ndim != 1:
            raise ValidationError("neighbor ids and distances must be matching vectors")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValidationError("neighbor ids must be unique")
        if (np.diff(self.distances) < 0).any():
            raise ValidationError("neighbor distances must be ascending")


class KeyStore:
    """Immutable J x d key matrix with unique payload ids.

    Keys are stored float32: that is the canonical representation every
    index and the on-disk format share.
    """

    def __init__(self, keys: np.ndarray, ids: np.ndarray | None = None):
        keys = np.ascontiguousarray(keys, dtype=np.float32)
        if keys.ndim != 2 or keys.shape[0] < 1 or keys.shape[1] < 1:
            raise ValidationError("keys must be a non-empty (J, d) matrix")
        if ids is None:
            ids = np.arange(keys.shape[0], dtype=np.int64)
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape != (keys.shape[0],):
            raise ValidationError("ids must be a vector with one entry per key")
        if len(np.unique(ids)) != len(ids):
            raise ValidationError("payload ids must be unique")
        self.keys = keys
        self.ids = ids

    @property
    def n(self) -> int:
        return self.keys.shape[0]

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    def same_content(self, other: "KeyStore") -> bool:
        return np.array_equal(self.ids, other.ids) and np.array_equal(self.keys, other.keys)


@dataclass(frozen=True)
class HnswParams:
    """HNSW build/query hyperparameters.

    level_lambda=None derives the standard 1/ln(M) level-assignment rate;
    ef_search=None derives max(2k, 100) at query time.
    """

    M: int = 32
    ef_construction: int = 200
    ef_search: int | None = None
    level_lambda: float | None = None
    seed: int = 0

    def validate(self):
        if self.M < 2:
            raise ValidationError("HNSW M must be at least 2")
        if self.ef_construction < self.M:
            raise ValidationError("ef_construction must be at least M")
        if self.level_lambda is not None and self.level_lambda <= 0:
            raise ValidationError("level_lambda must be positive")

    @property
    def effective_lambda(self) -> float:
        return self.level_lambda if self.level_lambda is not None else 1.0 / math.log(self.M)


def _normalized_f32(keys: np.ndarray) -> np.ndarray:
    """Unit-normalize rows in float64, then freeze to the canonical float32."""
    k64 = keys.astype(np.float64)
    norms = np.maximum(np.linalg.norm(k64, axis=1, keepdims=True), 1e-12)
    return np.ascontiguousarray((k64 / norms).astype(np.float32))


def _key_norms(K64: np.ndarray) -> np.ndarray:
    return (K64**2).sum(axis=1)


class _IndexBase:
    kind = "base"

    def __init__(self, store: KeyStore, metric: str, K32: np.ndarray):
        self.store = store
        self.metric = metric
        self._K32 = K32
        self._K64 = K32.astype(np.float64)
        self._knorm2 = _key_norms(self._K64)
        self.build_seconds = 0.0

    @property
    def n(self) -> int:
        return self._K32.shape[0]

    @property
    def dim(self) -> int:
        return self._K32.shape[1]

    def _prep_query(self, q: np.ndarray, k: int) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.dim:
            raise ValidationError(f"query has dimension {q.shape[0]}, index expects {self.dim}")
        if k < 1:
            raise ValidationError("k must be at least 1")
        if self.metric == "cosine":
            q = q / max(np.linalg.norm(q), 1e-12)
        return q

    def _finish(self, rows: np.ndarray, d2: np.ndarray, k: int) -> Neighbors:
        """Order candidate rows by (distance, payload id) and take the top k."""
        pids = self.store.ids[rows]
        order = np.lexsort((pids, d2))[:k]
        return Neighbors(pids[order], np.sqrt(np.maximum(d2[order], 0.0)))


class ExactIndex(_IndexBase):
    """Full-scan index: provably the k smallest distances every query."""

    kind = "exact"

    def query(self, q: np.ndarray, k: int) -> Neighbors:
        q = self._prep_query(q, k)
        d2 = ((self._K64 - q) ** 2).sum(axis=1)
        return self._finish(np.arange(self.n), d2, k)


def build_exact(store: KeyStore, metric: str = "l2") -> ExactIndex:
    _check_metric(metric)
    t0 = time.perf_counter()
    K32 = _normalized_f32(store.keys) if metric == "cosine" else store.keys
    index = ExactIndex(store, metric, K32)
    index.build_seconds = time.perf_counter() - t0
    return index


class HnswIndex(_IndexBase):
    """Multi-layer navigable small-world graph.

    Node degrees are capped at M on upper layers and 2M on layer 0; links
    are chosen by the spread heuristic (a candidate is kept when it sits
    closer to the query than to every already-kept candidate, and pruned
    candidates refill remaining slots nearest-first).
    """

    kind = "hnsw"

    def __init__(self, store, metric, K32, params: HnswParams):
        super().__init__(store, metric, K32)
        self.params = params
        self._levels = np.zeros(self.n, dtype=np.int64)
        # layer 0 adjacency as a flat matrix (one spare column for the
        # transient overflow that triggers a shrink); upper layers are
        # sparse, so they live in per-(row, layer) lists
        self._adj0 = np.full((self.n, 2 * params.M + 1), -1, dtype=np.int64)
        self._deg0 = np.zeros(self.n, dtype=np.int64)
        self._adj_up: dict[tuple[int, int], list[int]] = {}
        self._entry = 0
        self._max_level = 0

    def _neighbors(self, row: int, layer: int) -> np.ndarray:
        if layer == 0:
            return self._adj0[row, : self._deg0[row]]
        return np.array(self._adj_up.get((row, layer), ()), dtype=np.int64)

    # -- construction -------------------------------------------------

    def _build(self):
        params = self.params
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(params.seed)))
        # u in (0, 1]: level = floor(-ln(u) / ln(M))
        u = 1.0 - rng.random(self.n)
        self._levels = np.floor(-np.log(u) * params.effective_lambda).astype(np.int64)
        for row in np.flatnonzero(self._levels > 0):
            for lc in range(1, int(self._levels[row]) + 1):
                self._adj_up[(int(row), lc)] = []
        self._entry = 0
        self._max_level = int(self._levels[0])
        self._stamps = np.zeros(self.n, dtype=np.int64)
        self._stamp = 0
        for row in range(1, self.n):
            self._insert(row)
        del self._stamps, self._stamp

    def _insert(self, row: int):
        q = self._K64[row]
        qq = self._knorm2[row]
        level = int(self._levels[row])
        ep_row = self._entry
        ep_d2 = self._pair_d2(ep_row, qq, q)
        for lc in range(self._max_level, level, -1):
            ep_row, ep_d2 = self._greedy(q, qq, ep_row, ep_d2, lc)
        eps = [(ep_d2, ep_row)]
        M = self.params.M
        for lc in range(min(self._max_level, level), -1, -1):
            w = self._search_layer_build(q, qq, eps, self.params.ef_construction, lc)
            selected = self._select_heuristic(w, M)
            if lc == 0:
                self._adj0[row, : len(selected)] = selected
                self._deg0[row] = len(selected)
                cap = 2 * M
            else:
                self._adj_up[(row, lc)] = selected
                cap = M
            for nb in selected:
                if lc == 0:
                    deg = self._deg0[nb]
                    self._adj0[nb, deg] = row
                    self._deg0[nb] = deg + 1
                    if deg + 1 > cap:
                        self._shrink(nb, lc, cap)
                else:
                    lst = self._adj_up[(nb, lc)]
                    lst.append(row)
                    if len(lst) > cap:
                        self._shrink(nb, lc, cap)
            eps = w
        if level > self._max_level:
            self._entry = row
            self._max_level = level

    def _pair_d2(self, row: int, qq: float, q: np.ndarray) -> float:
        return float(self._knorm2[row] - 2.0 * (self._K64[row] @ q) + qq)

    def _batch_d2(self, rows: np.ndarray, q: np.ndarray, qq: float) -> np.ndarray:
        return self._knorm2[rows] - 2.0 * (self._K64[rows] @ q) + qq

    def _greedy(self, q, qq, row, d2, layer) -> tuple[int, float]:
        """Descend to the locally closest node of one layer."""
        while True:
            rows = self._neighbors(row, layer)
            if not len(rows):
                return row, d2
            cand = self._batch_d2(rows, q, qq)
            j = int(np.lexsort((rows, cand))[0])
            if cand[j] < d2:
                row, d2 = int(rows[j]), float(cand[j])
            else:
                return row, d2

    def _search_layer_build(self, q, qq, eps, ef, layer):
        self._stamp += 1
        stamps = self._stamps
        for _, r in eps:
            stamps[r] = self._stamp
        return self._search_layer(q, qq, eps, ef, layer, stamps, self._stamp)

    def _search_layer(self, q, qq, eps, ef, layer, stamps, stamp):
        """Beam search over one layer; returns ≤ ef (d2, row) pairs, unsorted.

        Neighbor expansions iterate in stored adjacency order, which keeps
        the search deterministic and serialization-stable.
        """
        cand = list(eps)
        heapq.heapify(cand)
        result = [(-d2, -r) for d2, r in eps]
        heapq.heapify(result)
        while len(result) > ef:
            heapq.heappop(result)
        K64, knorm2 = self._K64, self._knorm2
        adj0, deg0 = self._adj0, self._deg0
        push, pop, replace = heapq.heappush, heapq.heappop, heapq.heapreplace
        while cand:
            d_c, c = pop(cand)
            farthest = -result[0][0]
            at_capacity = len(result) >= ef
            if d_c > farthest and at_capacity:
                break
            rows = adj0[c, : deg0[c]] if layer == 0 else self._neighbors(c, layer)
            if not len(rows):
                continue
            fresh = stamps[rows] != stamp
            if not fresh.any():
                continue
            rows = rows[fresh]
            stamps[rows] = stamp
            d2 = knorm2[rows] - 2.0 * (K64[rows] @ q) + qq
            if at_capacity:
                # conservative prefilter: farthest only shrinks from here on
                keep = d2 < farthest
                if not keep.any():
                    continue
                rows, d2 = rows[keep], d2[keep]
            rows = rows.tolist()
            d2 = d2.tolist()
            for e, d_e in zip(rows, d2):
                if len(result) < ef:
                    push(cand, (d_e, e))
                    push(result, (-d_e, -e))
                elif d_e < -result[0][0]:
                    push(cand, (d_e, e))
                    replace(result, (-d_e, -e))
        return [(-nd, -nr) for nd, nr in result]

    def _select_heuristic(self, candidates, cap: int) -> list[int]:
        """Spread-heuristic link selection with pruned-candidate refill.

        A candidate is kept when it is closer to the query point than to
        every already-kept candidate; pruned ones refill leftover slots
        nearest-first.
        """
        if len(candidates) <= cap:
            return [r for _, r in sorted(candidates)]
        d2s = np.array([d for d, _ in candidates])
        rows = np.array([r for _, r in candidates], dtype=np.int64)
        order = np.lexsort((rows, d2s))
        d2s, rows = d2s[order], rows[order]
        Kc = self._K64[rows]
        cn = self._knorm2[rows]
        pair = cn[:, None] + cn[None, :] - 2.0 * (Kc @ Kc.T)
        # min distance from each candidate to the kept set, updated as it grows
        min_to_kept = np.full(len(rows), np.inf)
        kept: list[int] = []
        pruned: list[int] = []
        for i in range(len(rows)):
            if len(kept) >= cap:
                break
            if d2s[i] < min_to_kept[i]:
                kept.append(i)
                np.minimum(min_to_kept, pair[:, i], out=min_to_kept)
            else:
                pruned.append(i)
        for i in pruned:
            if len(kept) >= cap:
                break
            kept.append(i)
        return [int(rows[i]) for i in kept]

    def _shrink(self, row: int, layer: int, cap: int):
        rows = self._neighbors(row, layer).copy()
        d2 = self._batch_d2(rows, self._K64[row], float(self._knorm2[row]))
        selected = self._select_heuristic(list(zip(d2.tolist(), rows.tolist())), cap)
        if layer == 0:
            self._adj0[row, : len(selected)] = selected
            self._deg0[row] = len(selected)
        else:
            self._adj_up[(row, layer)] = selected

    # -- queries ------------------------------------------------------

    def query(self, q: np.ndarray, k: int, ef_search: int | None = None) -> Neighbors:
        q = self._prep_query(q, k)
        if ef_search is None:
            ef_search = self.params.ef_search
        if ef_search is None:
            ef_search = max(2 * k, 100)
        if ef_search < k:
            raise ValidationError(f"ef_search={ef_search} must be at least k={k}")
        qq = float(q @ q)
        row, d2 = self._entry, self._pair_d2(self._entry, qq, q)
        for lc in range(self._max_level, 0, -1):
            row, d2 = self._greedy(q, qq, row, d2, lc)
        stamps = np.zeros(self.n, dtype=bool)  # per-query: concurrent-safe
        stamps[row] = True
        found = self._search_layer(q, qq, [(d2, row)], ef_search, 0, stamps, True)
        d2s = np.array([d for d, _ in found])
        rows = np.array([r for _, r in found], dtype=np.int64)
        return self._finish(rows, d2s, k)

    def degree_stats(self) -> dict[str, int]:
        upper = [len(lst) for lst in self._adj_up.values()]
        return {
            "max_degree_layer0": int(self._deg0.max()),
            "max_degree_upper": max(upper) if upper else 0,
            "max_level": self._max_level,
        }


def build_hnsw(store: KeyStore, metric: str = "l2", params: HnswParams | None = None) -> HnswIndex:
    _check_metric(metric)
    params = params or HnswParams()
    params.validate()
    t0 = time.perf_counter()
    K32 = _normalized_f32(store.keys) if metric == "cosine" else store.keys
    index = HnswIndex(store, metric, K32, params)
    index._build()
    index.build_seconds = time.perf_counter() - t0
    return index


# ---------------------------------------------------------------------------
# Recall and timing
# ---------------------------------------------------------------------------


def recall_at_k(approx_index, exact_index, queries: np.ndarray, k: int) -> float:
    """Mean over queries of |approx ids ∩ exact ids| / k."""
    if approx_index.metric != exact_index.metric:
        raise ValidationError("recall comparison requires matching metrics")
    if not approx_index.store.same_content(exact_index.store):
        raise ValidationError("recall comparison requires identical key stores")
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    total = 0.0
    for q in queries:
        approx = set(approx_index.query(q, k).ids.tolist())
        exact = set(exact_index.query(q, k).ids.tolist())
        total += len(approx & exact) / k
    return total / len(queries)


def bench_index(index, queries: np.ndarray, k: int = 10, repeats: int = 1) -> dict:
    """Wall-clock query timing (mean/p50/p95 per sample) plus build rate.

    Encoder time is the caller's concern; only index.query is timed.
    """
    if repeats < 1:
        raise ValidationError("repeats must be at least 1")
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    times = []
    for _ in range(repeats):
        for q in queries:
            t0 = time.perf_counter()
            index.query(q, k)
            times.append(time.perf_counter() - t0)
    times = np.array(times)
    return {
        "kind": index.kind,
        "n_keys": index.n,
        "build_time_per_key": index.build_seconds / index.n,
        "query_time_per_sample": {
            "mean": float(times.mean()),
            "p50": float(np.quantile(times, 0.5)),
            "p95": float(np.quantile(times, 0.95)),
        },
        "total_queries": len(times),
    }


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------
# magic "RACIDX1\n", then fixed-order text lines: kind, metric, d, J, M,
# ef_construction, seed (exact indexes write zeros for the HNSW fields).
# Binary body: little-endian float32 keys (J x d), int64 payload ids (J);
# HNSW continues per node with uint64 level then, per layer, a uint64
# count followed by that many uint64 neighbor rows.


def _read_exact_bytes(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError("index file truncated")
    return data


def _read_header_line(fh) -> str:
    line = fh.readline(256)
    if not line.endswith(b"\n"):
        raise FormatError("index header truncated")
    return line[:-1].decode("ascii")


def save_index(index, path: str):
    params = getattr(index, "params", None)
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(f"{index.kind}\n".encode("ascii"))
        fh.write(f"{index.metric}\n".encode("ascii"))
        fh.write(f"{index.dim}\n".encode("ascii"))
        fh.write(f"{index.n}\n".encode("ascii"))
        fh.write(f"{params.M if params else 0}\n".encode("ascii"))
        fh.write(f"{params.ef_construction if params else 0}\n".encode("ascii"))
        fh.write(f"{params.seed if params else 0}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(index._K32, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(index.store.ids, dtype="<i8").tobytes())
        if index.kind == "hnsw":
            for row in range(index.n):
                fh.write(struct.pack("<Q", int(index._levels[row])))
                for lc in range(int(index._levels[row]) + 1):
                    lst = index._neighbors(row, lc).tolist()
                    fh.write(struct.pack("<Q", len(lst)))
                    if lst:
                        fh.write(struct.pack(f"<{len(lst)}Q", *lst))


def load_index(path: str):
    """Rebuild an index from disk; queries answer bit-identically to the
    saved instance (keys stay the same float32 bytes, graphs reload as-is)."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise FormatError(f"cannot read index {path}: {exc}") from exc
    with fh:
        if fh.read(len(INDEX_MAGIC)) != INDEX_MAGIC:
            raise FormatError(f"{path}: not an index file (bad magic)")
        kind = _read_header_line(fh)
        metric = _read_header_line(fh)
        try:
            d = int(_read_header_line(fh))
            j = int(_read_header_line(fh))
            m = int(_read_header_line(fh))
            ef_c = int(_read_header_line(fh))
            seed = int(_read_header_line(fh))
        except ValueError as exc:
            raise FormatError(f"{path}: non-integer header field") from exc
        if kind not in ("exact", "hnsw"):
            raise FormatError(f"{path}: unknown index kind {kind!r}")
        if metric not in METRICS:
            raise FormatError(f"{path}: unknown metric {metric!r}")
        if d < 1 or j < 1:
            raise FormatError(f"{path}: implausible dimensions J={j}, d={d}")
        K32 = (
            np.frombuffer(_read_exact_bytes(fh, 4 * j * d), dtype="<f4")
            .reshape(j, d)
            .copy()
        )
        ids = np.frombuffer(_read_exact_bytes(fh, 8 * j), dtype="<i8").copy()
        store = KeyStore(K32, ids)
        if kind == "exact":
            index = ExactIndex(store, metric, K32)
        else:
            params = HnswParams(M=m, ef_construction=ef_c, seed=seed)
            params.validate()
            index = HnswIndex(store, metric, K32, params)
            levels = np.zeros(j, dtype=np.int64)
            for row in range(j):
                (lvl,) = struct.unpack("<Q", _read_exact_bytes(fh, 8))
                if lvl > 64:
                    raise FormatError(f"{path}: implausible node level {lvl}")
                levels[row] = lvl
                for lc in range(lvl + 1):
                    (count,) = struct.unpack("<Q", _read_exact_bytes(fh, 8))
                    if count > j:
                        raise FormatError(f"{path}: implausible adjacency length {count}")
                    lst = (
                        list(struct.unpack(f"<{count}Q", _read_exact_bytes(fh, 8 * count)))
                        if count
                        else []
                    )
                    if lc == 0:
                        if count > index._adj0.shape[1]:
                            raise FormatError(f"{path}: layer-0 degree {count} exceeds 2M")
                        index._adj0[row, :count] = lst
                        index._deg0[row] = count
                    else:
                        index._adj_up[(row, lc)] = lst
            index._levels = levels
            index._max_level = int(levels.max())
            index._entry = int(np.flatnonzero(levels == index._max_level)[0])
        trailing = fh.read(1)
        if trailing:
            raise FormatError(f"{path}: trailing bytes after index payload")
    return index
