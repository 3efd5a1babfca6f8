"""Exact k-nearest-neighbour graphs and distance-to-center queries."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# rows per chunk are chosen so a chunk's difference tensor stays near this many floats
_CHUNK_FLOATS = 4_000_000


@dataclass(frozen=True)
class NeighborGraph:
    """Row ``i`` lists the ``k`` nearest neighbours of point ``i`` by ascending distance, ``i`` first."""

    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices)
        if idx.ndim != 2:
            raise ValueError("indices must be an N x k matrix")
        object.__setattr__(self, "indices", idx.astype(np.int64, copy=False))
        self.indices.setflags(write=False)

    @property
    def N(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def validate(self) -> None:
        idx = self.indices
        if not np.array_equal(idx[:, 0], np.arange(self.N)):
            raise ValueError("every row must start with the point itself")
        if idx.min() < 0 or idx.max() >= self.N:
            raise ValueError("neighbour index out of range")
        s = np.sort(idx, axis=1)
        if np.any(s[:, 1:] == s[:, :-1]):
            raise ValueError("duplicate neighbour within a row")


def build_knn(X, k: int) -> NeighborGraph:
    """Brute-force exact k-NN under the Euclidean metric.

    Each point is its own first neighbour; remaining ties go to the lower index.
    Cost is O(N^2 D).
    """
    X = np.asarray(X, dtype=np.float64)
    N, D = X.shape
    if not 1 <= k <= N:
        raise ValueError(f"need 1 <= k <= N, got k={k}, N={N}")
    out = np.empty((N, k), dtype=np.int64)
    chunk = max(1, _CHUNK_FLOATS // max(1, N * D))
    for start in range(0, N, chunk):
        stop = min(N, start + chunk)
        diff = X[start:stop, None, :] - X[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        rows = np.arange(stop - start)
        d2[rows, rows + start] = -1.0
        if k < N:
            # a stable sort on the k smallest candidates would miss ties at the cut-off,
            # so keep every candidate with distance <= the k-th smallest
            kth = np.partition(d2, k - 1, axis=1)[:, k - 1 : k]
            for r in range(stop - start):
                cand = np.flatnonzero(d2[r] <= kth[r, 0])
                order = cand[np.argsort(d2[r, cand], kind="stable")]
                out[start + r] = order[:k]
        else:
            out[start:stop] = np.argsort(d2, axis=1, kind="stable")
    return NeighborGraph(out)


def reverse_membership_counts(g: NeighborGraph) -> np.ndarray:
    """``counts[j]`` = number of neighbourhoods (rows) that contain ``j``."""
    return np.bincount(g.indices.ravel(), minlength=g.N)


def min_center_distance(x, centers) -> float | np.ndarray:
    """Euclidean distance from ``x`` (one point or a batch of rows) to the nearest center."""
    x = np.asarray(x, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim != 2 or len(centers) < 1:
        raise ValueError("centers must be a non-empty L x D matrix")
    single = x.ndim == 1
    xs = x[None, :] if single else x
    diff = xs[:, None, :] - centers[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff).min(axis=1))
    return float(d[0]) if single else d


# -- on-disk cache -------------------------------------------------------------


def graph_key(X, k: int) -> str:
    X = np.ascontiguousarray(np.asarray(X, dtype="<f8"))
    h = hashlib.sha256()
    h.update(struct.pack("<II", *X.shape))
    h.update(X.tobytes())
    h.update(struct.pack("<I", k))
    return h.hexdigest()


def save_graph(g: NeighborGraph, path) -> None:
    """Little-endian u32 N, u32 k, then N*k u32 indices."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", g.N, g.k))
        fh.write(np.ascontiguousarray(g.indices, dtype="<u4").tobytes())


def load_graph(path) -> NeighborGraph:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated graph file")
    N, k = struct.unpack("<II", raw[:8])
    if len(raw) != 8 + 4 * N * k:
        raise ValueError(f"{path}: expected {8 + 4 * N * k} bytes, found {len(raw)}")
    idx = np.frombuffer(raw, dtype="<u4", offset=8).reshape(N, k).astype(np.int64)
    return NeighborGraph(idx)


def cached_knn(X, k: int, cache_dir) -> NeighborGraph:
    path = Path(cache_dir) / f"knn-{graph_key(X, k)}.bin"
    if path.exists():
        return load_graph(path)
    g = build_knn(X, k)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_graph(g, path)
    return g
