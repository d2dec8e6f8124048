"""Multiplex intent graph: one layer of nodes per intent, one node per
candidate pair in every layer, directed kNN edges inside a layer and peer
edges between the layers of the same pair."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .core import DataError
from .embedding import PairEmbeddingSet, _read_matrix, _write_matrix

INTRA, INTER = "intra", "inter"
RELATIONS = (INTRA, INTER)
DEFAULT_K_GRID = (0, 2, 4, 6, 8, 10)
GRAPH_VERSION = 1


@dataclass
class GraphConfig:
    k: int = 4
    project_dim: int | None = None

    def __post_init__(self):
        if self.k < 0:
            raise ValueError(f"k must be >= 0, got {self.k}")


def _sq_dists_block(q, x, x_norms):
    d = (q * q).sum(1)[:, None] + x_norms[None, :] - 2.0 * (q @ x.T)
    return np.maximum(d, 0.0)


def knn_bruteforce(vectors, k, block=1024, margin=8):
    """Exact k nearest neighbours by squared Euclidean distance, self excluded.

    Returns an ``(n, k)`` int array; each row is sorted by (distance, index).
    Candidates come from the expanded-norm form and are re-ranked on exact
    differences, so the result does not depend on rounding in the expansion.
    """
    x = np.asarray(vectors, dtype=np.float64)
    n = x.shape[0]
    if k >= n:
        if k > 0:
            warnings.warn(f"k={k} >= n={n}; clamped to {max(n - 1, 0)}", stacklevel=2)
        k = max(n - 1, 0)
    if k == 0:
        return np.zeros((n, 0), dtype=np.int64)
    norms = (x * x).sum(1)
    c = min(k + margin, n - 1)
    out = np.empty((n, k), dtype=np.int64)
    for s in range(0, n, block):
        q = x[s:s + block]
        d = _sq_dists_block(q, x, norms)
        rows = np.arange(len(q))
        d[rows, s + rows] = np.inf
        cand = np.argpartition(d, c - 1, axis=1)[:, :c]
        for r in range(len(q)):
            i = s + r
            idx = cand[r]
            exact = ((x[idx] - x[i]) ** 2).sum(1)
            order = np.lexsort((idx, exact))
            kth = exact[order[k - 1]]
            approx_rest = d[r].copy()
            approx_rest[idx] = np.inf
            tol = 1e-9 * (norms[i] + norms.max() + 1.0)
            if c < n - 1 and approx_rest.min() <= kth + tol:
                # boundary too close to call: rank the whole row exactly
                idx = np.delete(np.arange(n), i)
                exact = ((x[idx] - x[i]) ** 2).sum(1)
                order = np.lexsort((idx, exact))
            out[i] = idx[order[:k]]
    return out


class MultiplexGraph:
    """Nodes are numbered ``intent * n + pair``.

    ``intra`` holds directed edges ``(src, dst)`` where ``src`` is one of the
    k nearest neighbours of ``dst`` within its layer. ``inter`` holds directed
    peer edges ``(src, dst, type)`` with ``type = src_layer * P + dst_layer``.
    Edge arrays are read-only once built.
    """

    def __init__(self, features, n, P, k, intra, inter, project_dim=None):
        self.features = [np.asarray(f, dtype=np.float64) for f in features]
        self.n, self.P, self.k = n, P, k
        self.intra = np.asarray(intra, dtype=np.int64).reshape(-1, 2)
        self.inter = np.asarray(inter, dtype=np.int64).reshape(-1, 3)
        self.project_dim = project_dim
        for arr in (self.intra, self.inter):
            arr.flags.writeable = False
        self._mean_ops = {}
        self._incoming = {}
        self._stacked = None
        # derived arrays kept by consumers (e.g. sliced operators); never edges
        self.cache = {}

    @property
    def n_nodes(self):
        return self.n * self.P

    def node(self, pair_idx, intent):
        return intent * self.n + pair_idx

    def layer_of(self, node):
        return node // self.n

    @property
    def dims(self):
        return [f.shape[1] for f in self.features]

    def stacked_features(self):
        if len(set(self.dims)) != 1:
            raise DataError(f"layers have different feature dims {self.dims}")
        if self._stacked is None:
            self._stacked = np.concatenate(self.features, axis=0)
            self._stacked.flags.writeable = False
        return self._stacked

    def edges(self, relation):
        if relation == INTRA:
            return self.intra[:, 0], self.intra[:, 1]
        if relation == INTER:
            return self.inter[:, 0], self.inter[:, 1]
        raise ValueError(f"unknown relation {relation!r}")

    def mean_operator(self, relation) -> sp.csr_matrix:
        """Sparse ``A`` with ``(A @ H)[v]`` the mean of ``H`` over v's incoming
        ``relation`` neighbours (zero row for nodes without any)."""
        if relation not in self._mean_ops:
            src, dst = self.edges(relation)
            N = self.n_nodes
            deg = np.bincount(dst, minlength=N).astype(np.float64)
            w = 1.0 / deg[dst] if len(dst) else np.zeros(0)
            A = sp.csr_matrix((w, (dst, src)), shape=(N, N))
            A.sum_duplicates()
            A.sort_indices()
            self._mean_ops[relation] = A
        return self._mean_ops[relation]

    def neighbor_sets(self, node, relation):
        """Sources of the ``relation`` edges entering ``node``, ascending."""
        if relation not in self._incoming:
            src, dst = self.edges(relation)
            order = np.lexsort((src, dst))
            self._incoming[relation] = (dst[order], src[order])
        dst, src = self._incoming[relation]
        lo, hi = np.searchsorted(dst, [node, node + 1])
        return src[lo:hi].tolist()

    def counts(self):
        return {"nodes": self.n_nodes, "inter": len(self.inter), "intra": len(self.intra)}


def build_graph(embeddings, cfg: GraphConfig | None = None) -> MultiplexGraph:
    """Intent graph over P aligned embedding sets (one per intent)."""
    cfg = cfg or GraphConfig()
    sets = list(embeddings)
    P = len(sets)
    if P < 1:
        raise DataError("need at least one embedding set")
    n = len(sets[0])
    feats = []
    for p, s in enumerate(sets):
        if isinstance(s, PairEmbeddingSet):
            ids = set(s.pair_ids.tolist())
            missing = sorted(set(range(n)) - ids)
            if missing or len(s) != n:
                raise DataError(f"layer {p} does not cover the candidate pairs; "
                                f"missing pair ids {missing[:20]}")
            feats.append(s.aligned().astype(np.float64))
        else:
            arr = np.asarray(s, dtype=np.float64)
            if arr.shape[0] != n:
                raise DataError(f"layer {p} has {arr.shape[0]} rows, expected {n}")
            feats.append(arr)
    dims = {f.shape[1] for f in feats}
    if len(dims) > 1 and cfg.project_dim is None:
        raise DataError(f"layers have different feature dims {sorted(dims)}; "
                        "set project_dim to learn a projection")
    k = cfg.k
    if k > n - 1:
        warnings.warn(f"k={k} exceeds n-1={n - 1}; clamped", stacklevel=2)
        k = max(n - 1, 0)
    intra = []
    for p, f in enumerate(feats):
        nbrs = knn_bruteforce(f, k)
        dst = np.repeat(np.arange(n), k) + p * n
        src = nbrs.reshape(-1) + p * n
        intra.append(np.stack([src, dst], axis=1))
    intra = np.concatenate(intra) if intra else np.zeros((0, 2), np.int64)
    inter = []
    pair = np.arange(n)
    for p in range(P):
        for q in range(P):
            if p != q:
                inter.append(np.stack([pair + p * n, pair + q * n,
                                       np.full(n, p * P + q)], axis=1))
    inter = np.concatenate(inter) if inter else np.zeros((0, 3), np.int64)
    return MultiplexGraph(feats, n, P, k, intra, inter, cfg.project_dim)


def save_graph(graph: MultiplexGraph, directory) -> Path:
    """Manifest JSON, little-endian uint32 edge lists and float32 feature matrices."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    graph.intra.astype("<u4").tofile(directory / "intra.bin")
    graph.inter.astype("<u4").tofile(directory / "inter.bin")
    files = []
    for p, f in enumerate(graph.features):
        name = f"features_{p}.emb"
        _write_matrix(directory / name, f.astype(np.float32))
        files.append(name)
    manifest = {"version": GRAPH_VERSION, "n": graph.n, "P": graph.P, "k": graph.k,
                "project_dim": graph.project_dim, "counts": graph.counts(),
                "intra": "intra.bin", "inter": "inter.bin", "features": files}
    path = directory / "graph.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_graph(path) -> MultiplexGraph:
    path = Path(path)
    if path.is_dir():
        path = path / "graph.json"
    m = json.loads(path.read_text())
    if m.get("version") != GRAPH_VERSION:
        raise DataError(f"{path}: unsupported graph version {m.get('version')}")
    d = path.parent
    intra = np.fromfile(d / m["intra"], dtype="<u4").astype(np.int64).reshape(-1, 2)
    inter = np.fromfile(d / m["inter"], dtype="<u4").astype(np.int64).reshape(-1, 3)
    feats = [_read_matrix(d / f) for f in m["features"]]
    g = MultiplexGraph(feats, m["n"], m["P"], m["k"], intra, inter, m.get("project_dim"))
    if g.counts() != m["counts"]:
        raise DataError(f"{path}: edge counts {g.counts()} differ from manifest {m['counts']}")
    return g
