"""Task-agnostic substructure detection and super graphs of substructures."""
from __future__ import annotations

import hashlib
import json
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .graph import Graph, wl_refine

CACHE_VERSION = 1


@dataclass(frozen=True, eq=False)
class Partition:
    """Node -> substructure assignment with dense ids ``0..n_sub-1``."""

    assignment: np.ndarray
    n_sub: int

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64).copy()
        a.setflags(write=False)
        object.__setattr__(self, "assignment", a)
        object.__setattr__(self, "n_sub", int(self.n_sub))

    @property
    def members(self) -> list[np.ndarray]:
        order = np.argsort(self.assignment, kind="stable")
        bounds = np.searchsorted(self.assignment[order], np.arange(self.n_sub + 1))
        return [order[bounds[j]:bounds[j + 1]] for j in range(self.n_sub)]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_sub)

    @classmethod
    def from_labels(cls, labels) -> "Partition":
        """Densify arbitrary community labels, numbering by first occurrence."""
        labels = np.asarray(labels)
        _, first, inv = np.unique(labels, return_index=True, return_inverse=True)
        rank = np.empty(len(first), dtype=np.int64)
        rank[np.argsort(first, kind="stable")] = np.arange(len(first))
        return cls(rank[inv], len(first))

    def __eq__(self, other):
        if not isinstance(other, Partition):
            return NotImplemented
        return self.n_sub == other.n_sub and np.array_equal(self.assignment, other.assignment)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SuperGraph:
    """Super graph over substructures; every super node carries one self-loop."""

    node_count: int
    edges: np.ndarray  # (k, 2), j < k, no duplicates, no self-loops

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2).copy()
        e.setflags(write=False)
        object.__setattr__(self, "edges", e)

    @property
    def self_loops(self) -> np.ndarray:
        return np.arange(self.node_count)

    def degrees(self) -> np.ndarray:
        """Degrees excluding self-loops."""
        deg = np.zeros(self.node_count, dtype=np.int64)
        np.add.at(deg, self.edges.ravel(), 1)
        return deg

    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.node_count)]
        for j, k in self.edges:
            adj[j].append(int(k))
            adj[k].append(int(j))
        return adj

    def adjacency_with_loops(self) -> sp.csr_matrix:
        n = self.node_count
        rows = np.concatenate([self.edges[:, 0], self.edges[:, 1], np.arange(n)])
        cols = np.concatenate([self.edges[:, 1], self.edges[:, 0], np.arange(n)])
        return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))

    def __eq__(self, other):
        if not isinstance(other, SuperGraph):
            return NotImplemented
        return self.node_count == other.node_count and np.array_equal(self.edges, other.edges)

    __hash__ = None


# --------------------------------------------------------------------------
# modularity


def modularity(graph: Graph, partition: Partition) -> float:
    """Newman modularity ``sum_c e_c/m - (d_c/2m)^2``."""
    m = graph.edge_count
    if m == 0:
        raise ValueError("modularity is undefined for an edgeless graph")
    a = partition.assignment
    deg = graph.degrees()
    d_c = np.bincount(a, weights=deg, minlength=partition.n_sub)
    intra = a[graph.edges[:, 0]] == a[graph.edges[:, 1]]
    e_c = np.bincount(a[graph.edges[intra, 0]], minlength=partition.n_sub)
    return float(np.sum(e_c / m - (d_c / (2.0 * m)) ** 2))


def detect_substructures_modularity(graph: Graph) -> Partition:
    """Greedy agglomerative (Clauset-Newman-Moore) modularity maximisation.

    Only adjacent community pairs are merge candidates. Gains are compared as
    exact integers ``2m * L_ij - d_i * d_j`` (proportional to delta-Q), ties
    go to the lexicographically smallest community-id pair; a merged
    community keeps the smaller id.
    """
    n = graph.node_count
    m = graph.edge_count
    comm_of = list(range(n))
    if m == 0:
        return Partition.from_labels(comm_of)
    deg = graph.degrees()
    d = {i: int(deg[i]) for i in range(n)}
    links: dict[int, dict[int, int]] = defaultdict(dict)
    for u, v in graph.edges:
        u, v = int(u), int(v)
        links[u][v] = links[u].get(v, 0) + 1
        links[v][u] = links[v].get(u, 0) + 1
    members = {i: [i] for i in range(n)}
    two_m = 2 * m
    while True:
        best = None
        for i, nb in links.items():
            for j, l_ij in nb.items():
                if j <= i:
                    continue
                gain = two_m * l_ij - d[i] * d[j]
                if gain > 0 and (best is None or gain > best[0] or (gain == best[0] and (i, j) < best[1])):
                    best = (gain, (i, j))
        if best is None:
            break
        i, j = best[1]
        # merge j into i
        for k, l_jk in links.pop(j).items():
            del links[k][j]
            if k == i:
                continue
            links[i][k] = links[i].get(k, 0) + l_jk
            links[k][i] = links[k].get(i, 0) + l_jk
        d[i] += d.pop(j)
        members[i].extend(members.pop(j))
    for cid, nodes in members.items():
        for v in nodes:
            comm_of[v] = cid
    return Partition.from_labels(comm_of)


def detect_substructures_lp(graph: Graph, seed: int = 0, max_iter: int = 100) -> Partition:
    """Asynchronous label propagation, then split disconnected label classes.

    A node switches label only when its current label is not among the most
    frequent neighbour labels; the smallest such label wins.
    """
    rng = np.random.default_rng(seed)
    nbrs = graph.neighbors()
    labels = list(range(graph.node_count))
    for _ in range(max_iter):
        changed = False
        for v in rng.permutation(graph.node_count):
            if not nbrs[v]:
                continue
            counts = Counter(labels[u] for u in nbrs[v])
            top = max(counts.values())
            if counts.get(labels[v], 0) == top:
                continue
            labels[v] = min(l for l, c in counts.items() if c == top)
            changed = True
        if not changed:
            break
    return _split_disconnected(graph, labels)


def _split_disconnected(graph: Graph, labels) -> Partition:
    nbrs = graph.neighbors()
    comp = [-1] * graph.node_count
    next_id = 0
    for s in range(graph.node_count):
        if comp[s] >= 0:
            continue
        comp[s] = next_id
        stack = [s]
        while stack:
            u = stack.pop()
            for w in nbrs[u]:
                if comp[w] < 0 and labels[w] == labels[s]:
                    comp[w] = next_id
                    stack.append(w)
        next_id += 1
    return Partition.from_labels(comp)


DETECTORS = {
    "modularity": lambda g, seed=0: detect_substructures_modularity(g),
    "lp": lambda g, seed=0: detect_substructures_lp(g, seed),
}


def detect(graph: Graph, detector: str = "modularity", seed: int = 0) -> Partition:
    try:
        fn = DETECTORS[detector]
    except KeyError:
        raise ValueError(f"unknown detector {detector!r}; choose from {sorted(DETECTORS)}") from None
    return fn(graph, seed)


# --------------------------------------------------------------------------
# validation and super graph


def _connected(nodes: Sequence[int], nbrs) -> bool:
    nodes = set(int(v) for v in nodes)
    if not nodes:
        return False
    start = next(iter(nodes))
    seen = {start}
    stack = [start]
    while stack:
        u = stack.pop()
        for w in nbrs[u]:
            if w in nodes and w not in seen:
                seen.add(w)
                stack.append(w)
    return len(seen) == len(nodes)


def validate_partition(graph: Graph, partition: Partition) -> list[tuple[str, Optional[int]]]:
    """Check the three substructure properties; returns a list of violations.

    Violation codes: ``"i"`` (overlap / ill-formed assignment), ``"ii"``
    (nodes not covered) and ``"iii"`` (disconnected substructure), each with
    the offending substructure id (None when not attributable).
    """
    out: list[tuple[str, Optional[int]]] = []
    a = np.asarray(partition.assignment)
    if a.ndim != 1:
        return [("i", None)]
    if len(a) < graph.node_count:
        out.append(("ii", None))
    elif len(a) > graph.node_count:
        out.append(("i", None))
    valid = (a >= 0) & (a < partition.n_sub)
    if not np.all(valid[: graph.node_count]):
        out.append(("ii", None))
    if out:
        return out
    sizes = partition.sizes()
    for j in np.flatnonzero(sizes == 0):
        out.append(("ii", int(j)))
    nbrs = graph.neighbors()
    for j, mem in enumerate(partition.members):
        if len(mem) and not _connected(mem, nbrs):
            out.append(("iii", j))
    return out


def build_super_graph(graph: Graph, partition: Partition) -> SuperGraph:
    if validate_partition(graph, partition):
        raise ValueError("invalid partition")
    a = partition.assignment
    if graph.edge_count == 0:
        return SuperGraph(partition.n_sub, np.zeros((0, 2), dtype=np.int64))
    pairs = np.stack([a[graph.edges[:, 0]], a[graph.edges[:, 1]]], axis=1)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    pairs = np.sort(pairs, axis=1)
    if len(pairs):
        pairs = np.unique(pairs, axis=0)
    return SuperGraph(partition.n_sub, pairs)


def induced_subgraph(graph: Graph, nodes) -> Graph:
    nodes = np.asarray(nodes, dtype=np.int64)
    remap = -np.ones(graph.node_count, dtype=np.int64)
    remap[nodes] = np.arange(len(nodes))
    keep = (remap[graph.edges[:, 0]] >= 0) & (remap[graph.edges[:, 1]] >= 0)
    nl = None if graph.node_labels is None else graph.node_labels[nodes]
    return Graph(len(nodes), remap[graph.edges[keep]], graph.features[nodes], graph.label, nl)


# --------------------------------------------------------------------------
# fingerprints and novelty


def substructure_fingerprint(graph: Graph, partition: Partition, sub_id: int, rounds: int = 3) -> int:
    """64-bit hash of (size, sorted degrees, WL histogram) of the induced substructure.

    WL is seeded by discrete node labels if the graph has them, else by
    induced-subgraph degrees. Continuous attributes are ignored.
    """
    if not 0 <= sub_id < partition.n_sub:
        raise ValueError(f"substructure id {sub_id} out of range")
    sub = induced_subgraph(graph, partition.members[sub_id])
    deg = sub.degrees()
    init = sub.node_labels if sub.node_labels is not None else deg
    wl = wl_refine(sub, rounds, init=init)
    payload = f"{sub.node_count}|{','.join(map(str, sorted(deg.tolist())))}|{wl.hash}"
    return int.from_bytes(hashlib.blake2b(payload.encode(), digest_size=8).digest(), "little")


def graph_fingerprints(graph: Graph, partition: Partition, rounds: int = 3) -> set[int]:
    return {substructure_fingerprint(graph, partition, j, rounds) for j in range(partition.n_sub)}


def novelty_rate(id_items, ood_items, rounds: int = 3) -> float:
    """Fraction of OOD graphs having a substructure whose fingerprint never occurs in ID.

    Both arguments are iterables of ``(graph, partition)`` pairs.
    """
    seen: set[int] = set()
    n_id = 0
    for g, p in id_items:
        seen |= graph_fingerprints(g, p, rounds)
        n_id += 1
    if n_id == 0:
        raise ValueError("novelty rate needs at least one ID graph")
    flags = [bool(graph_fingerprints(g, p, rounds) - seen) for g, p in ood_items]
    if not flags:
        raise ValueError("novelty rate needs at least one OOD graph")
    return float(np.mean(flags))


# --------------------------------------------------------------------------
# on-disk cache


def save_partitions(path, dataset_name: str, detector: str, graphs, partitions, supers=None) -> None:
    supers = supers or [build_super_graph(g, p) for g, p in zip(graphs, partitions)]
    doc = {
        "dataset": dataset_name,
        "detector": detector,
        "version": CACHE_VERSION,
        "graphs": [
            {"n_sub": p.n_sub, "assignment": p.assignment.tolist(), "super_edges": s.edges.tolist()}
            for p, s in zip(partitions, supers)
        ],
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")), encoding="utf-8")


def load_partitions(path, dataset_name: Optional[str] = None, detector: Optional[str] = None):
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != CACHE_VERSION:
        raise ValueError(f"{path}: unsupported partition cache version {doc.get('version')}")
    if dataset_name is not None and doc["dataset"] != dataset_name:
        raise ValueError(f"{path}: cache is for dataset {doc['dataset']!r}")
    if detector is not None and doc["detector"] != detector:
        raise ValueError(f"{path}: cache is for detector {doc['detector']!r}")
    parts = [Partition(g["assignment"], g["n_sub"]) for g in doc["graphs"]]
    supers = [SuperGraph(g["n_sub"], np.asarray(g["super_edges"]).reshape(-1, 2)) for g in doc["graphs"]]
    return parts, supers
