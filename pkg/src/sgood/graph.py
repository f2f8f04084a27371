"""Graph data model, TUDataset ingestion, splitting, batching and 1-WL refinement."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def canonical_edges(edges, node_count: int) -> np.ndarray:
    """Return a sorted (m, 2) array of undirected edges with i < j.

    Duplicates (including reversed pairs) collapse; self-loops raise.
    """
    arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if arr.size and (arr.min() < 0 or arr.max() >= node_count):
        raise ValueError(f"edge endpoint out of range for {node_count} nodes")
    if np.any(arr[:, 0] == arr[:, 1]):
        raise ValueError("self-loops are not allowed in input graphs")
    arr = np.sort(arr, axis=1)
    if arr.size:
        arr = np.unique(arr, axis=0)
    return arr.reshape(-1, 2)


@dataclass(frozen=True, eq=False)
class Graph:
    """Simple undirected graph with per-node feature rows.

    ``node_labels`` are dense discrete labels (used for fingerprints and WL),
    independent of whatever ``features`` were derived from.
    """

    node_count: int
    edges: np.ndarray
    features: np.ndarray
    label: Optional[int] = None
    node_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        n = int(self.node_count)
        object.__setattr__(self, "node_count", n)
        object.__setattr__(self, "edges", _frozen(canonical_edges(self.edges, n)))
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim == 1 and feats.size == 0:
            feats = feats.reshape(n, 0)
        if feats.ndim != 2 or feats.shape[0] != n:
            raise ValueError(f"features must have shape ({n}, c), got {feats.shape}")
        object.__setattr__(self, "features", _frozen(feats.copy()))
        if self.node_labels is not None:
            nl = np.asarray(self.node_labels, dtype=np.int64).copy()
            if nl.shape != (n,):
                raise ValueError("node_labels must have one entry per node")
            object.__setattr__(self, "node_labels", _frozen(nl))
        if self.label is not None:
            object.__setattr__(self, "label", int(self.label))

    @property
    def feature_width(self) -> int:
        return self.features.shape[1]

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.node_count, dtype=np.int64)
        np.add.at(deg, self.edges.ravel(), 1)
        return deg

    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.node_count)]
        for u, v in self.edges:
            adj[u].append(int(v))
            adj[v].append(int(u))
        return adj

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency matrix."""
        n = self.node_count
        if len(self.edges) == 0:
            return sp.csr_matrix((n, n))
        rows = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        cols = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))

    def with_features(self, features) -> "Graph":
        return Graph(self.node_count, self.edges, features, self.label, self.node_labels)

    def with_label(self, label) -> "Graph":
        return Graph(self.node_count, self.edges, self.features, label, self.node_labels)

    def permute(self, perm: Sequence[int]) -> "Graph":
        """Relabel nodes: old node ``i`` becomes new node ``perm[i]``."""
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        nl = None if self.node_labels is None else self.node_labels[inv]
        return Graph(self.node_count, perm[self.edges], self.features[inv], self.label, nl)

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.node_count == other.node_count
            and self.label == other.label
            and np.array_equal(self.edges, other.edges)
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and _opt_equal(self.node_labels, other.node_labels)
        )

    __hash__ = None


def _opt_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


@dataclass(frozen=True, eq=False)
class GraphDataset:
    graphs: tuple
    num_classes: int
    feature_width: int
    name: str = ""
    # original (pre-remap) graph labels, indexed by dense label
    label_values: tuple = ()
    # original node label values, indexed by dense node label
    node_label_values: tuple = ()
    # leading feature columns that came from node attribute files
    attribute_width: int = 0

    def __post_init__(self):
        object.__setattr__(self, "graphs", tuple(self.graphs))
        for g in self.graphs:
            if g.feature_width != self.feature_width:
                raise ValueError("inconsistent feature width across graphs")
            if g.label is not None and not 0 <= g.label < max(self.num_classes, 1):
                raise ValueError(f"graph label {g.label} outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.graphs)

    def __getitem__(self, i):
        return self.graphs[i]

    def __eq__(self, other):
        if not isinstance(other, GraphDataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.feature_width == other.feature_width
            and self.name == other.name
            and tuple(self.label_values) == tuple(other.label_values)
            and tuple(self.node_label_values) == tuple(other.node_label_values)
            and self.attribute_width == other.attribute_width
            and len(self.graphs) == len(other.graphs)
            and all(a == b for a, b in zip(self.graphs, other.graphs))
        )

    __hash__ = None

    def labels(self) -> np.ndarray:
        return np.array([-1 if g.label is None else g.label for g in self.graphs], dtype=np.int64)

    def subset(self, indices) -> list[Graph]:
        return [self.graphs[i] for i in indices]

    def replace_graphs(self, graphs, feature_width=None) -> "GraphDataset":
        return GraphDataset(
            graphs,
            self.num_classes,
            self.feature_width if feature_width is None else feature_width,
            self.name,
            self.label_values,
            self.node_label_values,
            self.attribute_width if feature_width is None else 0,
        )


# --------------------------------------------------------------------------
# TUDataset text format

_SPLIT = re.compile(r"[,\s]+")


def _read_rows(path: Path, kind=float) -> list[list]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rows.append([kind(tok) for tok in _SPLIT.split(line) if tok])
    return rows


def _read_ints(path: Path) -> np.ndarray:
    rows = _read_rows(path, lambda t: int(float(t)))
    if any(len(r) != 1 for r in rows):
        raise ValueError(f"{path.name}: expected one integer per line")
    return np.array([r[0] for r in rows], dtype=np.int64)


def parse_tudataset(root, name: str) -> GraphDataset:
    """Read a dataset in the TUDataset text layout from ``root``.

    Features are node attributes when present, followed by a one-hot encoding
    of node labels when present; with neither, features have width 0 and
    should be filled by :func:`degree_features`.
    """
    root = Path(root)

    def f(suffix):
        return root / f"{name}_{suffix}.txt"

    for suffix in ("A", "graph_indicator", "graph_labels"):
        if not f(suffix).exists():
            raise FileNotFoundError(f"missing mandatory file {f(suffix)}")

    indicator = _read_ints(f("graph_indicator"))
    n_nodes = len(indicator)
    graph_labels_raw = _read_ints(f("graph_labels"))
    n_graphs = len(graph_labels_raw)
    if n_nodes and (indicator.min() < 1 or indicator.max() > n_graphs):
        raise ValueError("graph indicator refers to a graph without a label row")
    if np.any(np.diff(indicator) < 0):
        raise ValueError("graph indicator must be non-decreasing")

    edge_rows = _read_rows(f("A"), lambda t: int(float(t)))
    if any(len(r) != 2 for r in edge_rows):
        raise ValueError(f"{name}_A.txt: expected two node indices per row")
    A = np.array(edge_rows, dtype=np.int64).reshape(-1, 2) - 1
    if A.size and (A.min() < 0 or A.max() >= n_nodes):
        raise ValueError(f"{name}_A.txt: node index out of range 1..{n_nodes}")

    node_labels = None
    node_label_values: tuple = ()
    if f("node_labels").exists():
        raw = _read_ints(f("node_labels"))
        if len(raw) != n_nodes:
            raise ValueError("node_labels row count differs from node count")
        vals, node_labels = np.unique(raw, return_inverse=True)
        node_label_values = tuple(int(v) for v in vals)

    attrs = None
    if f("node_attributes").exists():
        rows = _read_rows(f("node_attributes"), float)
        if len(rows) != n_nodes:
            raise ValueError("node_attributes row count differs from node count")
        widths = {len(r) for r in rows}
        if len(widths) > 1:
            raise ValueError("ragged node attribute rows")
        attrs = np.array(rows, dtype=np.float64).reshape(n_nodes, -1)

    blocks = []
    if attrs is not None:
        blocks.append(attrs)
    if node_labels is not None:
        blocks.append(np.eye(len(node_label_values))[node_labels])
    feats = np.concatenate(blocks, axis=1) if blocks else np.zeros((n_nodes, 0))

    label_vals, dense_labels = np.unique(graph_labels_raw, return_inverse=True)

    gid = indicator - 1
    starts = np.searchsorted(gid, np.arange(n_graphs), side="left")
    ends = np.searchsorted(gid, np.arange(n_graphs), side="right")
    if A.size and np.any(gid[A[:, 0]] != gid[A[:, 1]]):
        raise ValueError("edge connects nodes of different graphs")
    edge_owner = gid[A[:, 0]] if A.size else np.zeros(0, dtype=np.int64)
    order = np.argsort(edge_owner, kind="stable")
    A, edge_owner = A[order], edge_owner[order]
    e_starts = np.searchsorted(edge_owner, np.arange(n_graphs), side="left")
    e_ends = np.searchsorted(edge_owner, np.arange(n_graphs), side="right")

    graphs = []
    dropped_loops = 0
    for g in range(n_graphs):
        s, e = starts[g], ends[g]
        local = A[e_starts[g]:e_ends[g]] - s
        loops = local[:, 0] == local[:, 1]
        dropped_loops += int(loops.sum())
        graphs.append(
            Graph(
                int(e - s),
                local[~loops],
                feats[s:e],
                int(dense_labels[g]),
                None if node_labels is None else node_labels[s:e],
            )
        )
    if dropped_loops:
        log.warning("%s: dropped %d self-loop rows", name, dropped_loops)
    return GraphDataset(
        graphs,
        num_classes=len(label_vals),
        feature_width=feats.shape[1],
        name=name,
        label_values=tuple(int(v) for v in label_vals),
        node_label_values=node_label_values,
        attribute_width=0 if attrs is None else attrs.shape[1],
    )


def write_tudataset(dataset: GraphDataset, root, name: Optional[str] = None) -> Path:
    """Write ``dataset`` in TUDataset layout; inverse of :func:`parse_tudataset`.

    Only the attribute columns and node labels are written, so derived
    features (e.g. degree one-hot) are not persisted.
    """
    name = name or dataset.name
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    a_lines, ind_lines, lab_lines, nl_lines, attr_lines = [], [], [], [], []
    offset = 0
    has_nl = any(g.node_labels is not None for g in dataset.graphs)
    for gi, g in enumerate(dataset.graphs):
        for u, v in g.edges:
            a_lines.append(f"{u + offset + 1}, {v + offset + 1}")
            a_lines.append(f"{v + offset + 1}, {u + offset + 1}")
        ind_lines.extend([str(gi + 1)] * g.node_count)
        raw = g.label if g.label is not None else 0
        lab_lines.append(str(dataset.label_values[raw] if dataset.label_values else raw))
        if has_nl:
            vals = dataset.node_label_values
            nl_lines.extend(str(vals[x] if vals else x) for x in g.node_labels)
        if dataset.attribute_width:
            for row in g.features[:, : dataset.attribute_width]:
                attr_lines.append(", ".join(repr(float(x)) for x in row))
        offset += g.node_count

    def w(suffix, lines):
        (root / f"{name}_{suffix}.txt").write_text("".join(l + "\n" for l in lines), encoding="utf-8")

    w("A", a_lines)
    w("graph_indicator", ind_lines)
    w("graph_labels", lab_lines)
    if has_nl:
        w("node_labels", nl_lines)
    if dataset.attribute_width:
        w("node_attributes", attr_lines)
    return root


def save_dataset_npz(dataset: GraphDataset, path) -> None:
    """Binary cache holding the full feature matrices (derived features included)."""
    counts = np.array([g.node_count for g in dataset.graphs], dtype=np.int64)
    n_edges = np.array([g.edge_count for g in dataset.graphs], dtype=np.int64)
    has_nl = bool(dataset.graphs) and all(g.node_labels is not None for g in dataset.graphs)
    np.savez(
        path,
        node_counts=counts,
        edge_counts=n_edges,
        edges=np.concatenate([g.edges for g in dataset.graphs] or [np.zeros((0, 2), np.int64)]).reshape(-1, 2),
        features=np.concatenate([g.features for g in dataset.graphs]).reshape(-1, dataset.feature_width),
        labels=np.array([-1 if g.label is None else g.label for g in dataset.graphs], dtype=np.int64),
        node_labels=np.concatenate([g.node_labels for g in dataset.graphs]) if has_nl else np.zeros(0, np.int64),
        has_node_labels=np.array(has_nl),
        meta=np.array(json.dumps({
            "name": dataset.name,
            "num_classes": dataset.num_classes,
            "feature_width": dataset.feature_width,
            "label_values": list(dataset.label_values),
            "node_label_values": list(dataset.node_label_values),
            "attribute_width": dataset.attribute_width,
        })),
    )


def load_dataset_npz(path) -> GraphDataset:
    with np.load(path) as f:
        meta = json.loads(str(f["meta"]))
        counts, n_edges = f["node_counts"], f["edge_counts"]
        edges, feats, labels = f["edges"], f["features"], f["labels"]
        nl = f["node_labels"] if bool(f["has_node_labels"]) else None
    node_off = np.concatenate([[0], np.cumsum(counts)])
    edge_off = np.concatenate([[0], np.cumsum(n_edges)])
    graphs = []
    for i, n in enumerate(counts):
        s, e = node_off[i], node_off[i + 1]
        graphs.append(Graph(
            int(n),
            edges[edge_off[i]:edge_off[i + 1]],
            feats[s:e],
            None if labels[i] < 0 else int(labels[i]),
            None if nl is None else nl[s:e],
        ))
    return GraphDataset(
        graphs,
        meta["num_classes"],
        meta["feature_width"],
        meta["name"],
        tuple(meta["label_values"]),
        tuple(meta["node_label_values"]),
        meta["attribute_width"],
    )


# --------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class Splits:
    train: tuple
    val: tuple
    test_id: tuple
    test_ood: tuple = ()

    def to_dict(self) -> dict:
        return {k: [int(i) for i in getattr(self, k)] for k in ("train", "val", "test_id", "test_ood")}

    @classmethod
    def from_dict(cls, d) -> "Splits":
        return cls(*(tuple(d.get(k, ())) for k in ("train", "val", "test_id", "test_ood")))


def split_dataset(dataset, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> Splits:
    """Seeded shuffle then partition; val/test get floor(N * ratio), train the rest."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(math.floor(n * ratios[1] + 1e-9))
    n_test = int(math.floor(n * ratios[2] + 1e-9))
    n_train = n - n_val - n_test
    return Splits(
        tuple(int(i) for i in perm[:n_train]),
        tuple(int(i) for i in perm[n_train:n_train + n_val]),
        tuple(int(i) for i in perm[n_train + n_val:]),
    )


def assemble_test_set(splits: Splits, ood, seed: int = 0) -> Splits:
    """Sample as many OOD graphs as there are ID test graphs, without replacement."""
    k = len(splits.test_id)
    n_ood = len(ood)
    if n_ood < k:
        raise ValueError(f"need {k} OOD graphs, dataset only has {n_ood}")
    idx = np.random.default_rng(seed).choice(n_ood, size=k, replace=False)
    return Splits(splits.train, splits.val, splits.test_id, tuple(int(i) for i in idx))


# --------------------------------------------------------------------------
# features


def degree_features(graph: Graph, max_degree: int) -> np.ndarray:
    deg = graph.degrees()
    if deg.size and deg.max() > max_degree:
        raise ValueError(f"node degree {deg.max()} exceeds max_degree={max_degree}")
    return np.eye(max_degree + 1)[deg].reshape(graph.node_count, max_degree + 1)


def max_degree(*datasets) -> int:
    return max((int(g.degrees().max(initial=0)) for ds in datasets for g in ds), default=0)


def with_degree_features(dataset: GraphDataset, max_deg: int) -> GraphDataset:
    graphs = [g.with_features(degree_features(g, max_deg)) for g in dataset.graphs]
    return dataset.replace_graphs(graphs, feature_width=max_deg + 1)


def with_label_features(dataset: GraphDataset, vocabulary: Sequence[int]) -> GraphDataset:
    """One-hot of original node label values over a shared ``vocabulary``."""
    index = {v: i for i, v in enumerate(vocabulary)}
    vals = dataset.node_label_values
    graphs = []
    for g in dataset.graphs:
        if g.node_labels is None:
            raise ValueError(f"{dataset.name}: graph without node labels")
        cols = [index[vals[x]] for x in g.node_labels]
        graphs.append(g.with_features(np.eye(len(vocabulary))[cols].reshape(g.node_count, -1)))
    return dataset.replace_graphs(graphs, feature_width=len(vocabulary))


# --------------------------------------------------------------------------
# batching


@dataclass(frozen=True, eq=False)
class BatchedGraph:
    """Disjoint union of graphs with a node -> graph ownership vector."""

    node_count: int
    edges: np.ndarray
    features: np.ndarray
    ownership: np.ndarray
    offsets: np.ndarray
    num_graphs: int
    adjacency: sp.csr_matrix = field(repr=False)


def disjoint_union_batch(graphs: Sequence[Graph]) -> BatchedGraph:
    if len(graphs) == 0:
        raise ValueError("cannot batch an empty list of graphs")
    widths = {g.feature_width for g in graphs}
    if len(widths) != 1:
        raise ValueError(f"inconsistent feature widths {sorted(widths)}")
    sizes = np.array([g.node_count for g in graphs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    edges = np.concatenate([g.edges + o for g, o in zip(graphs, offsets)]).reshape(-1, 2)
    feats = np.concatenate([g.features for g in graphs], axis=0)
    own = np.repeat(np.arange(len(graphs)), sizes)
    n = int(sizes.sum())
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    return BatchedGraph(n, edges, feats, own, offsets, len(graphs), adj)


# --------------------------------------------------------------------------
# 1-WL


def _h64(payload: str) -> int:
    return int.from_bytes(hashlib.blake2b(payload.encode(), digest_size=8).digest(), "little")


@dataclass(frozen=True, eq=False)
class WLColoring:
    colors: np.ndarray  # uint64 per node, after the last round
    histogram: tuple  # sorted ((color, count), ...)
    hash: int
    rounds: tuple = ()  # histogram hash after each round 0..k


def _initial_colors(graph: Graph, use_features: bool, init=None) -> list[int]:
    if init is not None:
        return [_h64(f"i{x}") for x in init]
    if use_features and graph.node_labels is not None:
        return [_h64(f"l{x}") for x in graph.node_labels]
    if use_features and graph.feature_width:
        return [_h64("f" + ",".join(f"{v:.12g}" for v in row)) for row in graph.features]
    return [_h64("u")] * graph.node_count


def _hist(colors) -> tuple:
    return tuple(sorted(Counter(colors).items()))


def _hist_hash(hist) -> int:
    return _h64(";".join(f"{c}:{k}" for c, k in hist))


def wl_refine(graph: Graph, iterations: int, use_features: bool = False, init=None) -> WLColoring:
    """Standard 1-WL colour refinement with globally comparable hashed colours.

    ``init`` optionally supplies explicit initial discrete labels.
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    nbrs = graph.neighbors()
    colors = _initial_colors(graph, use_features, init)
    round_hashes = [_hist_hash(_hist(colors))]
    for _ in range(iterations):
        colors = [
            _h64(f"{colors[v]}|" + ",".join(str(c) for c in sorted(colors[u] for u in nbrs[v])))
            for v in range(graph.node_count)
        ]
        round_hashes.append(_hist_hash(_hist(colors)))
    hist = _hist(colors)
    return WLColoring(np.array(colors, dtype=np.uint64), hist, _hist_hash(hist), tuple(round_hashes))


def wl_distinguishable(g1: Graph, g2: Graph, iterations: int = 3, use_features: bool = False) -> bool:
    """True iff 1-WL separates the graphs within ``iterations`` rounds."""
    if g1.node_count != g2.node_count:
        return True
    a = wl_refine(g1, iterations, use_features).rounds
    b = wl_refine(g2, iterations, use_features).rounds
    return any(x != y for x, y in zip(a, b))


# --------------------------------------------------------------------------
# small constructors used by tests, benches and the synthetic generator


def cycle_graph(n: int, features=None) -> Graph:
    edges = [(i, (i + 1) % n) for i in range(n)]
    return Graph(n, edges, np.ones((n, 1)) if features is None else features)


def path_graph(n: int) -> Graph:
    return Graph(n, [(i, i + 1) for i in range(n - 1)], np.ones((n, 1)))


def complete_graph(n: int) -> Graph:
    return Graph(n, [(i, j) for i in range(n) for j in range(i + 1, n)], np.ones((n, 1)))


def disjoint_union(*graphs: Graph) -> Graph:
    b = disjoint_union_batch(graphs)
    return Graph(b.node_count, b.edges, b.features)
