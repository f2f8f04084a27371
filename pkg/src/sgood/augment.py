"""Substructure-preserving augmentations applied jointly to a graph and its super graph."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .graph import Graph
from .substructure import Partition, SuperGraph, build_super_graph, induced_subgraph

log = logging.getLogger(__name__)

AUG_KINDS = ("I", "SD", "SG", "SS")
DEFAULT_RATIO = 0.3


@dataclass(frozen=True, eq=False)
class AugmentedPair:
    graph: Graph
    partition: Partition
    supergraph: SuperGraph
    kind: str = "I"
    # set when SS had nothing to draw from and returned the input unchanged
    fallback: bool = False


def _identity(graph, sg, partition, kind, fallback=False) -> AugmentedPair:
    return AugmentedPair(graph, partition, sg, kind, fallback)


def keep_substructures(graph: Graph, partition: Partition, keep: Sequence[int]) -> tuple[Graph, Partition]:
    """Restrict to the nodes of the kept substructures (ids renumbered in ascending order)."""
    keep = np.sort(np.asarray(keep, dtype=np.int64))
    new_id = -np.ones(partition.n_sub, dtype=np.int64)
    new_id[keep] = np.arange(len(keep))
    nodes = np.flatnonzero(new_id[partition.assignment] >= 0)
    sub = induced_subgraph(graph, nodes)
    return sub, Partition(new_id[partition.assignment[nodes]], len(keep))


def substructure_drop(graph: Graph, sg: SuperGraph, partition: Partition, ratio: float = DEFAULT_RATIO, rng=None) -> AugmentedPair:
    """Drop floor(ratio * n) whole substructures, always keeping at least one."""
    rng = np.random.default_rng(rng)
    n = partition.n_sub
    k = min(int(math.floor(ratio * n + 1e-9)), n - 1)
    if k <= 0:
        return _identity(graph, sg, partition, "SD")
    dropped = rng.choice(n, size=k, replace=False)
    keep = np.setdiff1d(np.arange(n), dropped)
    g, p = keep_substructures(graph, partition, keep)
    return AugmentedPair(g, p, build_super_graph(g, p), "SD")


def dfs_collect(sg: SuperGraph, target: int, rng) -> list[int]:
    """Collect ``target`` super nodes by randomised DFS, restarting in unvisited components."""
    nbrs = sg.neighbors()
    visited: list[int] = []
    seen = np.zeros(sg.node_count, dtype=bool)
    while len(visited) < target:
        unvisited = np.flatnonzero(~seen)
        stack = [int(unvisited[rng.integers(len(unvisited))])]
        while stack and len(visited) < target:
            u = stack.pop()
            if seen[u]:
                continue
            seen[u] = True
            visited.append(u)
            order = [nbrs[u][i] for i in rng.permutation(len(nbrs[u]))]
            stack.extend(w for w in order if not seen[w])
    return visited


def super_graph_sample(graph: Graph, sg: SuperGraph, partition: Partition, ratio: float = DEFAULT_RATIO, rng=None) -> AugmentedPair:
    """Keep ceil((1 - ratio) * n) super nodes reached by DFS from a random start."""
    rng = np.random.default_rng(rng)
    n = partition.n_sub
    target = max(1, int(math.ceil((1.0 - ratio) * n - 1e-9)))
    if target >= n:
        return _identity(graph, sg, partition, "SG")
    keep = dfs_collect(sg, target, rng)
    g, p = keep_substructures(graph, partition, keep)
    return AugmentedPair(g, p, build_super_graph(g, p), "SG")


def build_pools(graphs: Sequence[Graph], partitions: Sequence[Partition]) -> dict[int, list[Graph]]:
    """Per-class lists of substructures (as induced subgraphs) harvested from labelled graphs."""
    pools: dict[int, list[Graph]] = {}
    for g, p in zip(graphs, partitions):
        if g.label is None:
            continue
        bucket = pools.setdefault(g.label, [])
        for mem in p.members:
            bucket.append(induced_subgraph(g, mem).with_label(None))
    return pools


def substructure_substitute(
    graph: Graph,
    sg: SuperGraph,
    partition: Partition,
    pool: Optional[Sequence[Graph]],
    ratio: float = DEFAULT_RATIO,
    rng=None,
) -> AugmentedPair:
    """Replace a fraction of degree-1 super nodes by substructures drawn from ``pool``.

    Cut edges keep their outside endpoint; the inside endpoint is redrawn
    uniformly from the replacement's nodes, independently per edge.
    """
    rng = np.random.default_rng(rng)
    cand = np.flatnonzero(sg.degrees() == 1)
    k = int(math.floor(ratio * len(cand) + 1e-9))
    if k == 0:
        return _identity(graph, sg, partition, "SS")
    if not pool:
        log.warning("empty substitution pool for class %s; returning input unchanged", graph.label)
        return _identity(graph, sg, partition, "SS", fallback=True)
    chosen = np.sort(rng.choice(cand, size=k, replace=False))
    replacement = {int(j): pool[int(rng.integers(len(pool)))] for j in chosen}

    a = partition.assignment
    members = partition.members
    old_to_new = -np.ones(graph.node_count, dtype=np.int64)
    new_nodes: dict[int, np.ndarray] = {}
    feats, nlabels, assign, edges = [], [], [], []
    has_nl = graph.node_labels is not None
    cursor = 0
    for j in range(partition.n_sub):
        if j in replacement:
            r = replacement[j]
            ids = np.arange(cursor, cursor + r.node_count)
            feats.append(r.features)
            if has_nl:
                nlabels.append(r.node_labels if r.node_labels is not None else np.zeros(r.node_count, dtype=np.int64))
            edges.append(r.edges + cursor)
        else:
            mem = members[j]
            ids = np.arange(cursor, cursor + len(mem))
            old_to_new[mem] = ids
            feats.append(graph.features[mem])
            if has_nl:
                nlabels.append(graph.node_labels[mem])
        new_nodes[j] = ids
        assign.append(np.full(len(ids), j))
        cursor += len(ids)

    replaced_mask = np.isin(a, chosen)
    for u, v in graph.edges:
        su, sv = a[u], a[v]
        if su == sv and replaced_mask[u]:
            continue  # internal edge of a substituted substructure
        nu = old_to_new[u] if not replaced_mask[u] else rng.choice(new_nodes[su])
        nv = old_to_new[v] if not replaced_mask[v] else rng.choice(new_nodes[sv])
        edges.append(np.array([[nu, nv]]))

    g = Graph(
        cursor,
        np.concatenate(edges).reshape(-1, 2) if edges else np.zeros((0, 2)),
        np.concatenate(feats, axis=0),
        graph.label,
        np.concatenate(nlabels) if has_nl else None,
    )
    p = Partition(np.concatenate(assign), partition.n_sub)
    return AugmentedPair(g, p, build_super_graph(g, p), "SS")


def augment(kind: str, graph, sg, partition, pool=None, ratio=DEFAULT_RATIO, rng=None) -> AugmentedPair:
    if kind == "I":
        return _identity(graph, sg, partition, "I")
    if kind == "SD":
        return substructure_drop(graph, sg, partition, ratio, rng)
    if kind == "SG":
        return super_graph_sample(graph, sg, partition, ratio, rng)
    if kind == "SS":
        return substructure_substitute(graph, sg, partition, pool, ratio, rng)
    raise ValueError(f"unknown augmentation {kind!r}")


def sample_view_pair(
    graph: Graph,
    sg: SuperGraph,
    partition: Partition,
    pools: Mapping[int, Sequence[Graph]],
    rng,
    ratio: float = DEFAULT_RATIO,
) -> tuple[AugmentedPair, AugmentedPair]:
    """Draw two augmentations independently and uniformly from {I, SD, SG, SS}."""
    rng = np.random.default_rng(rng)
    pool = pools.get(graph.label) if graph.label is not None else None
    kinds = rng.integers(len(AUG_KINDS), size=2)
    return tuple(augment(AUG_KINDS[k], graph, sg, partition, pool, ratio, rng) for k in kinds)
