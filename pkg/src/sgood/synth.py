"""Motif-stitched synthetic graph families (cycles joined by bridge edges)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import Graph, GraphDataset, max_degree, with_degree_features

MOTIF_SIZES = {"triangle": 3, "square": 4, "pentagon": 5, "hexagon": 6}


@dataclass(frozen=True)
class SyntheticSpec:
    """Each family is ``(motif, n_graphs)``; ID family ``k`` gets class label ``k``.

    ``bridging="tree"`` joins the motifs along a random spanning tree with one
    bridge edge per tree edge, plus ``extra_bridges`` bridges between motif
    pairs not yet joined. ``bridging="matching"`` gives every motif node at
    most one bridge (a random matching across motifs threaded along a chain
    for connectivity), so graphs are close to 3-regular and node degrees say
    nothing about which motif a node sits in.
    """

    id_families: tuple = (("triangle", 250), ("pentagon", 250))
    ood_families: tuple = (("square", 100),)
    motifs_per_graph: tuple = (3, 6)
    extra_bridges: int = 0
    bridging: str = "tree"  # "tree" | "matching"
    feature_scheme: str = "degree"  # "degree" | "constant" | "none"

    def __post_init__(self):
        for motif, _ in self.id_families + self.ood_families:
            if motif not in MOTIF_SIZES:
                raise ValueError(f"unknown motif {motif!r}")
        lo, hi = self.motifs_per_graph
        if not 1 <= lo <= hi:
            raise ValueError("motifs_per_graph must be a range 1 <= lo <= hi")
        if self.bridging not in ("matching", "tree"):
            raise ValueError(f"unknown bridging scheme {self.bridging!r}")
        if self.feature_scheme not in ("degree", "constant", "none"):
            raise ValueError(f"unknown feature scheme {self.feature_scheme!r}")


def motif_graph(motif: str, n_motifs: int, extra_bridges: int, rng, label=None, bridging: str = "tree") -> Graph:
    size = MOTIF_SIZES[motif]
    edges = []
    for k in range(n_motifs):
        base = k * size
        edges += [(base + i, base + (i + 1) % size) for i in range(size)]
    if bridging == "matching":
        edges += _matching_bridges(size, n_motifs, rng)
    else:
        edges += _tree_bridges(size, n_motifs, extra_bridges, rng)
    n = n_motifs * size
    return Graph(n, edges, np.zeros((n, 0)), label)


def _tree_bridges(size, n_motifs, extra_bridges, rng):
    edges, joined = [], set()
    for k in range(1, n_motifs):
        other = int(rng.integers(k))
        joined.add((other, k))
        edges.append((other * size + int(rng.integers(size)), k * size + int(rng.integers(size))))
    free = [(a, b) for a in range(n_motifs) for b in range(a + 1, n_motifs) if (a, b) not in joined]
    for i in rng.permutation(len(free))[:extra_bridges]:
        a, b = free[i]
        edges.append((a * size + int(rng.integers(size)), b * size + int(rng.integers(size))))
    return edges


def _matching_bridges(size, n_motifs, rng):
    # chain first (each motif uses at most two nodes, size >= 3), then match the rest
    free = [list(rng.permutation(size) + k * size) for k in range(n_motifs)]
    order = rng.permutation(n_motifs)
    edges = [(free[a].pop(), free[b].pop()) for a, b in zip(order[:-1], order[1:])]
    rest = [int(v) for v in rng.permutation(np.concatenate([np.asarray(f, dtype=np.int64) for f in free]))]
    used = set()
    for i, u in enumerate(rest):
        if u in used:
            continue
        for w in rest[i + 1:]:
            if w not in used and w // size != u // size:
                edges.append((u, w))
                used.update((u, w))
                break
    return edges


def _family_dataset(families, spec: SyntheticSpec, rng, name: str, labelled: bool) -> GraphDataset:
    lo, hi = spec.motifs_per_graph
    graphs = []
    for cls, (motif, count) in enumerate(families):
        for _ in range(count):
            graphs.append(motif_graph(
                motif, int(rng.integers(lo, hi + 1)), spec.extra_bridges, rng, cls if labelled else 0, spec.bridging
            ))
    order = rng.permutation(len(graphs))
    graphs = [graphs[i] for i in order]
    n_cls = len(families) if labelled else 1
    return GraphDataset(graphs, n_cls, 0, name, label_values=tuple(range(n_cls)))


def featurize(ds: GraphDataset, scheme: str, max_deg: int) -> GraphDataset:
    if scheme == "degree":
        return with_degree_features(ds, max_deg)
    if scheme == "constant":
        return ds.replace_graphs([g.with_features(np.ones((g.node_count, 1))) for g in ds.graphs], feature_width=1)
    return ds


def generate(spec: SyntheticSpec, seed: int = 0, featurized: bool = True):
    """Return ``(id_dataset, ood_dataset)``; OOD graphs all carry label 0."""
    rng = np.random.default_rng(seed)
    id_ds = _family_dataset(spec.id_families, spec, rng, "SYNTH_ID", True)
    ood_ds = _family_dataset(spec.ood_families, spec, rng, "SYNTH_OOD", False)
    if featurized:
        md = max_degree(id_ds, ood_ds)
        id_ds = featurize(id_ds, spec.feature_scheme, md)
        ood_ds = featurize(ood_ds, spec.feature_scheme, md)
    return id_ds, ood_ds
