"""Two-level graph encoder: node GIN -> DeepSet substructure pooling -> super-graph GIN."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from . import diffcore as dc
from .diffcore import Tensor
from .graph import BatchedGraph, Graph, disjoint_union_batch
from .substructure import Partition, SuperGraph

ModelParams = dict  # name -> float64 ndarray


@dataclass(frozen=True)
class EncoderConfig:
    in_dim: int
    num_classes: int
    L1: int = 3
    L2: int = 2
    d: int = 16
    # False drops the substructure branch entirely (classifier and scores use h_G only)
    use_super: bool = True

    def __post_init__(self):
        if self.L1 < 1 or self.L2 < 1 or self.d < 1:
            raise ValueError("L1, L2 and d must all be >= 1")
        if self.num_classes < 1 or self.in_dim < 1:
            raise ValueError("in_dim and num_classes must be >= 1")

    @property
    def node_width(self) -> int:
        return self.L1 * self.d

    @property
    def super_width(self) -> int:
        return (self.L2 + 1) * self.d

    @property
    def rep_width(self) -> int:
        """Width of the representation fed to classifier and projection head."""
        return self.super_width if self.use_super else self.node_width

    @property
    def score_width(self) -> int:
        return self.node_width + (self.super_width if self.use_super else 0)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EncoderConfig":
        return cls(**json.loads(text))


def _mlp_shapes(prefix, d_in, d_hidden, d_out):
    return [
        (f"{prefix}.W1", (d_in, d_hidden)),
        (f"{prefix}.b1", (1, d_hidden)),
        (f"{prefix}.W2", (d_hidden, d_out)),
        (f"{prefix}.b2", (1, d_out)),
    ]


def param_shapes(cfg: EncoderConfig) -> list[tuple[str, tuple]]:
    d = cfg.d
    shapes = []
    for l in range(cfg.L1):
        shapes += _mlp_shapes(f"node{l}", cfg.in_dim if l == 0 else d, d, d)
        shapes.append((f"node{l}.eps", (1, 1)))
    if cfg.use_super:
        shapes += _mlp_shapes("pool.phi", cfg.node_width, d, d)
        shapes += _mlp_shapes("pool.rho", d, d, d)
        for l in range(cfg.L2):
            shapes += _mlp_shapes(f"super{l}", d, d, d)
            shapes.append((f"super{l}.eps", (1, 1)))
    shapes += _mlp_shapes("proj", cfg.rep_width, d, d)
    shapes += [("cls.W", (cfg.rep_width, cfg.num_classes)), ("cls.b", (1, cfg.num_classes))]
    return shapes


def init_params(cfg: EncoderConfig, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases and zero GIN epsilons."""
    out = {}
    for name, shape in param_shapes(cfg):
        if name.endswith((".b1", ".b2", ".b", ".eps")):
            out[name] = np.zeros(shape)
        else:
            out[name] = dc.glorot_uniform(seed, name, shape)
    return out


# --------------------------------------------------------------------------
# batching of (graph, partition, super graph) triples


@dataclass(frozen=True, eq=False)
class EncoderBatch:
    nodes: BatchedGraph
    node_to_super: np.ndarray  # global super-node id of every node
    super_count: int
    super_adj: sp.csr_matrix  # block diagonal, includes self-loops
    super_owner: np.ndarray  # graph id of every super node

    @property
    def num_graphs(self) -> int:
        return self.nodes.num_graphs


def collate(graphs: Sequence[Graph], partitions: Sequence[Partition], supers: Sequence[SuperGraph]) -> EncoderBatch:
    if not (len(graphs) == len(partitions) == len(supers)):
        raise ValueError("graphs, partitions and super graphs must align")
    nodes = disjoint_union_batch(graphs)
    counts = np.array([p.n_sub for p in partitions], dtype=np.int64)
    sub_off = np.concatenate([[0], np.cumsum(counts)[:-1]])
    node_to_super = np.concatenate([p.assignment + o for p, o in zip(partitions, sub_off)])
    total = int(counts.sum())
    blocks = [s.adjacency_with_loops() for s in supers]
    adj = sp.block_diag(blocks, format="csr") if blocks else sp.csr_matrix((0, 0))
    owner = np.repeat(np.arange(len(graphs)), counts)
    return EncoderBatch(nodes, node_to_super, total, adj, owner)


# --------------------------------------------------------------------------
# forward pieces on the tape


def mlp(x: Tensor, p, prefix: str) -> Tensor:
    h = dc.relu(dc.add(dc.matmul(x, p[f"{prefix}.W1"]), p[f"{prefix}.b1"]))
    return dc.add(dc.matmul(h, p[f"{prefix}.W2"]), p[f"{prefix}.b2"])


def gin_layer(h: Tensor, adj: sp.spmatrix, p, prefix: str) -> Tensor:
    """MLP((1 + eps) * h_v + sum of neighbour rows)."""
    agg = dc.spmm(adj, h)
    self_w = dc.add(p[f"{prefix}.eps"], dc.const(np.ones((1, 1))))
    return mlp(dc.add(dc.mul(h, self_w), agg), p, prefix)


def gin_node_forward(batch: BatchedGraph, p, cfg: EncoderConfig) -> list[Tensor]:
    if batch.features.shape[1] != cfg.in_dim:
        raise ValueError(f"feature width {batch.features.shape[1]} != encoder in_dim {cfg.in_dim}")
    h = dc.const(batch.features)
    layers = []
    for l in range(cfg.L1):
        h = gin_layer(h, batch.adjacency, p, f"node{l}")
        layers.append(h)
    return layers


def node_multiscale(layers: Sequence[Tensor]) -> Tensor:
    return dc.concat_cols(layers)


def deepset_pool(h_v: Tensor, node_to_super, super_count: int, p) -> Tensor:
    if super_count == 0 or h_v.shape[0] == 0:
        raise ValueError("deepset_pool needs non-empty substructures")
    inner = mlp(h_v, p, "pool.phi")
    return mlp(dc.segment_sum(inner, node_to_super, super_count), p, "pool.rho")


def gin_super_forward(super_adj: sp.spmatrix, h0: Tensor, p, cfg: EncoderConfig) -> list[Tensor]:
    """Layers 0..L2; ``super_adj`` must already contain self-loops."""
    layers = [h0]
    h = h0
    for l in range(cfg.L2):
        h = gin_layer(h, super_adj, p, f"super{l}")
        layers.append(h)
    return layers


def super_readout(layers: Sequence[Tensor], owner, num_graphs: int):
    h_g = dc.concat_cols(layers)
    return dc.segment_sum(h_g, owner, num_graphs), h_g


def node_readout(h_v: Tensor, ownership, num_graphs: int) -> Tensor:
    return dc.segment_sum(h_v, ownership, num_graphs)


def project(h: Tensor, p) -> Tensor:
    return dc.l2_normalize_rows(mlp(h, p, "proj"))


def classify(h: Tensor, p) -> Tensor:
    return dc.add(dc.matmul(h, p["cls.W"]), p["cls.b"])


@dataclass
class Forward:
    h_v: Tensor
    h_G: Tensor
    h_sup: Optional[Tensor]
    h_g: Optional[Tensor]
    rep: Tensor  # what the classifier / projection head consume


def forward(p, batch: EncoderBatch, cfg: EncoderConfig) -> Forward:
    """Run the whole encoder on the tape; ``p`` maps names to Tensors."""
    h_v = node_multiscale(gin_node_forward(batch.nodes, p, cfg))
    h_G = node_readout(h_v, batch.nodes.ownership, batch.num_graphs)
    if not cfg.use_super:
        return Forward(h_v, h_G, None, None, h_G)
    h0 = deepset_pool(h_v, batch.node_to_super, batch.super_count, p)
    layers = gin_super_forward(batch.super_adj, h0, p, cfg)
    h_sup, h_g = super_readout(layers, batch.super_owner, batch.num_graphs)
    return Forward(h_v, h_G, h_sup, h_g, h_sup)


def as_consts(params: ModelParams) -> dict:
    return {k: dc.const(v) for k, v in params.items()}


# --------------------------------------------------------------------------
# numpy-facing API


@dataclass
class GraphEmbedding:
    h_G: np.ndarray
    h_sup: Optional[np.ndarray]
    h_g: Optional[np.ndarray]
    logits: np.ndarray

    @property
    def scoring_parts(self):
        return (self.h_G, self.h_sup) if self.h_sup is not None else (self.h_G,)


def encode(graph: Graph, partition: Partition, supergraph: SuperGraph, params: ModelParams, cfg: EncoderConfig) -> GraphEmbedding:
    batch = collate([graph], [partition], [supergraph])
    out = forward(as_consts(params), batch, cfg)
    logits = classify(out.rep, as_consts(params)).value[0]
    return GraphEmbedding(
        out.h_G.value[0],
        None if out.h_sup is None else out.h_sup.value[0],
        None if out.h_g is None else out.h_g.value,
        logits,
    )


def embed_many(graphs, partitions, supers, params: ModelParams, cfg: EncoderConfig, chunk: int = 256):
    """Batched inference. Returns ``(h_G, h_sup or None, logits)`` as stacked arrays."""
    p = as_consts(params)
    hG, hS, lg = [], [], []
    for s in range(0, len(graphs), chunk):
        batch = collate(graphs[s:s + chunk], partitions[s:s + chunk], supers[s:s + chunk])
        out = forward(p, batch, cfg)
        hG.append(out.h_G.value)
        if out.h_sup is not None:
            hS.append(out.h_sup.value)
        lg.append(classify(out.rep, p).value)
    return (
        np.concatenate(hG),
        np.concatenate(hS) if hS else None,
        np.concatenate(lg),
    )
