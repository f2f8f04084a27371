"""Losses and the two-stage (contrastive pre-training, joint fine-tuning) driver."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import diffcore as dc
from .augment import DEFAULT_RATIO, build_pools, sample_view_pair
from .diffcore import Tensor
from .encoder import EncoderConfig, ModelParams, classify, collate, embed_many, forward, init_params, project
from .graph import Graph
from .oodscore import GaussianStats, embed_for_scoring, estimate_gaussian, mahalanobis_score
from .substructure import Partition, SuperGraph

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    t_pt: int = 100
    t_ft: int = 500
    alpha: float = 0.1
    tau: float = 0.5
    lr_pretrain: float = 1e-3
    lr_finetune: float = 1e-3
    aug_ratio: float = DEFAULT_RATIO
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 so every anchor has negatives")
        if min(self.tau, self.lr_pretrain, self.lr_finetune) <= 0 or self.alpha < 0:
            raise ValueError("tau and learning rates must be positive, alpha non-negative")
        if self.t_pt < 0 or self.t_ft < 0:
            raise ValueError("epoch counts must be non-negative")


@dataclass
class TrainReport:
    seed: int
    pretrain_cl: list = field(default_factory=list)
    finetune_ce: list = field(default_factory=list)
    finetune_cl: list = field(default_factory=list)
    finetune_total: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    best_epoch: Optional[int] = None
    wall_clock: float = 0.0

    def to_json(self, precision: int = 10) -> str:
        """Deterministic JSON; wall-clock time is left out so reruns are byte-identical."""
        d = asdict(self)
        d.pop("wall_clock")
        return json.dumps(round_floats(d, precision), sort_keys=True, indent=1)


def round_floats(obj, precision: int = 10):
    """Recursively round floats to ``precision`` significant digits."""
    if isinstance(obj, float):
        return float(f"{obj:.{precision}g}")
    if isinstance(obj, dict):
        return {k: round_floats(v, precision) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round_floats(v, precision) for v in obj]
    return obj


@dataclass(frozen=True, eq=False)
class GraphSet:
    """Graphs with their cached partitions and super graphs."""

    graphs: tuple
    partitions: tuple
    supers: tuple

    def __post_init__(self):
        for name in ("graphs", "partitions", "supers"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not (len(self.graphs) == len(self.partitions) == len(self.supers)):
            raise ValueError("graphs, partitions and super graphs must align")

    def __len__(self):
        return len(self.graphs)

    def labels(self) -> np.ndarray:
        return np.array([g.label for g in self.graphs], dtype=np.int64)

    def take(self, idx) -> "GraphSet":
        return GraphSet([self.graphs[i] for i in idx], [self.partitions[i] for i in idx], [self.supers[i] for i in idx])


# --------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, labels) -> Tensor:
    return dc.softmax_cross_entropy(logits, labels)


def ntxent_stacked(u: Tensor, tau: float) -> Tensor:
    """Contrastive loss on ``[U0; U1]`` (2B rows; row r and r+B are views of one graph).

    Denominators run over both views of every *other* graph only.
    """
    two_b = u.shape[0]
    if two_b % 2 or two_b < 4:
        raise ValueError("need B >= 2 graphs with two views each")
    b = two_b // 2
    gid = np.tile(np.arange(b), 2)
    neg = (gid[:, None] != gid[None, :]).astype(np.float64)
    pos = np.zeros((two_b, two_b))
    pos[np.arange(two_b), (np.arange(two_b) + b) % two_b] = 1.0
    s = dc.scale(dc.matmul(u, dc.transpose(u)), 1.0 / tau)
    denom = dc.sum(dc.mul(dc.exp(s), dc.const(neg)), axis=1)
    positive = dc.sum(dc.mul(s, dc.const(pos)), axis=1)
    return dc.mean(dc.add(dc.log(denom), dc.scale(positive, -1.0)))


def ntxent(u0: Tensor, u1: Tensor, tau: float = 0.5) -> Tensor:
    if u0.shape != u1.shape:
        raise ValueError("view embeddings must have equal shapes")
    if u0.shape[0] < 2:
        raise ValueError("NT-Xent needs a batch of at least 2 graphs")
    return ntxent_stacked(dc.concat_rows([u0, u1]), tau)


def combined_loss(ce: Tensor, cl: Tensor, alpha: float) -> Tensor:
    return dc.add(ce, dc.scale(cl, alpha))


# --------------------------------------------------------------------------
# batches and steps


def make_batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    """Shuffled batches; a trailing batch of one graph is folded into the previous one."""
    perm = rng.permutation(n)
    batches = [perm[s:s + batch_size] for s in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def _views(data: GraphSet, idx, pools, rng, ratio):
    v0, v1 = [], []
    for i in idx:
        a, b = sample_view_pair(data.graphs[i], data.supers[i], data.partitions[i], pools, rng, ratio)
        v0.append(a)
        v1.append(b)
    return v0 + v1


@dataclass(frozen=True, eq=False)
class LossBatch:
    """Collated encoder input for one step: originals first, then both views."""

    batch: object
    n_orig: int
    labels: Optional[np.ndarray]
    n_views: int


def prepare_batch(data: GraphSet, idx, views, with_originals: bool) -> LossBatch:
    graphs, parts, supers = [], [], []
    if with_originals:
        graphs += [data.graphs[i] for i in idx]
        parts += [data.partitions[i] for i in idx]
        supers += [data.supers[i] for i in idx]
    n_orig = len(graphs)
    views = views or []
    graphs += [v.graph for v in views]
    parts += [v.partition for v in views]
    supers += [v.supergraph for v in views]
    labels = np.array([data.graphs[i].label for i in idx]) if with_originals else None
    return LossBatch(collate(graphs, parts, supers), n_orig, labels, len(views))


def loss_on_batch(p, lb: LossBatch, cfg: EncoderConfig, tau: float, alpha: Optional[float]):
    """Classification plus weighted contrastive loss on a prepared batch; see :func:`batch_loss`."""
    out = forward(p, lb.batch, cfg)
    ce = cl = None
    if alpha is not None:
        rep = dc.take_rows(out.rep, np.arange(lb.n_orig)) if lb.n_views else out.rep
        ce = cross_entropy(classify(rep, p), lb.labels)
    if lb.n_views:
        rep_v = dc.take_rows(out.rep, np.arange(lb.n_orig, lb.n_orig + lb.n_views)) if lb.n_orig else out.rep
        cl = ntxent_stacked(project(rep_v, p), tau)
    if ce is None:
        return cl, None, cl
    if cl is None:
        return ce, ce, None
    return combined_loss(ce, cl, alpha), ce, cl


def batch_loss(p, data: GraphSet, idx, views, cfg: EncoderConfig, tcfg: TrainConfig, alpha: Optional[float]):
    """Loss for one batch. ``alpha=None`` means contrastive only (pre-training).

    ``views`` is the flat list ``[view0 of each graph] + [view1 of each graph]``
    or None. Returns ``(total, ce or None, cl or None)`` tensors.
    """
    if alpha is None and not views:
        raise ValueError("contrastive-only loss needs views")
    return loss_on_batch(p, prepare_batch(data, idx, views, alpha is not None), cfg, tcfg.tau, alpha)


def _step(params, state, data, idx, views, cfg, tcfg, alpha):
    leaves = {k: dc.param(v) for k, v in params.items()}
    total, ce, cl = batch_loss(leaves, data, idx, views, cfg, tcfg, alpha)
    dc.backward(total)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in leaves.items()}
    params, state = dc.adam_step(params, grads, state)
    return params, state, total.item(), (ce.item() if ce is not None else 0.0), (cl.item() if cl is not None else 0.0)


# --------------------------------------------------------------------------
# stages


def pretrain_stage(train: GraphSet, params: ModelParams, cfg: EncoderConfig, tcfg: TrainConfig, report: Optional[TrainReport] = None) -> ModelParams:
    """T_PT epochs minimising the contrastive loss only."""
    if tcfg.t_pt == 0:
        return params
    rng = np.random.default_rng([tcfg.seed, 1])
    pools = build_pools(train.graphs, train.partitions)
    state = dc.AdamState(lr=tcfg.lr_pretrain)
    for epoch in range(tcfg.t_pt):
        losses = []
        for idx in make_batches(len(train), tcfg.batch_size, rng):
            if len(idx) < 2:
                continue
            views = _views(train, idx, pools, rng, tcfg.aug_ratio)
            params, state, total, _, _ = _step(params, state, train, idx, views, cfg, tcfg, None)
            losses.append(total)
        if report is not None:
            report.pretrain_cl.append(float(np.mean(losses)))
        log.debug("pretrain epoch %d cl=%.4f", epoch, np.mean(losses))
    return params


def accuracy(params, data: GraphSet, cfg: EncoderConfig) -> float:
    if len(data) == 0:
        return float("nan")
    _, _, logits = embed_many(data.graphs, data.partitions, data.supers, params, cfg)
    return float(np.mean(np.argmax(logits, axis=1) == data.labels()))


def finetune_stage(train: GraphSet, val: Optional[GraphSet], params: ModelParams, cfg: EncoderConfig, tcfg: TrainConfig, report: Optional[TrainReport] = None):
    """T_FT epochs on CE + alpha * CL; keeps the parameters with best validation accuracy.

    Ties go to the later epoch. Without validation data the final parameters
    are returned.
    """
    report = report if report is not None else TrainReport(seed=tcfg.seed)
    rng = np.random.default_rng([tcfg.seed, 2])
    pools = build_pools(train.graphs, train.partitions)
    state = dc.AdamState(lr=tcfg.lr_finetune)
    use_cl = tcfg.alpha > 0
    best, best_acc = params, -1.0
    for epoch in range(tcfg.t_ft):
        tot, ces, cls = [], [], []
        for idx in make_batches(len(train), tcfg.batch_size, rng):
            views = _views(train, idx, pools, rng, tcfg.aug_ratio) if use_cl and len(idx) >= 2 else None
            params, state, t, ce, cl = _step(params, state, train, idx, views, cfg, tcfg, tcfg.alpha)
            tot.append(t)
            ces.append(ce)
            cls.append(cl)
        report.finetune_total.append(float(np.mean(tot)))
        report.finetune_ce.append(float(np.mean(ces)))
        report.finetune_cl.append(float(np.mean(cls)))
        if val is not None and len(val):
            acc = accuracy(params, val, cfg)
            report.val_acc.append(acc)
            if acc >= best_acc:
                best, best_acc, report.best_epoch = params, acc, epoch
        else:
            best, report.best_epoch = params, epoch
    return best, report


@dataclass
class TrainedModel:
    params: ModelParams
    config: EncoderConfig
    stats: GaussianStats
    report: TrainReport

    def embeddings(self, data: GraphSet):
        hG, hS, logits = embed_many(data.graphs, data.partitions, data.supers, self.params, self.config)
        return embed_for_scoring(hG, hS), logits

    def score(self, data: GraphSet, mode: str = "nearest"):
        z, logits = self.embeddings(data)
        return mahalanobis_score(z, self.stats, mode), logits


def fit_gaussian(params, cfg: EncoderConfig, train: GraphSet) -> GaussianStats:
    hG, hS, _ = embed_many(train.graphs, train.partitions, train.supers, params, cfg)
    return estimate_gaussian(embed_for_scoring(hG, hS), train.labels(), cfg.num_classes)


def train(train_set: GraphSet, val_set: Optional[GraphSet], cfg: EncoderConfig, tcfg: TrainConfig) -> TrainedModel:
    """Both stages on ID training graphs, then Gaussian statistics over their embeddings."""
    t0 = time.perf_counter()
    report = TrainReport(seed=tcfg.seed)
    params = init_params(cfg, tcfg.seed)
    params = pretrain_stage(train_set, params, cfg, tcfg, report)
    params, report = finetune_stage(train_set, val_set, params, cfg, tcfg, report)
    stats = fit_gaussian(params, cfg, train_set)
    report.wall_clock = time.perf_counter() - t0
    return TrainedModel(params, cfg, stats, report)
