import numpy as np
import pytest
import scipy.sparse as sp

from sgood import diffcore as dc
from sgood.encoder import (
    EncoderConfig,
    as_consts,
    classify,
    collate,
    deepset_pool,
    embed_many,
    encode,
    forward,
    gin_super_forward,
    init_params,
    param_shapes,
    project,
)
from sgood.graph import Graph, complete_graph, cycle_graph, disjoint_union, wl_distinguishable
from sgood.substructure import Partition, build_super_graph, detect

from conftest import motif_stitched, random_graph


def prepared(g):
    p = detect(g)
    return g, p, build_super_graph(g, p)


def test_default_widths():
    cfg = EncoderConfig(in_dim=5, num_classes=6)
    assert (cfg.node_width, cfg.super_width, cfg.score_width) == (48, 48, 96)
    g, p, sg = prepared(complete_graph(3).with_features(np.ones((3, 5))))
    e = encode(g, p, sg, init_params(cfg, 0), cfg)
    assert e.h_G.shape == (48,) and e.h_sup.shape == (48,) and e.logits.shape == (6,)
    assert e.h_g.shape == (1, 48)
    shapes = dict(param_shapes(cfg))
    assert shapes["node0.W1"] == (5, 16) and shapes["pool.phi.W1"] == (48, 16) and shapes["cls.W"] == (48, 6)


def test_config_validation_and_json():
    for bad in ({"L1": 0}, {"L2": 0}, {"d": 0}, {"num_classes": 0}):
        with pytest.raises(ValueError):
            EncoderConfig(**{"in_dim": 2, "num_classes": 2, **bad})
    cfg = EncoderConfig(3, 2, L1=2, use_super=False)
    assert EncoderConfig.from_json(cfg.to_json()) == cfg
    assert cfg.rep_width == cfg.node_width == 32 and cfg.score_width == 32


def test_zero_weights_give_zero_layers():
    cfg = EncoderConfig(2, 2, d=4)
    params = {k: np.zeros_like(v) for k, v in init_params(cfg, 1).items()}
    g, p, sg = prepared(motif_stitched(np.random.default_rng(0)))
    g = g.with_features(np.random.default_rng(1).normal(size=(g.node_count, 2)))
    out = forward(as_consts(params), collate([g], [p], [sg]), cfg)
    assert not out.h_v.value.any() and not out.h_sup.value.any()
    np.testing.assert_array_equal(classify(out.rep, as_consts(params)).value, np.zeros((1, 2)))


def test_isolated_nodes_no_crosstalk():
    cfg = EncoderConfig(2, 1, L1=1, d=3)
    params = init_params(cfg, 4)
    x = np.array([[1.0, -2.0], [0.5, 3.0]])
    g = Graph(2, [], x)
    out = forward(as_consts(params), collate([g], [Partition([0, 1], 2)], [build_super_graph(g, Partition([0, 1], 2))]), cfg)
    h = np.maximum(x @ params["node0.W1"] + params["node0.b1"], 0) @ params["node0.W2"] + params["node0.b2"]
    np.testing.assert_allclose(out.h_v.value, h, atol=1e-14)


def test_batched_equals_unbatched():
    rng = np.random.default_rng(5)
    cfg = EncoderConfig(1, 3)
    params = init_params(cfg, 2)
    items = [prepared(motif_stitched(rng) if i % 2 else random_graph(rng, 10)) for i in range(12)]
    hG, hS, logits = embed_many(*zip(*items), params, cfg)
    for i, (g, p, sg) in enumerate(items):
        e = encode(g, p, sg, params, cfg)
        np.testing.assert_allclose(hG[i], e.h_G, atol=1e-10)
        np.testing.assert_allclose(hS[i], e.h_sup, atol=1e-10)
        np.testing.assert_allclose(logits[i], e.logits, atol=1e-10)


def test_deepset_permutation_and_cancellation():
    cfg = EncoderConfig(1, 1, L1=1, d=4)
    params = init_params(cfg, 3)
    h = np.random.default_rng(0).normal(size=(5, 4))
    p = as_consts(params)
    a = deepset_pool(dc.const(h), [0, 0, 1, 1, 1], 2, p).value
    b = deepset_pool(dc.const(h[[1, 0, 4, 2, 3]]), [0, 0, 1, 1, 1], 2, p).value
    np.testing.assert_allclose(a, b, atol=1e-14)
    # a large hidden bias keeps every relu open, so phi is affine; cancel its offset to make it linear
    lin = dict(params)
    lin["pool.phi.b1"] = np.full((1, 4), 100.0)
    lin["pool.phi.b2"] = -lin["pool.phi.b1"] @ lin["pool.phi.W2"]
    v = np.random.default_rng(1).normal(size=(1, 4)) * 0.1
    out = deepset_pool(dc.const(np.vstack([v, -v])), [0, 0], 1, as_consts(lin)).value
    rho0 = np.maximum(lin["pool.rho.b1"], 0) @ lin["pool.rho.W2"] + lin["pool.rho.b2"]
    np.testing.assert_allclose(out, rho0, atol=1e-12)
    with pytest.raises(ValueError):
        deepset_pool(dc.const(np.zeros((0, 4))), [], 0, p)


def test_super_self_loop_rule():
    cfg = EncoderConfig(1, 1, L2=1, d=3)
    params = init_params(cfg, 0)
    params["super0.eps"] = np.array([[0.25]])
    h0 = np.array([[0.3, -1.0, 2.0]])
    layers = gin_super_forward(sp.csr_matrix(np.ones((1, 1))), dc.const(h0), as_consts(params), cfg)
    x = 2.25 * h0
    want = np.maximum(x @ params["super0.W1"] + params["super0.b1"], 0) @ params["super0.W2"] + params["super0.b2"]
    np.testing.assert_allclose(layers[1].value, want, atol=1e-14)
    np.testing.assert_array_equal(layers[0].value, h0)


def test_single_super_node_readout_is_h_g():
    cfg = EncoderConfig(1, 2)
    g, p, sg = prepared(complete_graph(4))
    e = encode(g, p, sg, init_params(cfg, 0), cfg)
    np.testing.assert_allclose(e.h_sup, e.h_g[0])


def test_permutation_invariance():
    rng = np.random.default_rng(8)
    cfg = EncoderConfig(1, 2)
    params = init_params(cfg, 6)
    for _ in range(20):
        g, p, sg = prepared(motif_stitched(rng))
        perm = rng.permutation(g.node_count)
        gp = g.permute(perm)
        a = np.empty(g.node_count, dtype=np.int64)
        a[perm] = p.assignment
        pp = Partition(a, p.n_sub)
        e1, e2 = encode(g, p, sg, params, cfg), encode(gp, pp, build_super_graph(gp, pp), params, cfg)
        np.testing.assert_allclose(e1.h_G, e2.h_G, atol=1e-10)
        np.testing.assert_allclose(e1.h_sup, e2.h_sup, atol=1e-10)


def test_input_layer_not_concatenated():
    cfg = EncoderConfig(3, 2, d=4)
    params = init_params(cfg, 1)
    params["node0.W1"] = np.zeros_like(params["node0.W1"])
    g, p, sg = prepared(cycle_graph(5).with_features(np.random.default_rng(0).normal(size=(5, 3))))
    g2 = g.with_features(g.features + 7.0)
    e1, e2 = encode(g, p, sg, params, cfg), encode(g2, p, sg, params, cfg)
    np.testing.assert_array_equal(e1.h_G, e2.h_G)


def test_projection_unit_norm_and_not_scale_invariant():
    cfg = EncoderConfig(1, 2, d=8)
    p = as_consts(init_params(cfg, 2))
    h = np.random.default_rng(3).normal(size=(6, cfg.rep_width))
    u = project(dc.const(h), p).value
    np.testing.assert_allclose(np.linalg.norm(u, axis=1), 1.0, atol=1e-12)
    params = init_params(cfg, 2)
    params["proj.b1"] = np.full((1, 8), 0.5)
    p = as_consts(params)
    assert not np.allclose(project(dc.const(h[:1]), p).value, project(dc.const(3 * h[:1]), p).value)


def test_projection_inner_product_gradient():
    cfg = EncoderConfig(1, 2, d=4)
    params = init_params(cfg, 0)
    h = np.random.default_rng(4).normal(size=(2, cfg.rep_width))

    def fn(q):
        u = project(dc.const(h), q)
        return dc.sum(dc.mul(dc.take_rows(u, [0]), dc.take_rows(u, [1])))

    sub = {k: v for k, v in params.items() if k.startswith("proj")}
    assert dc.grad_check(fn, sub) < 1e-6


def test_classifier_zero_and_shift():
    cfg = EncoderConfig(1, 6)
    params = init_params(cfg, 0)
    params["cls.W"] = np.zeros_like(params["cls.W"])
    z = classify(dc.const(np.ones((2, cfg.rep_width))), as_consts(params)).value
    np.testing.assert_array_equal(z, 0)
    assert dc.softmax_cross_entropy(dc.const(z), [0, 5]).item() == pytest.approx(np.log(6))
    logits = np.random.default_rng(0).normal(size=(4, 6))
    np.testing.assert_array_equal(np.argmax(logits, 1), np.argmax(logits + 3.7, 1))


def test_two_regular_pairs_separated():
    cfg = EncoderConfig(1, 1)
    pairs = [(cycle_graph(6), disjoint_union(cycle_graph(3), cycle_graph(3))),
             (cycle_graph(8), disjoint_union(cycle_graph(4), cycle_graph(4)))]
    for g1, g2 in pairs:
        assert not wl_distinguishable(g1, g2, 8)
        a, b = prepared(g1), prepared(g2)
        hits = sum(
            np.linalg.norm(encode(*a, init_params(cfg, s), cfg).h_sup - encode(*b, init_params(cfg, s), cfg).h_sup) > 1e-6
            for s in range(30)
        )
        assert hits == 30


def test_wl_distinguishable_pairs_separated():
    rng = np.random.default_rng(12)
    cfg = EncoderConfig(1, 1)
    params = init_params(cfg, 0)
    checked = 0
    while checked < 100:
        g1, g2 = random_graph(rng, 9, min_nodes=3), random_graph(rng, 9, min_nodes=3)
        if not wl_distinguishable(g1, g2, 4):
            continue
        e1, e2 = encode(*prepared(g1), params, cfg), encode(*prepared(g2), params, cfg)
        assert np.linalg.norm(e1.h_sup - e2.h_sup) > 1e-6
        checked += 1


def test_without_super_branch():
    cfg = EncoderConfig(1, 2, use_super=False)
    params = init_params(cfg, 0)
    assert not any(k.startswith(("pool", "super")) for k in params)
    e = encode(*prepared(cycle_graph(5)), params, cfg)
    assert e.h_sup is None and e.h_G.shape == (48,)
