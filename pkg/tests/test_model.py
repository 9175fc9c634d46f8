import numpy as np
import pytest

from cssample import tensor as T
from cssample.model import (
    CsNetConfig,
    CsNetModel,
    LossConfig,
    cascade_attention,
    feature_embed,
    forward_sample,
    forward_scores,
    gated_chamfer_weights,
    grouping_layer,
    joint_loss,
    knn_indices,
    offset_attention,
    score,
    select,
    self_attention,
)
from cssample.metrics import chamfer
from cssample.pointcloud import PointCloud
from cssample.tensor import Graph
from reference import brute_knn, softmax_ref

SMALL = CsNetConfig(n_neighbors=4, n_features=8)


def _cloud(n, seed=0):
    return PointCloud(np.random.default_rng(seed).normal(size=(n, 3)))


def _consts(graph, params):
    return {k: graph.constant(np.asarray(v, dtype=np.float64)) for k, v in params.items()}


def _scores64(pts, model):
    with Graph(np.float64) as g:
        return forward_scores(g, pts, model, _consts(g, model.params)).data.copy()


# --- configuration / parameters -------------------------------------------------


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        CsNetConfig(attention="conv")
    with pytest.raises(ValueError):
        CsNetConfig(n_neighbors=0)
    cfg = CsNetConfig(n_neighbors=5, n_features=12, attention="sa")
    assert CsNetConfig.from_dict(cfg.to_dict()) == cfg


def test_parameter_shapes():
    m = CsNetModel.initialize(CsNetConfig())
    c = 64
    assert m.params["fe.mlp.0.w"].shape == (6, c)
    assert m.params["fe.xi.0.w"].shape == (2 * c, c)
    for blk in range(3):
        for w in ("query", "key", "value"):
            assert m.params[f"ca.{blk}.w_{w}"].shape == (c, c)
    assert m.params["cs.rho.0.w"].shape == (3 * c, 128)
    assert [m.params[f"cs.fc.{i}.w"].shape for i in range(3)] == [(128, 64), (64, 32), (32, 1)]
    mlp_only = CsNetModel.initialize(CsNetConfig(attention="mlp"))
    assert not any("w_query" in k for k in mlp_only.params)


def test_model_rejects_bad_tables():
    m = CsNetModel.initialize(SMALL)
    bad = dict(m.params)
    bad["cs.fc.2.b"] = np.array([np.inf], dtype=np.float32)
    with pytest.raises(ValueError, match="non-finite"):
        CsNetModel(SMALL, bad)
    bad = dict(m.params)
    del bad["fe.xi.0.b"]
    with pytest.raises(ValueError, match="missing"):
        CsNetModel(SMALL, bad)
    bad = dict(m.params)
    bad["fe.xi.0.w"] = np.zeros((3, 3), dtype=np.float32)
    with pytest.raises(ValueError, match="shape"):
        CsNetModel(SMALL, bad)


def test_initialisation_is_seeded():
    a, b = CsNetModel.initialize(SMALL, 3), CsNetModel.initialize(SMALL, 3)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = CsNetModel.initialize(SMALL, 4)
    assert not np.array_equal(a.params["fe.mlp.0.w"], c.params["fe.mlp.0.w"])


# --- grouping ---------------------------------------------------------------------


def test_knn_matches_brute_force_on_100_clouds():
    rng = np.random.default_rng(0)
    for _ in range(100):
        pts = rng.normal(size=(64, 3))
        assert np.array_equal(knn_indices(pts, 8), brute_knn(pts, 8))


def test_knn_ties_and_duplicates():
    pts = np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 0, 0]], dtype=float)
    idx = knn_indices(pts, 4)
    assert idx[0].tolist() == [0, 3, 1, 2]
    assert idx[3].tolist() == [3, 0, 1, 2]
    assert np.array_equal(idx, brute_knn(pts, 4))
    with pytest.raises(ValueError):
        knn_indices(pts, 5)


def test_grouping_examples():
    off, _ = grouping_layer(PointCloud([[0, 0, 0], [1, 0, 0]]), 2)
    assert off[0].tolist() == [[0, 0, 0], [1, 0, 0]]
    off, _ = grouping_layer(_cloud(30), 6)
    assert off.shape == (30, 6, 3) and np.all(off[:, 0] == 0)
    with pytest.raises(ValueError):
        grouping_layer(_cloud(3), 4)


# --- feature embedding ---------------------------------------------------------------


def test_feature_embed_shape_and_permutation():
    m = CsNetModel.initialize(SMALL, 1)
    pts = _cloud(40, 2).points
    perm = np.random.default_rng(3).permutation(40)
    with Graph(np.float64) as g:
        p = _consts(g, m.params)
        a = feature_embed(g, pts, p, 4, 8).data
        b = feature_embed(g, pts[perm], p, 4, 8).data
    assert a.shape == (40, 8)
    assert np.abs(a[perm] - b).max() < 1e-5


def test_feature_embed_duplicated_cloud():
    # each point gets a twin at the same place; neighbourhoods of twins are identical
    m = CsNetModel.initialize(SMALL, 1)
    pts = _cloud(20, 5).points
    doubled = np.concatenate([pts, pts])
    with Graph(np.float64) as g:
        f = feature_embed(g, doubled, _consts(g, m.params), 4, 8).data
    assert np.array_equal(f[:20], f[20:])


# --- attention -----------------------------------------------------------------------


def test_self_attention_reference_and_single_point():
    m = CsNetModel.initialize(SMALL, 2)
    x = np.random.default_rng(0).normal(size=(10, 8))
    with Graph(np.float64) as g:
        p = _consts(g, m.params)
        out = self_attention(g.constant(x), p, 0).data
        one = self_attention(g.constant(x[:1]), p, 0).data
    W = {w: m.params[f"ca.0.w_{w}"].astype(np.float64) for w in ("query", "key", "value")}
    q, k, v = x @ W["query"], x @ W["key"], x @ W["value"]
    attn = softmax_ref(q @ k.T, axis=1, scale=np.sqrt(8))
    assert np.abs(attn.sum(axis=1) - 1).max() < 1e-6
    assert np.abs(out - attn @ v).max() < 1e-5
    assert np.array_equal(one, x[:1] @ W["value"])


def test_offset_attention_zero_gamma_is_identity():
    m = CsNetModel.initialize(SMALL, 3)
    params = {k: (np.zeros_like(v) if ".gamma." in k else v) for k, v in m.params.items()}
    x = np.random.default_rng(1).normal(size=(12, 8))
    for kind in ("oa", "sa", "mlp"):
        with Graph(np.float64) as g:
            out, _ = offset_attention(g.constant(x), _consts(g, params), 0, kind)
        assert np.array_equal(out.data, x)


def test_oa_and_sa_differ_only_in_gamma_argument():
    m = CsNetModel.initialize(SMALL, 3)
    params = {k: (np.zeros_like(v) if "w_value" in k else v) for k, v in m.params.items()}
    x = np.random.default_rng(1).normal(size=(12, 8))
    with Graph(np.float64) as g:
        p = _consts(g, params)
        oa, f_sa = offset_attention(g.constant(x), p, 0, "oa")
        sa, _ = offset_attention(g.constant(x), p, 0, "sa")
        from cssample.layers import mlp

        gamma_x = mlp(g.constant(x), p, "ca.0.gamma", 2, final_relu=False).data
        gamma_0 = mlp(g.constant(np.zeros_like(x)), p, "ca.0.gamma", 2, final_relu=False).data
    assert np.all(f_sa.data == 0)
    assert np.allclose(oa.data, gamma_x + x, atol=1e-12)
    assert np.allclose(sa.data, gamma_0 + x, atol=1e-12)


def test_cascade_with_zeroed_blocks_gives_three_copies():
    m = CsNetModel.initialize(SMALL, 4)
    params = {k: (np.zeros_like(v) if k.startswith("ca.") else v) for k, v in m.params.items()}
    x = np.random.default_rng(2).normal(size=(9, 8))
    with Graph(np.float64) as g:
        out = cascade_attention(g.constant(x), _consts(g, params), "oa").data
    assert out.shape == (9, 24)
    assert np.array_equal(out, np.concatenate([x, x, x], axis=1))


@pytest.mark.parametrize("kind", ["oa", "sa", "mlp"])
def test_residual_block_gradient_matches_fd(kind):
    m = CsNetModel.initialize(SMALL, 5)
    rng = np.random.default_rng(6)
    params = {k: (v + rng.normal(0, 0.05, v.shape) if k.endswith(".b") else v) for k, v in m.params.items()}
    x = rng.normal(size=(6, 8))
    proj = rng.normal(size=(6, 8))

    def f(leaf):
        out, _ = offset_attention(leaf, _consts(leaf.graph, params), 0, kind)
        return T.reduce_sum(T.mul(out, leaf.graph.constant(proj)))

    rep = T.finite_diff_check(f, x, h=1e-6, tol=1e-4)
    assert rep.passed, rep


def test_cascade_permutation_equivariance():
    m = CsNetModel.initialize(SMALL, 7)
    x = np.random.default_rng(3).normal(size=(15, 8))
    perm = np.random.default_rng(4).permutation(15)
    with Graph(np.float64) as g:
        p = _consts(g, m.params)
        a = cascade_attention(g.constant(x), p).data
        b = cascade_attention(g.constant(x[perm]), p).data
    assert np.abs(a[perm] - b).max() < 1e-5


# --- scoring / sampling ----------------------------------------------------------------


def test_score_properties():
    m = CsNetModel.initialize(SMALL, 8)
    x = np.random.default_rng(5).normal(size=(10, 24))
    x[7] = x[2]
    perm = np.random.default_rng(6).permutation(10)
    with Graph(np.float64) as g:
        p = _consts(g, m.params)
        s = score(g.constant(x), p).data
        sp = score(g.constant(x[perm]), p).data
    assert s.shape == (10,) and s[7] == s[2]
    # BLAS blocking may move the last bit of a row with its position
    assert np.abs(s[perm] - sp).max() < 1e-12


def test_end_to_end_permutation_equivariance():
    m = CsNetModel.initialize(SMALL, 9)
    rng = np.random.default_rng(10)
    for _ in range(5):
        c = PointCloud(rng.normal(size=(48, 3)))
        perm = rng.permutation(48)
        s, sp = _scores64(c.points, m), _scores64(c.points[perm], m)
        assert np.abs(s[perm] - sp).max() < 1e-5
        a = select(c, m, 12).sampled.points
        b = select(PointCloud(c.points[perm]), m, 12).sampled.points
        assert {tuple(r) for r in a} == {tuple(r) for r in b}


def test_activation_record_shapes():
    m = CsNetModel.initialize(SMALL, 11)
    c = _cloud(32, 1)
    with Graph(np.float64) as g:
        res, gates, rec, plan = forward_sample(g, c, m, 8)
    assert rec.f_group.shape == (32, 4, 3)
    assert rec.f_combine.shape == (32, 4, 8)
    assert rec.f_pointwise.shape == (32, 8)
    assert len(rec.f_sa) == 3 and all(a.shape == (32, 8) for a in rec.f_sa)
    assert all(a.shape == (32, 8) for a in rec.f_oa)
    assert rec.f_concat.shape == (32, 24) and rec.s_con.shape == (32,)
    assert np.all(gates.data == 1.0) and plan.gamma.shape == (32, 2)


@pytest.mark.parametrize("k", [32, 16, 8])
def test_forward_sample_ratios_and_subset(k):
    m = CsNetModel.initialize(SMALL, 12)
    rng = np.random.default_rng(k)
    for i in range(10):
        pts = rng.normal(size=(64, 3))
        if i % 2:
            pts[rng.integers(64, size=20)] = pts[0]
        c = PointCloud(pts)
        with Graph(np.float32) as g:
            res, gates, _, _ = forward_sample(g, c, m, k)
        assert res.k == k and gates.shape == (k,)
        res.validate(c)


def test_forward_sample_errors():
    m = CsNetModel.initialize(SMALL)
    with pytest.raises(ValueError):
        with Graph() as g:
            forward_sample(g, _cloud(8), m, 8)
    with pytest.raises(ValueError):
        with Graph() as g:
            forward_sample(g, _cloud(3), m, 1)


# --- loss --------------------------------------------------------------------------------


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(alpha=0, beta=0)
    with pytest.raises(ValueError):
        LossConfig(alpha=-1)
    with pytest.raises(ValueError):
        LossConfig(loss_variant="l2")


def test_gated_chamfer_weights_sum_to_chamfer():
    rng = np.random.default_rng(0)
    for _ in range(20):
        full = rng.normal(size=(30, 3))
        sub = full[rng.choice(30, 7, replace=False)]
        assert abs(gated_chamfer_weights(sub, full).sum() - chamfer(sub, full)) < 1e-12


def test_joint_loss_examples():
    m = CsNetModel.initialize(SMALL, 13)
    c = _cloud(32, 2)
    with Graph(np.float64) as g:
        res, gates, _, _ = forward_sample(g, c, m, 8, _consts(g, m.params))
        assert joint_loss(res, gates, c, 0.0, LossConfig(1, 0, "emd")).item() == 0.0
        assert joint_loss(res, gates, c, 2.5, LossConfig(0, 1, "cd")).item() == 2.5
        cd = joint_loss(res, gates, c, 0.0, LossConfig(1, 0, "cd")).item()
        both = joint_loss(res, gates, c, 0.5, LossConfig(2, 3, "cd_plus_emd")).item()
    assert abs(cd - chamfer(res.sampled, c)) < 1e-12
    assert abs(both - (2 * cd + 1.5)) < 1e-12


def test_shape_loss_gradient_reaches_scores():
    m = CsNetModel.initialize(SMALL, 14)
    c = _cloud(32, 3)
    with Graph(np.float64) as g:
        p = m.bind(g)
        res, gates, _, _ = forward_sample(g, c, m, 8, p)
        loss = joint_loss(res, gates, c, 0.0, LossConfig(1, 0, "cd"))
        grads = T.backward(g, loss)
        gnorm = sum(float(np.abs(grads[t]).sum()) for t in p.values())
    assert gnorm > 0
    with Graph(np.float64) as g:
        p = m.bind(g)
        res, gates, _, _ = forward_sample(g, c, m, 8, p)
        loss = joint_loss(res, gates, c, 0.0, LossConfig(1, 0, "emd"))
        grads = T.backward(g, loss)
        # a selected subset matches itself at zero cost: no shape signal
        assert all(np.all(grads[t] == 0) for t in p.values())
