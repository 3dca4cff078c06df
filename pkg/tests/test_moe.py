import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arplan import nn
from arplan.moe import (ConfigError, MoEConfig, apply_perm,
                        build_dispatch_plan, init_moe, invert_perm,
                        moe_block, moe_block_naive, route)
from arplan.tensor import Tensor, no_grad
from conftest import check_param_grads


def small_cfg(**kw):
    base = dict(n_private=3, n_shared=1, k=2, d_model=8, n_heads=2)
    base.update(kw)
    return MoEConfig(**base)


def init(cfg, seed=0):
    params = nn.Params()
    init_moe(params, "m", cfg, np.random.default_rng(seed))
    return params


def rand_inputs(rng, cfg, B, n_tokens=4, c_bev=6):
    return (Tensor(rng.normal(size=(B, c_bev, cfg.d_model))),
            Tensor(rng.normal(size=(B, n_tokens, cfg.d_model))),
            Tensor(rng.normal(size=(B, 3 * cfg.d_model))))


# -- config ----------------------------------------------------------------


def test_config_rejects_bad_k():
    with pytest.raises(ConfigError):
        MoEConfig(n_private=2, k=3)
    with pytest.raises(ConfigError):
        MoEConfig(n_private=2, k=0)


def test_router_hidden_defaults_to_half():
    assert MoEConfig(d_model=64).router_hidden == 32


# -- dispatch plan ---------------------------------------------------------


def test_dispatch_plan_worked_example():
    plan = build_dispatch_plan(np.array([2, 0, 2, 1, 0]))
    assert plan.perm.tolist() == [1, 4, 3, 0, 2]
    assert plan.blocks == [(0, 0, 2), (1, 2, 1), (2, 3, 2)]


def test_dispatch_plan_stable_within_expert():
    plan = build_dispatch_plan(np.array([1, 1, 0, 1]))
    # samples for expert 1 stay in original order
    assert plan.perm.tolist() == [2, 0, 1, 3]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 7), min_size=1, max_size=40))
def test_perm_roundtrip(ids):
    plan = build_dispatch_plan(np.array(ids))
    x = Tensor(np.arange(len(ids), dtype=float).reshape(-1, 1))
    back = invert_perm(apply_perm(x, plan.perm), plan.perm)
    assert np.array_equal(back.data, x.data)
    # blocks tile the batch and sorted ids are non-decreasing
    assert sum(b[2] for b in plan.blocks) == len(ids)
    sorted_ids = np.array(ids)[plan.perm]
    assert (np.diff(sorted_ids) >= 0).all()


def test_perm_length_mismatch():
    with pytest.raises(nn.ShapeError):
        apply_perm(Tensor(np.zeros((3, 1))), np.array([0, 1]))


# -- router ----------------------------------------------------------------


def test_router_output_shapes_and_normalization(rng):
    cfg = small_cfg()
    params = init(cfg)
    q_r = Tensor(rng.normal(size=(10, 3 * cfg.d_model)))
    out = route(params, "m", q_r, cfg)
    assert out.scores.shape == (10, cfg.n_private)
    assert out.topk_indices.shape == (10, cfg.k)
    assert np.allclose(out.scores.data.sum(-1), 1.0, atol=1e-12)
    assert np.allclose(out.topk_weights.data.sum(-1), 1.0, atol=1e-12)
    assert (out.topk_weights.data > 0).all()
    # selected are the top-scoring experts
    order = np.argsort(-out.scores.data, axis=-1, kind="stable")
    assert np.array_equal(out.topk_indices, order[:, :cfg.k])


def test_router_tie_prefers_lower_index():
    cfg = small_cfg()
    params = init(cfg)
    # zero the router -> all logits identical -> tie
    params["m.router.l1.w"].data[:] = 0.0
    params["m.router.l1.b"].data[:] = 0.0
    q_r = Tensor(np.random.default_rng(0).normal(size=(4, 3 * cfg.d_model)))
    out = route(params, "m", q_r, cfg)
    assert np.array_equal(out.topk_indices,
                          np.tile([0, 1], (4, 1)))
    assert np.allclose(out.topk_weights.data, 0.5)


def test_router_renormalization_matches_selected_softmax():
    # softmax([2,1,0,0,0]) restricted to top-2 renormalizes to softmax([2,1])
    cfg = small_cfg(n_private=5)
    params = init(cfg)
    params["m.router.l0.w"].data[:] = 0.0
    params["m.router.l0.b"].data[:] = 0.0
    params["m.router.l1.w"].data[:] = 0.0
    params["m.router.l1.b"].data = np.array([2.0, 1.0, 0.0, 0.0, 0.0])
    out = route(params, "m", Tensor(np.zeros((1, 3 * cfg.d_model))), cfg)
    expect = np.exp([2.0, 1.0])
    expect = expect / expect.sum()
    assert np.allclose(out.topk_weights.data[0], expect, atol=1e-12)


def test_router_rejects_bad_width():
    cfg = small_cfg()
    params = init(cfg)
    with pytest.raises(nn.ShapeError):
        route(params, "m", Tensor(np.zeros((2, cfg.d_model))), cfg)


def test_router_nonfinite_names_sample():
    cfg = small_cfg()
    params = init(cfg)
    params["m.router.l1.b"].data[:] = np.nan
    with pytest.raises(FloatingPointError) as exc:
        route(params, "m", Tensor(np.zeros((3, 3 * cfg.d_model))), cfg)
    assert "sample index 0" in str(exc.value)


def test_router_sparsity_bulk(rng):
    cfg = MoEConfig(n_private=5, k=2, d_model=16)
    params = init(cfg)
    q_r = Tensor(rng.normal(size=(2000, 3 * cfg.d_model)))
    with no_grad():
        out = route(params, "m", q_r, cfg)
    w = out.topk_weights.data
    assert w.shape == (2000, 2)
    assert ((w >= 0) & (w <= 1)).all()
    assert np.abs(w.sum(-1) - 1.0).max() <= 1e-12


# -- grouped vs naive ------------------------------------------------------


def test_grouped_matches_naive_randomized():
    rng = np.random.default_rng(123)
    worst = 0.0
    for trial in range(30):
        n_private = int(rng.integers(1, 9))
        k = int(rng.integers(1, min(n_private, 3) + 1))
        cfg = MoEConfig(n_private=n_private, n_shared=int(rng.integers(0, 2)),
                        k=k, d_model=8, n_heads=2)
        params = init(cfg, seed=trial)
        B = int(rng.integers(1, 17))
        bev, c_t, q_r = rand_inputs(rng, cfg, B)
        with no_grad():
            a = moe_block(params, "m", bev, c_t, q_r, cfg).data
            b = moe_block_naive(params, "m", bev, c_t, q_r, cfg).data
        worst = max(worst, float(np.abs(a - b).max()))
    assert worst <= 1e-9, worst


def test_zero_bev_zero_out_projection_case(rng):
    # zero BEV values + zero attention output projection -> expert output is
    # the layer-normed residual path of c_t
    cfg = small_cfg(n_private=1, n_shared=0, k=1)
    params = init(cfg)
    params["m.priv0.attn.o.w"].data[:] = 0.0
    params["m.priv0.attn.o.b"].data[:] = 0.0
    bev = Tensor(np.zeros((2, 4, cfg.d_model)))
    c_t = Tensor(rng.normal(size=(2, 3, cfg.d_model)))
    q_r = Tensor(rng.normal(size=(2, 3 * cfg.d_model)))
    from arplan.moe import expert_forward
    got = expert_forward(params, "m.priv0", bev, c_t, cfg.n_heads).data
    h = nn.layer_norm_p(params, "m.priv0.ln1", c_t)
    f = nn.linear(params, "m.priv0.ff1",
                  nn.linear(params, "m.priv0.ff0", h).relu())
    expect = nn.layer_norm_p(params, "m.priv0.ln2", h + f).data
    assert np.allclose(got, expect, atol=1e-12)


def test_batch_order_equivariance(rng):
    cfg = small_cfg()
    params = init(cfg)
    bev, c_t, q_r = rand_inputs(rng, cfg, 6)
    perm = np.random.default_rng(5).permutation(6)
    with no_grad():
        full = moe_block(params, "m", bev, c_t, q_r, cfg).data
        shuffled = moe_block(params, "m", Tensor(bev.data[perm]),
                             Tensor(c_t.data[perm]),
                             Tensor(q_r.data[perm]), cfg).data
    assert np.abs(full[perm] - shuffled).max() <= 1e-9


def test_moe_block_gradients(rng):
    cfg = MoEConfig(n_private=2, n_shared=1, k=2, d_model=4, n_heads=2)
    params = init(cfg)
    bev, c_t, q_r = rand_inputs(rng, cfg, 3, n_tokens=2, c_bev=3)
    check_param_grads(
        params,
        lambda: (moe_block(params, "m", bev, c_t, q_r, cfg) ** 2).sum(),
        tol=1e-4)


def test_shared_expert_and_residual_applied_once(rng):
    # k=n_private with a uniform router: output = c_t + shared + sum(g_e * e)
    cfg = small_cfg(n_private=2, k=2)
    params = init(cfg)
    bev, c_t, q_r = rand_inputs(rng, cfg, 2)
    from arplan.moe import expert_forward
    with no_grad():
        out = moe_block(params, "m", bev, c_t, q_r, cfg).data
        router = route(params, "m", q_r, cfg)
        manual = c_t.data + expert_forward(params, "m.shared0", bev, c_t,
                                           cfg.n_heads).data
        for slot in range(2):
            for b in range(2):
                e = int(router.topk_indices[b, slot])
                w = router.topk_weights.data[b, slot]
                manual[b] += w * expert_forward(
                    params, f"m.priv{e}", bev[b:b + 1], c_t[b:b + 1],
                    cfg.n_heads).data[0]
    assert np.abs(out - manual).max() <= 1e-9
