import numpy as np
import pytest

from arplan import scenes
from arplan.model import (CheckpointError, ModelConfig, forward, init_model,
                          load_checkpoint, make_batch, save_checkpoint,
                          semantic_logits)
from arplan.tensor import no_grad


def tiny_cfg(**kw):
    base = dict(d_model=16, n_heads=2, encoder_layers=1, refine_layers=1,
                d_sem=4, gru_hidden=4)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def batch():
    ds = scenes.generate_dataset(6, seed=2)
    return make_batch(ds.scenes)


# -- batch assembly --------------------------------------------------------


def test_make_batch_shapes(batch):
    B = 6
    assert batch.bev.shape == (B, scenes.C_BEV, scenes.D_FEAT)
    assert batch.ego.shape == (B, 8)
    assert batch.sem_labels.shape == (B, 32, 32)
    assert batch.sem_onehot.shape == (B, 4, 32, 32)
    assert batch.gt.shape == (B, 8, 3)
    assert batch.agent_feats.shape[0] == B
    assert batch.agent_mask.shape == batch.agent_feats.shape[:2]
    assert batch.size == B


def test_make_batch_onehot_consistent(batch):
    recovered = batch.sem_onehot.argmax(axis=1)
    assert np.array_equal(recovered, batch.sem_labels)


def test_make_batch_mask_matches_agent_counts(batch):
    for i, s in enumerate(batch.scenes):
        assert batch.agent_mask[i].sum() == s.agents.shape[0]


# -- forward ---------------------------------------------------------------


def test_forward_output_shapes(batch):
    cfg = tiny_cfg()
    params = init_model(cfg, 0)
    with no_grad():
        out = forward(params, cfg, batch)
    B = batch.size
    assert out.traj.shape == (B, 8, 3)
    assert out.traj_init.shape == (B, 8, 3)
    assert len(out.dists) == 8
    assert out.sem_logits.shape == (B, scenes.C_BEV, 64)
    assert out.pe_count == 1


@pytest.mark.parametrize("kw", [{"no_moe": True}, {"no_ar": True},
                                {"no_refine": True},
                                {"routing_mode": "command"},
                                {"routing_mode": "fixed-expert-1"}])
def test_forward_variants_run_and_differ(batch, kw):
    base_cfg = tiny_cfg()
    base_params = init_model(base_cfg, 0)
    cfg = tiny_cfg(**kw)
    params = init_model(cfg, 0)
    with no_grad():
        base_out = forward(base_params, base_cfg, batch).traj.data
        out = forward(params, cfg, batch)
    assert out.traj.shape == base_out.shape
    assert np.isfinite(out.traj.data).all()
    assert not np.array_equal(out.traj.data, base_out)


def test_no_refine_returns_planner_output(batch):
    cfg = tiny_cfg(no_refine=True)
    params = init_model(cfg, 0)
    with no_grad():
        out = forward(params, cfg, batch)
    assert np.array_equal(out.traj.data, out.traj_init.data)


def test_unknown_routing_mode_rejected(batch):
    cfg = tiny_cfg(routing_mode="roulette")
    params = init_model(cfg, 0)
    with pytest.raises(ValueError):
        forward(params, cfg, batch)


def test_fixed_expert_out_of_range(batch):
    cfg = tiny_cfg(routing_mode="fixed-expert-9")
    params = init_model(cfg, 0)
    with pytest.raises(ValueError):
        forward(params, cfg, batch)


def test_command_routing_uses_command_expert(batch):
    from arplan.model import _command_router
    router = _command_router(batch.commands, tiny_cfg().moe_cfg())
    out = router(None, None, np.zeros((batch.size, 1)), tiny_cfg().moe_cfg())
    assert out.topk_indices.shape == (batch.size, 1)
    assert np.array_equal(out.topk_indices[:, 0],
                          np.minimum(batch.commands, 4))
    assert np.allclose(out.topk_weights.data, 1.0)


def test_semantic_logits_shape(batch):
    cfg = tiny_cfg()
    params = init_model(cfg, 0)
    with no_grad():
        logits = semantic_logits(params, batch.bev)
    assert logits.shape == (batch.size, scenes.C_BEV, 64)


def test_init_deterministic():
    a = init_model(tiny_cfg(), 5)
    b = init_model(tiny_cfg(), 5)
    assert set(a.keys()) == set(b.keys())
    for n in a:
        assert np.array_equal(a[n].data, b[n].data)
    c = init_model(tiny_cfg(), 6)
    assert any(not np.array_equal(a[n].data, c[n].data) for n in a)


# -- checkpoints -----------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    cfg = tiny_cfg(routing_mode="command", no_refine=True)
    params = init_model(cfg, 3)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, cfg, "deadbeef", epoch=7, seed=3)
    p2, cfg2, header = load_checkpoint(path)
    assert cfg2 == cfg
    assert header["epoch"] == 7 and header["seed"] == 3
    assert header["config_hash"] == "deadbeef"
    assert set(p2.keys()) == set(params.keys())
    for n in params:
        assert np.array_equal(p2[n].data, params[n].data)


def test_checkpoint_bitwise_reproducible(tmp_path):
    cfg = tiny_cfg()
    params = init_model(cfg, 0)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, params, cfg, "h", 1, 0)
    save_checkpoint(p2, params, cfg, "h", 1, 0)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_bad_format(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b'{"format": "ckpt-v9", "params": []}\n')
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(b"garbage\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path):
    cfg = tiny_cfg()
    params = init_model(cfg, 0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, cfg, "h", 1, 0)
    raw = path.read_bytes()
    path.write_bytes(raw[:-16])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
