"""Autoregressive planning loop: embeddings, masked sequence encoder,
concatenated query construction, MoE invocation, and the Gaussian waypoint
head, stepped once per horizon slot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .moe import MoEConfig, moe_block, route
from .scenes import HORIZON
from .tensor import Tensor, concat


class SequenceStateError(RuntimeError):
    pass


@dataclass
class PlannerConfig:
    d_model: int = 64
    n_heads: int = 4
    encoder_layers: int = 2
    horizon: int = HORIZON
    sigma_floor: float = 1e-3


@dataclass
class WaypointDistribution:
    mu: Tensor      # [B, 3]
    sigma: Tensor   # [B, 3], >= sigma_floor


class PlanningSequence:
    """Ordered planning queries with fill state.

    ``pe_count`` instruments how many times the positional embedding has been
    applied; it must read exactly 1 per rollout.
    """

    def __init__(self, queries: Tensor, horizon: int):
        self.queries = queries      # [B, H, d]
        self.horizon = horizon
        self.filled = 0
        self.pe_count = 0

    @property
    def batch(self) -> int:
        return self.queries.shape[0]

    def active(self) -> int:
        return max(self.filled, 1)


def wrap_angle_t(x: Tensor) -> Tensor:
    """Wrap to (-pi, pi]; gradient is 1 almost everywhere."""
    shift = np.ceil((x.data - np.pi) / (2.0 * np.pi))
    return x - Tensor(2.0 * np.pi * shift)


def init_planner(params: nn.Params, prefix: str, cfg: PlannerConfig,
                 moe_cfg: MoEConfig, rng: np.random.Generator,
                 dense_expert: bool = False):
    d = cfg.d_model
    scale = 0.1
    params.add(f"{prefix}.te_table", rng.normal(0, scale, (cfg.horizon, d)))
    params.add(f"{prefix}.pe_table", rng.normal(0, scale, (cfg.horizon, d)))
    params.add(f"{prefix}.start_tokens", rng.normal(0, scale, (cfg.horizon, d)))
    nn.init_mlp(params, f"{prefix}.ego", [8, d, d], rng)
    for i in range(cfg.encoder_layers):
        nn.init_encoder_layer(params, f"{prefix}.enc{i}", d, rng)
    if dense_expert:
        from .moe import init_expert
        init_expert(params, f"{prefix}.moe.dense", d, rng)
    else:
        from .moe import init_moe
        init_moe(params, f"{prefix}.moe", moe_cfg, rng)
    nn.init_mlp(params, f"{prefix}.head", [d, d, 6], rng)


def encode_ego(params: nn.Params, prefix: str, s0: Tensor) -> Tensor:
    """Ego state (command one-hot, velocity, acceleration) -> d_model feature."""
    return nn.mlp(params, f"{prefix}.ego", s0, 2)


def init_sequence(params: nn.Params, prefix: str, cfg: PlannerConfig,
                  batch: int) -> PlanningSequence:
    base = params[f"{prefix}.start_tokens"] + params[f"{prefix}.pe_table"]
    queries = base.reshape(1, cfg.horizon, cfg.d_model) + \
        Tensor(np.zeros((batch, 1, 1)))
    seq = PlanningSequence(queries, cfg.horizon)
    seq.pe_count += 1
    return seq


def encoder_update(params: nn.Params, prefix: str, seq: PlanningSequence,
                   cfg: PlannerConfig) -> None:
    """Self-attention over the active prefix only; later positions are left
    bit-identical."""
    a = seq.active()
    active = seq.queries[:, :a, :]
    for i in range(cfg.encoder_layers):
        active = nn.encoder_layer(params, f"{prefix}.enc{i}", active, cfg.n_heads)
    if a < seq.horizon:
        seq.queries = concat([active, seq.queries[:, a:, :]], axis=1)
    else:
        seq.queries = active


def build_concat_query(te_t: Tensor, q_s: Tensor, seq: PlanningSequence):
    """Token order [TE_t, Q_s, Q_1..Q_a], zero-padded to H+2 tokens.

    Returns (tokens [B, H+2, d], active_len). Padded tokens cannot influence
    active outputs downstream: every op consuming them is per-token.
    """
    a = seq.active()
    B, H, d = seq.queries.shape
    parts = [te_t, q_s.reshape(B, 1, d), seq.queries[:, :a, :]]
    if a < H:
        parts.append(Tensor(np.zeros((B, H - a, d))))
    return concat(parts, axis=1), a + 2


def ar_step(params: nn.Params, prefix: str, bev: Tensor, seq: PlanningSequence,
            q_s: Tensor, cfg: PlannerConfig, moe_cfg: MoEConfig,
            router_fn=route, dense_expert: bool = False) -> WaypointDistribution:
    """One autoregressive step: encoder update, concat query, MoE block,
    waypoint head; commits Q_{t+1} into the sequence."""
    t = seq.filled
    if t >= cfg.horizon:
        raise SequenceStateError(f"planning sequence already complete (H={cfg.horizon})")
    encoder_update(params, prefix, seq, cfg)
    a = seq.active()
    B = seq.batch
    d = cfg.d_model

    te_row = params[f"{prefix}.te_table"][t:t + 1]
    te_t = te_row.reshape(1, 1, d) + Tensor(np.zeros((B, 1, 1)))
    c_t, n_active = build_concat_query(te_t, q_s, seq)
    q_cur = seq.queries[:, a - 1, :]
    q_r = concat([te_t.reshape(B, d), q_s, q_cur], axis=-1)

    if dense_expert:
        from .moe import expert_forward
        out = expert_forward(params, f"{prefix}.moe.dense", bev, c_t,
                             cfg.n_heads) + c_t
    else:
        out = moe_block_routed(params, f"{prefix}.moe", bev, c_t, q_r,
                               moe_cfg, router_fn)
    q_next = out[:, n_active - 1, :]

    head = nn.mlp(params, f"{prefix}.head", q_next, 2)
    mu = head[:, :3]
    sigma = head[:, 3:].softplus() + cfg.sigma_floor

    before = seq.queries[:, :t, :]
    after = seq.queries[:, t + 1:, :]
    pieces = [p for p in (before, q_next.reshape(B, 1, d), after)
              if p.shape[1] > 0]
    seq.queries = concat(pieces, axis=1)
    seq.filled = t + 1
    return WaypointDistribution(mu=mu, sigma=sigma)


def moe_block_routed(params, prefix, bev, c_t, q_r, moe_cfg, router_fn):
    if router_fn is route:
        return moe_block(params, prefix, bev, c_t, q_r, moe_cfg)
    return moe_block(params, prefix, bev, c_t, q_r, moe_cfg,
                     router=router_fn(params, prefix, q_r, moe_cfg))


def sample_waypoint(dist: WaypointDistribution, mode: str,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Mean mode returns mu; sample mode draws mu + sigma * N(0, 1).
    Heading is wrapped to (-pi, pi]."""
    if mode == "mean":
        pts = dist.mu.data.copy()
    elif mode == "sample":
        if rng is None:
            raise ValueError("sample mode requires an rng")
        pts = dist.mu.data + dist.sigma.data * rng.standard_normal(dist.mu.shape)
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    from .scenes import wrap_angle
    pts[:, 2] = wrap_angle(pts[:, 2])
    return pts


def rollout(params: nn.Params, prefix: str, bev: Tensor, ego: Tensor,
            cfg: PlannerConfig, moe_cfg: MoEConfig, mode: str = "mean",
            rng: np.random.Generator | None = None, router_fn=route,
            dense_expert: bool = False):
    """Run all H autoregressive steps for a batch.

    Returns (traj_mu [B,H,3] Tensor with wrapped headings, dists, seq,
    sampled waypoints [B,H,3] ndarray).
    """
    B = bev.shape[0]
    q_s = encode_ego(params, prefix, ego)
    seq = init_sequence(params, prefix, cfg, B)
    dists = []
    sampled = np.zeros((B, cfg.horizon, 3))
    for t in range(cfg.horizon):
        dist = ar_step(params, prefix, bev, seq, q_s, cfg, moe_cfg,
                       router_fn=router_fn, dense_expert=dense_expert)
        dists.append(dist)
        sampled[:, t, :] = sample_waypoint(dist, mode, rng)
    mus = concat([d.mu.reshape(B, 1, 3) for d in dists], axis=1)
    xy = mus[:, :, :2]
    heading = wrap_angle_t(mus[:, :, 2:3])
    traj = concat([xy, heading], axis=-1)
    return traj, dists, seq, sampled


def rollout_oneshot(params: nn.Params, prefix: str, bev: Tensor, ego: Tensor,
                    cfg: PlannerConfig, moe_cfg: MoEConfig, router_fn=route,
                    dense_expert: bool = False):
    """Non-autoregressive ablation: all H waypoints from a single MoE pass."""
    B = bev.shape[0]
    d = cfg.d_model
    q_s = encode_ego(params, prefix, ego)
    seq = init_sequence(params, prefix, cfg, B)
    seq.filled = cfg.horizon
    encoder_update(params, prefix, seq, cfg)
    te_row = params[f"{prefix}.te_table"][0:1]
    te_t = te_row.reshape(1, 1, d) + Tensor(np.zeros((B, 1, 1)))
    c_t, _ = build_concat_query(te_t, q_s, seq)
    q_r = concat([te_t.reshape(B, d), q_s, seq.queries[:, -1, :]], axis=-1)
    if dense_expert:
        from .moe import expert_forward
        out = expert_forward(params, f"{prefix}.moe.dense", bev, c_t,
                             cfg.n_heads) + c_t
    else:
        out = moe_block_routed(params, f"{prefix}.moe", bev, c_t, q_r,
                               moe_cfg, router_fn)
    tokens = out[:, 2:2 + cfg.horizon, :]
    head = nn.mlp(params, f"{prefix}.head", tokens, 2)
    mu = head[:, :, :3]
    sigma = head[:, :, 3:].softplus() + cfg.sigma_floor
    dists = [WaypointDistribution(mu=mu[:, t, :], sigma=sigma[:, t, :])
             for t in range(cfg.horizon)]
    xy = mu[:, :, :2]
    heading = wrap_angle_t(mu[:, :, 2:3])
    traj = concat([xy, heading], axis=-1)
    return traj, dists, seq, traj.data.copy()
