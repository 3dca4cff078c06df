"""Two-stage trajectory refinement.

Stage 1: semantic map encoding + GRU point-by-point adjustment, then a soft
kinematic projection (penalized gradient descent with a proximity anchor).
Stage 2: cascaded cross-attention against agent and ego planning queries.
All output heads are residual and zero-initialized, so the whole refiner is
the identity map at init.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .scenes import A_MAX, DT, KAPPA_MAX
from .tensor import Tensor, concat, conv2d, stack


@dataclass
class RefinerConfig:
    d_model: int = 64
    n_heads: int = 4
    d_sem: int = 32
    gru_hidden: int = 32
    n_layers: int = 2            # cascaded cross-attention depth
    kappa_max: float = KAPPA_MAX
    a_max: float = A_MAX
    project_iters: int = 20
    project_step: float = 0.1


# softplus^-1 of the initial constraint weights; chosen so the fixed-step
# descent is stable (step * Lipschitz < 2) while perturbed trajectories land
# inside the curvature/acceleration bounds
_W_SMOOTH_RAW = -0.7     # ~0.40
_W_CURV_RAW = 2.0        # ~2.13
_W_ACCEL_RAW = -1.0      # ~0.31


def init_refiner(params: nn.Params, prefix: str, cfg: RefinerConfig,
                 rng: np.random.Generator):
    d = cfg.d_model
    # semantic encoder: two strided conv layers + pooled affine
    params.add(f"{prefix}.conv0.w", rng.normal(0, 0.2, (8, 4, 3, 3)))
    params.add(f"{prefix}.conv0.b", np.zeros(8))
    params.add(f"{prefix}.conv1.w", rng.normal(0, 0.2, (16, 8, 3, 3)))
    params.add(f"{prefix}.conv1.b", np.zeros(16))
    nn.init_linear(params, f"{prefix}.sem_out", 16, cfg.d_sem, rng)
    # GRU trajectory encoder / decoder with residual output layer
    nn.init_gru_cell(params, f"{prefix}.enc_gru", 3, cfg.gru_hidden, rng)
    nn.init_mlp(params, f"{prefix}.optimizer",
                [cfg.gru_hidden + cfg.d_sem, cfg.gru_hidden, cfg.gru_hidden], rng)
    nn.init_gru_cell(params, f"{prefix}.dec_gru", 3, cfg.gru_hidden, rng)
    nn.init_linear(params, f"{prefix}.dec_out", cfg.gru_hidden, 3, rng, zero=True)
    # learnable constraint weights (softplus keeps them positive)
    params.add(f"{prefix}.w_smooth", np.array(_W_SMOOTH_RAW))
    params.add(f"{prefix}.w_curv", np.array(_W_CURV_RAW))
    params.add(f"{prefix}.w_accel", np.array(_W_ACCEL_RAW))
    # cross-attention refinement stack
    nn.init_linear(params, f"{prefix}.pt_embed", 3, d, rng)
    nn.init_linear(params, f"{prefix}.agent_enc", 8, d, rng)
    for i in range(cfg.n_layers):
        nn.init_mha(params, f"{prefix}.xa{i}.agent", d, rng)
        nn.init_mha(params, f"{prefix}.xa{i}.ego", d, rng)
        nn.init_linear(params, f"{prefix}.xa{i}.ff0", d, 4 * d, rng)
        nn.init_linear(params, f"{prefix}.xa{i}.ff1", 4 * d, d, rng)
        nn.init_layer_norm(params, f"{prefix}.xa{i}.ln_a", d)
        nn.init_layer_norm(params, f"{prefix}.xa{i}.ln_e", d)
        nn.init_layer_norm(params, f"{prefix}.xa{i}.ln_f", d)
    nn.init_linear(params, f"{prefix}.out_head", d, 3, rng, zero=True)


def constraint_weights(params: nn.Params, prefix: str):
    return (params[f"{prefix}.w_smooth"].softplus(),
            params[f"{prefix}.w_curv"].softplus(),
            params[f"{prefix}.w_accel"].softplus())


def encode_semantic(params: nn.Params, prefix: str, sem_onehot: Tensor) -> Tensor:
    """[B, 4, 32, 32] one-hot semantic map -> [B, d_sem] pooled features."""
    h = conv2d(sem_onehot, params[f"{prefix}.conv0.w"],
               params[f"{prefix}.conv0.b"], stride=2).relu()
    h = conv2d(h, params[f"{prefix}.conv1.w"],
               params[f"{prefix}.conv1.b"], stride=2).relu()
    pooled = h.mean(axis=(2, 3))
    return nn.linear(params, f"{prefix}.sem_out", pooled)


def optimize_points(params: nn.Params, prefix: str, traj: Tensor,
                    f_sem: Tensor, cfg: RefinerConfig) -> Tensor:
    """GRU-encode the trajectory, fuse with semantic features, then decode a
    residual adjustment per point."""
    B, H, _ = traj.shape
    h = Tensor(np.zeros((B, cfg.gru_hidden)))
    for i in range(H):
        h = nn.gru_cell(params, f"{prefix}.enc_gru", traj[:, i, :], h)
    combined = nn.mlp(params, f"{prefix}.optimizer",
                      concat([h, f_sem], axis=-1), 2)
    h = combined
    outs = []
    for i in range(H):
        h = nn.gru_cell(params, f"{prefix}.dec_gru", traj[:, i, :], h)
        delta = nn.linear(params, f"{prefix}.dec_out", h)
        outs.append(traj[:, i, :] + delta)
    return stack(outs, axis=1)


# ---------------------------------------------------------------------------
# Soft kinematic projection

_EPS_V = 1e-6
_EPS_C = 1e-12
# Curvature is undefined at standstill; the speed entering kappa is floored so
# the penalty (and its gradient) stays bounded for degenerate trajectories.
_V_FLOOR = 0.5
# Per-coordinate gradient cap (trust region): limits any single descent update
# to project_step * _G_MAX metres. Inactive on well-behaved inputs.
_G_MAX = 5.0


def _diff_matrices(H: int):
    dv = np.zeros((H - 1, H))
    for i in range(H - 1):
        dv[i, i], dv[i, i + 1] = -1.0, 1.0
    d2 = np.zeros((H - 2, H))
    for i in range(H - 2):
        d2[i, i], d2[i, i + 1], d2[i, i + 2] = 1.0, -2.0, 1.0
    return dv, d2


def projection_objective(p: np.ndarray, ref: np.ndarray, w_smooth: float,
                         w_curv: float, w_accel: float,
                         cfg: RefinerConfig) -> np.ndarray:
    """Penalty objective per batch element (numpy, used for monitoring)."""
    H = p.shape[1]
    dv, d2 = _diff_matrices(H)
    xy = p[:, :, :2]
    sec = d2 @ xy
    v = (dv @ xy) / DT
    a = (d2 @ xy) / DT ** 2
    m = np.sqrt((a * a).sum(-1) + _EPS_V)
    vv = v[:, :H - 2, :]
    s = np.sqrt((vv * vv).sum(-1) + _V_FLOOR ** 2)
    c = vv[:, :, 0] * a[:, :, 1] - vv[:, :, 1] * a[:, :, 0]
    cmag = np.sqrt(c * c + _EPS_C)
    kappa = cmag / s ** 3
    obj = (w_smooth * (sec * sec).sum((1, 2))
           + w_curv * (np.maximum(kappa - cfg.kappa_max, 0.0) ** 2).sum(1)
           + w_accel * (np.maximum(m - cfg.a_max, 0.0) ** 2).sum(1)
           + ((p - ref) ** 2).sum((1, 2)))
    return obj


def _projection_grad(p: Tensor, ref: Tensor, w_smooth: Tensor, w_curv: Tensor,
                     w_accel: Tensor, cfg: RefinerConfig) -> Tensor:
    """Analytic gradient of the penalty objective w.r.t. the points, written
    in tensor ops so training can differentiate through the descent."""
    B, H, _ = p.shape
    dv_np, d2_np = _diff_matrices(H)
    DV, D2 = Tensor(dv_np), Tensor(d2_np)
    DVt, D2t = Tensor(dv_np.T), Tensor(d2_np.T)

    xy = p[:, :, :2]
    g_prox = 2.0 * (p - ref)

    sec = D2 @ xy                                   # [B, H-2, 2]
    g_smooth = (2.0 * w_smooth) * (D2t @ sec)

    v = (DV @ xy) * (1.0 / DT)                      # [B, H-1, 2]
    a = (D2 @ xy) * (1.0 / DT ** 2)                 # [B, H-2, 2]

    m = (a * a).sum(axis=-1)
    m = (m + _EPS_V).sqrt()                         # [B, H-2]
    f_acc = (2.0 * w_accel) * (m - cfg.a_max).relu()
    ga = (f_acc / m).reshape(B, H - 2, 1) * a
    g_accel = (D2t @ ga) * (1.0 / DT ** 2)

    vv = v[:, :H - 2, :]
    s = ((vv * vv).sum(axis=-1) + _V_FLOOR ** 2).sqrt()  # [B, H-2]
    c = vv[:, :, 0] * a[:, :, 1] - vv[:, :, 1] * a[:, :, 0]
    cmag = c.abs_smooth(_EPS_C)
    s3 = s * s * s
    kappa = cmag / s3
    r = (2.0 * w_curv) * (kappa - cfg.kappa_max).relu()
    dc = r * (c / cmag) / s3                        # dJ/dc
    ds = r * (-3.0) * cmag / (s3 * s)               # dJ/ds
    gv = stack([dc * a[:, :, 1], -dc * a[:, :, 0]], axis=-1) \
        + ds.reshape(B, H - 2, 1) * (vv / s.reshape(B, H - 2, 1))
    ga2 = stack([-dc * vv[:, :, 1], dc * vv[:, :, 0]], axis=-1)
    gv_full = concat([gv, Tensor(np.zeros((B, 1, 2)))], axis=1)
    g_curv = (DVt @ gv_full) * (1.0 / DT) + (D2t @ ga2) * (1.0 / DT ** 2)

    g_xy = g_smooth + g_accel + g_curv
    zeros_h = Tensor(np.zeros((B, H, 1)))
    return g_prox + concat([g_xy, zeros_h], axis=-1)


def kinematic_project(params: nn.Params, prefix: str, traj: Tensor,
                      cfg: RefinerConfig, record_objective: bool = False):
    """Fixed-count gradient descent toward smooth, curvature- and
    acceleration-feasible points, anchored to the input by a proximity term."""
    if traj.shape[1] < 3:
        raise nn.ShapeError("kinematic projection expects >= 3 points")
    w_s, w_c, w_a = constraint_weights(params, prefix)
    p = traj
    objectives = []
    for _ in range(cfg.project_iters):
        if record_objective:
            objectives.append(projection_objective(
                p.data, traj.data, float(w_s.data), float(w_c.data),
                float(w_a.data), cfg))
        g = _projection_grad(p, traj, w_s, w_c, w_a, cfg)
        # detached per-sample step safeguard: cap extreme gradients, then
        # halve the step for any sample whose objective would increase. Both
        # checks leave the nominal fixed-step descent untouched on
        # well-behaved inputs.
        gmax = np.abs(g.data).reshape(g.shape[0], -1).max(axis=1)
        scale = np.where(gmax > _G_MAX, _G_MAX / np.maximum(gmax, 1e-300), 1.0)
        obj_cur = projection_objective(p.data, traj.data, float(w_s.data),
                                       float(w_c.data), float(w_a.data), cfg)
        for _ in range(40):
            cand = p.data - cfg.project_step * scale[:, None, None] * g.data
            obj_cand = projection_objective(
                cand, traj.data, float(w_s.data), float(w_c.data),
                float(w_a.data), cfg)
            worse = obj_cand > obj_cur
            if not worse.any():
                break
            scale = np.where(worse, scale * 0.5, scale)
        p = p - g * Tensor(cfg.project_step * scale.reshape(-1, 1, 1))
    if record_objective:
        objectives.append(projection_objective(
            p.data, traj.data, float(w_s.data), float(w_c.data),
            float(w_a.data), cfg))
        return p, np.asarray(objectives)
    return p


# ---------------------------------------------------------------------------
# Cross-attention refinement


def agent_features(agents: np.ndarray) -> np.ndarray:
    """Normalized per-agent conditioning vector (8 values)."""
    if agents.shape[0] == 0:
        return np.zeros((0, 8))
    return np.stack([agents[:, 0] / 32.0, agents[:, 1] / 32.0,
                     agents[:, 2] / 10.0, agents[:, 3] / 10.0,
                     agents[:, 4], agents[:, 5],
                     np.cos(agents[:, 6]), np.sin(agents[:, 6])], axis=1)


def cross_attention_refine(params: nn.Params, prefix: str, y_hat: Tensor,
                           agent_feats: np.ndarray, agent_mask: np.ndarray,
                           q_ego: Tensor, cfg: RefinerConfig) -> Tensor:
    """Cascaded blocks: trajectory embeddings attend to agents, then to the
    ego planning queries, then feed-forward; a zero-init head emits residuals.

    agent_feats: [B, A, 8] zero-padded; agent_mask: [B, A] bool. Samples with
    no agents skip the agent attention (identity on that sublayer).
    """
    B, H, _ = y_hat.shape
    e = nn.linear(params, f"{prefix}.pt_embed", y_hat)
    has_agents = agent_mask.any(axis=1)
    if agent_feats.shape[1] > 0:
        q_agent = nn.linear(params, f"{prefix}.agent_enc", Tensor(agent_feats))
        # dummy all-True rows keep softmax defined; output is zeroed below
        mask = np.where(has_agents[:, None], agent_mask, True)
        mask4 = mask[:, None, None, :]  # [B, heads, Lq, A] broadcast
    for i in range(cfg.n_layers):
        if agent_feats.shape[1] > 0 and has_agents.any():
            att = nn.mha(params, f"{prefix}.xa{i}.agent", e, q_agent, q_agent,
                         cfg.n_heads, mask=mask4)
            sel = Tensor(has_agents[:, None, None].astype(float))
            e = sel * nn.layer_norm_p(params, f"{prefix}.xa{i}.ln_a", e + att) \
                + (1.0 - sel) * e
        att = nn.mha(params, f"{prefix}.xa{i}.ego", e, q_ego, q_ego, cfg.n_heads)
        e = nn.layer_norm_p(params, f"{prefix}.xa{i}.ln_e", e + att)
        f = nn.linear(params, f"{prefix}.xa{i}.ff1",
                      nn.linear(params, f"{prefix}.xa{i}.ff0", e).relu())
        e = nn.layer_norm_p(params, f"{prefix}.xa{i}.ln_f", e + f)
    res = nn.linear(params, f"{prefix}.out_head", e)
    out = y_hat + res
    from .planner import wrap_angle_t
    xy = out[:, :, :2]
    heading = wrap_angle_t(out[:, :, 2:3])
    return concat([xy, heading], axis=-1)


def refine(params: nn.Params, prefix: str, traj: Tensor, sem_onehot: Tensor,
           agent_feats: np.ndarray, agent_mask: np.ndarray, q_ego: Tensor,
           cfg: RefinerConfig) -> Tensor:
    """Full two-stage refinement pipeline."""
    f_sem = encode_semantic(params, prefix, sem_onehot)
    y1 = optimize_points(params, prefix, traj, f_sem, cfg)
    y2 = kinematic_project(params, prefix, y1, cfg)
    return cross_attention_refine(params, prefix, y2, agent_feats, agent_mask,
                                  q_ego, cfg)
