"""Full planner model: BEV projection, autoregressive MoE planning loop,
two-stage refinement, and the semantic-map reconstruction stub head; plus
batch assembly, routing-mode overrides, and checkpoint I/O.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn, scenes
from .moe import MoEConfig, RouterOutput, route
from .planner import PlannerConfig, rollout, rollout_oneshot
from .refiner import RefinerConfig, agent_features, refine
from .tensor import Tensor

CHECKPOINT_FORMAT = "ckpt-v1"


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 64
    n_private: int = 5
    n_shared: int = 1
    k: int = 2
    n_heads: int = 4
    encoder_layers: int = 2
    refine_layers: int = 2
    d_sem: int = 32
    gru_hidden: int = 32
    sigma_floor: float = 1e-3
    horizon: int = scenes.HORIZON
    routing_mode: str = "intrinsic"   # intrinsic | command | fixed-expert-N
    no_moe: bool = False
    no_ar: bool = False
    no_refine: bool = False

    def planner_cfg(self) -> PlannerConfig:
        return PlannerConfig(d_model=self.d_model, n_heads=self.n_heads,
                             encoder_layers=self.encoder_layers,
                             horizon=self.horizon, sigma_floor=self.sigma_floor)

    def moe_cfg(self) -> MoEConfig:
        return MoEConfig(n_private=self.n_private, n_shared=self.n_shared,
                         k=self.k, d_model=self.d_model, n_heads=self.n_heads)

    def refiner_cfg(self) -> RefinerConfig:
        return RefinerConfig(d_model=self.d_model, n_heads=self.n_heads,
                             d_sem=self.d_sem, gru_hidden=self.gru_hidden,
                             n_layers=self.refine_layers)


@dataclass
class Batch:
    bev: np.ndarray          # [B, C_BEV, D_FEAT]
    ego: np.ndarray          # [B, 8]
    sem_labels: np.ndarray   # [B, GRID, GRID] int
    sem_onehot: np.ndarray   # [B, 4, GRID, GRID]
    agent_feats: np.ndarray  # [B, A_max, 8]
    agent_mask: np.ndarray   # [B, A_max] bool
    commands: np.ndarray     # [B] int command index
    gt: np.ndarray           # [B, H, 3]
    scenes: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.bev.shape[0]


def make_batch(scene_list) -> Batch:
    B = len(scene_list)
    a_max = max((s.agents.shape[0] for s in scene_list), default=0)
    a_max = max(a_max, 1)
    bev = np.stack([s.bev_tokens for s in scene_list])
    ego = np.stack([s.ego.vector() for s in scene_list])
    labels = np.stack([s.semantic_map.astype(int) for s in scene_list])
    onehot = np.eye(scenes.N_CLASSES)[labels].transpose(0, 3, 1, 2)
    feats = np.zeros((B, a_max, 8))
    mask = np.zeros((B, a_max), dtype=bool)
    for i, s in enumerate(scene_list):
        na = s.agents.shape[0]
        if na:
            feats[i, :na] = agent_features(s.agents)
            mask[i, :na] = True
    commands = np.array([int(np.argmax(s.ego.command)) for s in scene_list])
    gt = np.stack([s.gt_trajectory for s in scene_list])
    return Batch(bev=bev, ego=ego, sem_labels=labels, sem_onehot=onehot,
                 agent_feats=feats, agent_mask=mask, commands=commands,
                 gt=gt, scenes=list(scene_list))


def init_model(cfg: ModelConfig, seed: int) -> nn.Params:
    rng = np.random.default_rng([seed, 0xA11])
    params = nn.Params()
    nn.init_linear(params, "bev_proj", scenes.D_FEAT, cfg.d_model, rng)
    from .planner import init_planner
    init_planner(params, "plan", cfg.planner_cfg(),
                 cfg.moe_cfg() if not cfg.no_moe else MoEConfig(
                     n_private=1, k=1, d_model=cfg.d_model,
                     n_heads=cfg.n_heads),
                 rng, dense_expert=cfg.no_moe)
    from .refiner import init_refiner
    init_refiner(params, "ref", cfg.refiner_cfg(), rng)
    nn.init_linear(params, "sem_head", scenes.D_FEAT,
                   scenes.PATCH * scenes.PATCH * scenes.N_CLASSES, rng)
    return params


def _command_router(commands: np.ndarray, cfg: MoEConfig):
    ids = np.minimum(commands, cfg.n_private - 1).reshape(-1, 1)

    def router_fn(params, prefix, q_r, moe_cfg):
        B = q_r.shape[0]
        scores = Tensor(np.full((B, moe_cfg.n_private), 1.0 / moe_cfg.n_private))
        return RouterOutput(scores=scores, topk_indices=ids,
                            topk_weights=Tensor(np.ones((B, 1))))
    return router_fn


def _fixed_router(expert_id: int):
    def router_fn(params, prefix, q_r, moe_cfg):
        B = q_r.shape[0]
        if not 0 <= expert_id < moe_cfg.n_private:
            raise ValueError(f"fixed expert {expert_id} out of range")
        ids = np.full((B, 1), expert_id)
        scores = Tensor(np.full((B, moe_cfg.n_private), 1.0 / moe_cfg.n_private))
        return RouterOutput(scores=scores, topk_indices=ids,
                            topk_weights=Tensor(np.ones((B, 1))))
    return router_fn


def _router_fn(cfg: ModelConfig, batch: Batch):
    if cfg.routing_mode == "intrinsic":
        return route
    if cfg.routing_mode == "command":
        return _command_router(batch.commands, cfg.moe_cfg())
    if cfg.routing_mode.startswith("fixed-expert-"):
        return _fixed_router(int(cfg.routing_mode.rsplit("-", 1)[1]))
    raise ValueError(f"unknown routing mode {cfg.routing_mode!r}")


@dataclass
class ForwardOutput:
    traj: Tensor             # [B, H, 3] final (refined) trajectory, mu path
    traj_init: Tensor        # [B, H, 3] pre-refinement
    dists: list              # per-step WaypointDistribution
    sem_logits: Tensor       # [B, C_BEV, PATCH*PATCH*N_CLASSES]
    sampled: np.ndarray      # [B, H, 3] sampled waypoints (mode-dependent)
    pe_count: int


def semantic_logits(params: nn.Params, bev: np.ndarray) -> Tensor:
    return nn.linear(params, "sem_head", Tensor(bev))


def forward(params: nn.Params, cfg: ModelConfig, batch: Batch,
            mode: str = "mean",
            rng: np.random.Generator | None = None) -> ForwardOutput:
    pcfg = cfg.planner_cfg()
    mcfg = cfg.moe_cfg() if not cfg.no_moe else None
    bev = nn.linear(params, "bev_proj", Tensor(batch.bev))
    ego = Tensor(batch.ego)
    router_fn = _router_fn(cfg, batch) if not cfg.no_moe else route
    roll = rollout_oneshot if cfg.no_ar else rollout
    kwargs = {} if cfg.no_ar else {"mode": mode, "rng": rng}
    traj_init, dists, seq, sampled = roll(
        params, "plan", bev, ego, pcfg,
        mcfg if mcfg is not None else MoEConfig(n_private=1, k=1,
                                                d_model=cfg.d_model,
                                                n_heads=cfg.n_heads),
        router_fn=router_fn, dense_expert=cfg.no_moe, **kwargs)
    if cfg.no_refine:
        traj = traj_init
    else:
        traj = refine(params, "ref", traj_init, Tensor(batch.sem_onehot),
                      batch.agent_feats, batch.agent_mask, seq.queries,
                      cfg.refiner_cfg())
    sem = semantic_logits(params, batch.bev)
    return ForwardOutput(traj=traj, traj_init=traj_init, dists=dists,
                         sem_logits=sem, sampled=sampled,
                         pe_count=seq.pe_count)


# ---------------------------------------------------------------------------
# Checkpoints: JSON header line + concatenated float64 parameter blob


def save_checkpoint(path, params: nn.Params, cfg: ModelConfig,
                    config_hash: str, epoch: int, seed: int) -> None:
    names = list(params.keys())
    header = {"format": CHECKPOINT_FORMAT, "config": asdict(cfg),
              "config_hash": config_hash, "epoch": int(epoch),
              "seed": int(seed),
              "params": [[n, list(params[n].shape)] for n in names]}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(params[n].data).tobytes())


def load_checkpoint(path):
    """Returns (params, ModelConfig, header dict)."""
    with open(path, "rb") as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"bad checkpoint header: {exc}") from exc
        if header.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(
                f"unsupported checkpoint format {header.get('format')!r}")
        params = nn.Params()
        for name, shape in header["params"]:
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise CheckpointError("checkpoint truncated")
            params.add(name, np.frombuffer(raw, dtype=np.float64
                                           ).reshape(shape).copy())
    cfg = ModelConfig(**header["config"])
    return params, cfg, header
